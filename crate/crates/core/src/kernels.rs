//! Per-edge weighting kernels.
//!
//! * [`EdgeConditionedKernel`]: the weight matrix of edge `i → o` is generated
//!   by an MLP from the edge label, `W = k_θ(r)`.
//! * [`AttentionKernel`]: a shared matrix `W` scaled by a softmax-normalised
//!   score computed from the concatenated transformed endpoint features.
//! * [`EdgeConditionedAttentionKernel`]: as above but the score is computed
//!   from the edge label alone.
//!
//! The attention families produce coefficients that sum to one over the
//! in-edges of every output node; the message of edge `i → o` is
//! `α · W f_i` and messages are summed.

use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::graph::{BipartiteGraph, GraphSignal};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{glorot_uniform, Activation, Rng, Tape, Tensor, Var};

/// Negative slope of the leaky-relu applied to attention scores.
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Fully connected network: affine layers with `hidden` activation between
/// them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
    hidden: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        rng: &mut Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an mlp needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let weight = store.add(
                    format!("{prefix}.{l}.w"),
                    glorot_uniform(rng, &[w[0], w[1]], w[0], w[1]),
                );
                let bias = store.add(format!("{prefix}.{l}.b"), Tensor::zeros(&[w[1]]));
                (weight, bias)
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            layers,
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn hidden(&self) -> Activation {
        self.hidden
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Multiply-accumulates needed for one input row.
    pub fn macs_per_row(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(h, bind.get(w), Some(bind.get(b)))?;
            if l + 1 < self.layers.len() {
                h = tape.activation(h, self.hidden)?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Ecc,
    Gat,
    Eca,
}

impl FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ecc" => Ok(Self::Ecc),
            "gat" => Ok(Self::Gat),
            "eca" => Ok(Self::Eca),
            other => Err(Error::Argument(format!(
                "unknown kernel `{other}` (expected ecc, gat or eca)"
            ))),
        }
    }
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ecc => "ecc",
            Self::Gat => "gat",
            Self::Eca => "eca",
        })
    }
}

/// `W_{o,i} = reshape(mlp_θ(r_{o,i}), M × N)`.
#[derive(Clone, Debug)]
pub struct EdgeConditionedKernel {
    pub label_dim: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub mlp: Mlp,
}

impl EdgeConditionedKernel {
    /// `hidden` lists the hidden widths of the kernel MLP (tanh between
    /// layers); an empty list makes the kernel affine in the label.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        label_dim: usize,
        in_dim: usize,
        out_dim: usize,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Self {
        let mut dims = vec![label_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim * in_dim);
        let mlp = Mlp::new(
            store,
            &format!("{prefix}.kernel"),
            &dims,
            Activation::Tanh,
            rng,
        );
        // Rescale the output layer so generated matrices start with a variance
        // of about 2/N, the fan-in scale of a dense N → M layer. The bias is
        // random as well, so a zero label (a self-edge) still gets a weight.
        let (w, b) = *mlp.layers().last().unwrap();
        let h = dims[dims.len() - 2];
        store.set(
            w,
            glorot_uniform(rng, &[h, out_dim * in_dim], in_dim * h, in_dim * h),
        );
        store.set(b, glorot_uniform(rng, &[out_dim * in_dim], in_dim, in_dim));
        Self {
            label_dim,
            in_dim,
            out_dim,
            mlp,
        }
    }

    /// Flattened per-edge weights, `m × (M·N)`, row-major `M × N` per edge.
    pub fn weights(&self, tape: &mut Tape, bind: &Binding, labels: Var) -> Result<Var> {
        let d = tape.value(labels).cols();
        if d != self.label_dim {
            return shape_err(format!(
                "edge labels have dim {d}, kernel expects {}",
                self.label_dim
            ));
        }
        self.mlp.forward(tape, bind, labels)
    }
}

/// Attention over concatenated transformed endpoint features.
#[derive(Clone, Debug)]
pub struct AttentionKernel {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Shared transform stored as `N × M` (applied as `f · W`).
    pub weight: ParamId,
    /// `2M → 1` scoring layer.
    pub score: Mlp,
}

impl AttentionKernel {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.kernel.w"),
            glorot_uniform(rng, &[in_dim, out_dim], in_dim, out_dim),
        );
        let score = Mlp::new(
            store,
            &format!("{prefix}.attn"),
            &[2 * out_dim, 1],
            Activation::Identity,
            rng,
        );
        Self {
            in_dim,
            out_dim,
            weight,
            score,
        }
    }

    /// Returns `(α, W f_src)` per edge.
    ///
    /// When the output set is the input set the destination feature is the
    /// destination's own transformed feature; otherwise it is the mean of the
    /// transformed features in the destination's neighbourhood.
    pub fn coefficients(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        features: Var,
        bg: &BipartiteGraph,
    ) -> Result<(Var, Var)> {
        check_features(tape, features, bg, self.in_dim)?;
        let h = tape.matmul(features, bind.get(self.weight))?;
        let h_src = tape.gather_rows(h, bg.sources())?;
        let h_dst = if bg.shares_node_set() {
            tape.gather_rows(h, bg.targets())?
        } else {
            let proxy =
                tape.segment_reduce(h_src, bg.targets(), bg.num_out(), crate::Reduction::Mean)?;
            tape.gather_rows(proxy, bg.targets())?
        };
        let pair = tape.concat_cols(h_src, h_dst)?;
        let alpha = normalized_scores(tape, bind, &self.score, pair, bg)?;
        Ok((alpha, h_src))
    }
}

/// Attention whose score depends only on the edge label.
#[derive(Clone, Debug)]
pub struct EdgeConditionedAttentionKernel {
    pub label_dim: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    /// `d → 1` scoring layer.
    pub score: Mlp,
}

impl EdgeConditionedAttentionKernel {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        label_dim: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.kernel.w"),
            glorot_uniform(rng, &[in_dim, out_dim], in_dim, out_dim),
        );
        let score = Mlp::new(
            store,
            &format!("{prefix}.attn"),
            &[label_dim, 1],
            Activation::Identity,
            rng,
        );
        Self {
            label_dim,
            in_dim,
            out_dim,
            weight,
            score,
        }
    }

    /// Per-edge `α` from the labels; never reads node features.
    pub fn alphas(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        labels: Var,
        bg: &BipartiteGraph,
    ) -> Result<Var> {
        let d = tape.value(labels).cols();
        if d != self.label_dim || tape.value(labels).rows() != bg.num_edges() {
            return shape_err(format!(
                "labels {:?} do not match {} edges of dim {}",
                tape.value(labels).shape(),
                bg.num_edges(),
                self.label_dim
            ));
        }
        normalized_scores(tape, bind, &self.score, labels, bg)
    }

    /// Returns `(α, W f_src)` per edge.
    pub fn coefficients(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        features: Var,
        labels: Var,
        bg: &BipartiteGraph,
    ) -> Result<(Var, Var)> {
        check_features(tape, features, bg, self.in_dim)?;
        let alpha = self.alphas(tape, bind, labels, bg)?;
        let h = tape.matmul(features, bind.get(self.weight))?;
        let h_src = tape.gather_rows(h, bg.sources())?;
        Ok((alpha, h_src))
    }
}

fn normalized_scores(
    tape: &mut Tape,
    bind: &Binding,
    score: &Mlp,
    input: Var,
    bg: &BipartiteGraph,
) -> Result<Var> {
    let s = score.forward(tape, bind, input)?;
    let s = tape.activation(s, Activation::LeakyRelu(ATTENTION_SLOPE))?;
    tape.segment_softmax(s, bg.targets(), bg.num_out())
}

fn check_features(tape: &Tape, features: Var, bg: &BipartiteGraph, in_dim: usize) -> Result<()> {
    let f = tape.value(features);
    if !f.is_matrix() || f.rows() != bg.num_in() || f.cols() != in_dim {
        return shape_err(format!(
            "features {:?} do not match {} input nodes of dim {in_dim}",
            f.shape(),
            bg.num_in()
        ));
    }
    Ok(())
}

/// One of the three kernel families with its parameters.
#[derive(Clone, Debug)]
pub enum Kernel {
    EdgeConditioned(EdgeConditionedKernel),
    Attention(AttentionKernel),
    EdgeConditionedAttention(EdgeConditionedAttentionKernel),
}

impl Kernel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        family: KernelFamily,
        store: &mut ParamStore,
        prefix: &str,
        label_dim: usize,
        in_dim: usize,
        out_dim: usize,
        ecc_hidden: &[usize],
        rng: &mut Rng,
    ) -> Self {
        match family {
            KernelFamily::Ecc => Kernel::EdgeConditioned(EdgeConditionedKernel::new(
                store, prefix, label_dim, in_dim, out_dim, ecc_hidden, rng,
            )),
            KernelFamily::Gat => {
                Kernel::Attention(AttentionKernel::new(store, prefix, in_dim, out_dim, rng))
            }
            KernelFamily::Eca => Kernel::EdgeConditionedAttention(
                EdgeConditionedAttentionKernel::new(store, prefix, label_dim, in_dim, out_dim, rng),
            ),
        }
    }

    pub fn family(&self) -> KernelFamily {
        match self {
            Kernel::EdgeConditioned(_) => KernelFamily::Ecc,
            Kernel::Attention(_) => KernelFamily::Gat,
            Kernel::EdgeConditionedAttention(_) => KernelFamily::Eca,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Kernel::EdgeConditioned(k) => k.in_dim,
            Kernel::Attention(k) => k.in_dim,
            Kernel::EdgeConditionedAttention(k) => k.in_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Kernel::EdgeConditioned(k) => k.out_dim,
            Kernel::Attention(k) => k.out_dim,
            Kernel::EdgeConditionedAttention(k) => k.out_dim,
        }
    }

    pub fn is_attention(&self) -> bool {
        !matches!(self, Kernel::EdgeConditioned(_))
    }
}

/// Evaluates an edge-conditioned kernel on `labels: m × d`, returning the
/// stack of weight matrices as an `m × M × N` tensor.
pub fn ecc_weights(
    k: &EdgeConditionedKernel,
    params: &ParamStore,
    labels: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape, false);
    let l = tape.constant(labels.clone());
    let w = k.weights(&mut tape, &bind, l)?;
    tape.value(w)
        .clone()
        .reshape(vec![labels.rows(), k.out_dim, k.in_dim])
}

/// Attention coefficients (`m × 1`, canonical edge order) of `bg` for the
/// given input features.
pub fn gat_coeffs(
    k: &AttentionKernel,
    params: &ParamStore,
    features: &GraphSignal,
    bg: &BipartiteGraph,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape, false);
    let f = tape.constant(features.features().clone());
    let (alpha, _) = k.coefficients(&mut tape, &bind, f, bg)?;
    Ok(tape.value(alpha).clone())
}

/// Edge-conditioned attention coefficients (`m × 1`) from `labels: m × d`.
pub fn eca_coeffs(
    k: &EdgeConditionedAttentionKernel,
    params: &ParamStore,
    labels: &Tensor,
    bg: &BipartiteGraph,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape, false);
    let l = tape.constant(labels.clone());
    let alpha = k.alphas(&mut tape, &bind, l, bg)?;
    Ok(tape.value(alpha).clone())
}
