//! Graph autoencoder: bipartite coarsening stages, expansion back to the
//! finer node sets and optional skip connections fused by
//! [`aggregate`](crate::conv::aggregate).

use crate::coarsening::{build_coarsening_bigraph, build_expansion_bigraph, voxel_grid, Remap};
use crate::conv::{aggregate, bipartite_conv, Reduction};
use crate::data::{GraphSample, Target};
use crate::error::{arg_err, Error, Result};
use crate::graph::{BipartiteGraph, DirectedGraph};
use crate::kernels::{Kernel, KernelFamily};
use crate::network::Mode;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{rng_from_seed, Activation, Rng, Tape, Tensor, Var};
use crate::train::{Model, Task};

/// One encoder stage: a bipartite convolution onto VoxelGrid super-nodes of
/// resolution `rho`, connecting nodes within `r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage {
    pub features: usize,
    pub r: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderSpec {
    pub input_dim: usize,
    pub stages: Vec<Stage>,
    /// Encoder stages (1-based, below the deepest) whose output is fused into
    /// the decoder at the same node set.
    pub skips: Vec<usize>,
    pub output_dim: usize,
    pub kernel: KernelFamily,
    pub red: Reduction,
    pub ecc_hidden: Vec<usize>,
}

impl AutoencoderSpec {
    /// Two stages over MNIST pixel graphs, decoding back onto the full grid.
    pub fn mnist(skip: bool) -> Self {
        Self {
            input_dim: 1,
            stages: vec![
                Stage {
                    features: 16,
                    r: 2.0,
                    rho: 3.4,
                },
                Stage {
                    features: 32,
                    r: 4.0,
                    rho: 6.8,
                },
            ],
            skips: if skip { vec![1] } else { Vec::new() },
            output_dim: 1,
            kernel: KernelFamily::Ecc,
            red: Reduction::Mean,
            ecc_hidden: vec![16],
        }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    kernel: Kernel,
    bias: ParamId,
}

impl ConvLayer {
    fn new(
        store: &mut ParamStore,
        name: &str,
        n: usize,
        m: usize,
        spec: &AutoencoderSpec,
        rng: &mut Rng,
    ) -> Self {
        let kernel = Kernel::new(spec.kernel, store, name, 2, n, m, &spec.ecc_hidden, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[m]));
        Self { kernel, bias }
    }

    fn apply(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        bg: &BipartiteGraph,
        x: Var,
        red: Reduction,
        relu: bool,
    ) -> Result<Var> {
        let y = bipartite_conv(tape, bind, bg, x, &self.kernel, red)?;
        let y = tape.add_row_bias(y, bind.get(self.bias))?;
        if relu {
            tape.activation(y, Activation::Relu)
        } else {
            Ok(y)
        }
    }
}

/// A trainable graph autoencoder producing one value row per node of a fixed
/// output node set (for MNIST, the 28×28 grid).
#[derive(Clone, Debug)]
pub struct Autoencoder {
    spec: AutoencoderSpec,
    output_positions: Tensor,
    encoder: Vec<ConvLayer>,
    decoder: Vec<ConvLayer>,
    head: ConvLayer,
    skip: Vec<(usize, ConvLayer)>,
    params: ParamStore,
    /// Replaces the node count `n2` of the skip branch when set.
    pub skip_weight_override: Option<usize>,
}

impl Autoencoder {
    /// Parameters are created encoder first, then decoder, head and finally
    /// the skip branches, so the shared parameters do not depend on whether
    /// skips are present.
    pub fn new(spec: AutoencoderSpec, output_positions: Tensor, seed: u64) -> Result<Self> {
        if spec.stages.is_empty() {
            return arg_err("an autoencoder needs at least one stage");
        }
        if let Some(&s) = spec
            .skips
            .iter()
            .find(|&&s| s == 0 || s >= spec.stages.len())
        {
            return arg_err(format!("skip stage {s} has no matching decoder stage"));
        }
        if !output_positions.is_matrix() || output_positions.cols() != 2 {
            return arg_err("output positions must be an n×2 matrix");
        }
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::new();
        let mut n = spec.input_dim;
        let mut encoder = Vec::new();
        for (i, st) in spec.stages.iter().enumerate() {
            encoder.push(ConvLayer::new(
                &mut params,
                &format!("enc{i}"),
                n,
                st.features,
                &spec,
                &mut rng,
            ));
            n = st.features;
        }
        let mut decoder = Vec::new();
        for s in (1..spec.stages.len()).rev() {
            let m = spec.stages[s - 1].features;
            decoder.push(ConvLayer::new(
                &mut params,
                &format!("dec{s}"),
                n,
                m,
                &spec,
                &mut rng,
            ));
            n = m;
        }
        let head = ConvLayer::new(&mut params, "head", n, spec.output_dim, &spec, &mut rng);
        let mut skips = spec.skips.clone();
        skips.sort_unstable();
        skips.dedup();
        let skip = skips
            .into_iter()
            .map(|s| {
                let f = spec.stages[s - 1].features;
                (
                    s,
                    ConvLayer::new(&mut params, &format!("skip{s}"), f, f, &spec, &mut rng),
                )
            })
            .collect();
        Ok(Self {
            spec,
            output_positions,
            encoder,
            decoder,
            head,
            skip,
            params,
            skip_weight_override: None,
        })
    }

    pub fn spec(&self) -> &AutoencoderSpec {
        &self.spec
    }

    /// Decoded output, `|output nodes| × output_dim`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        graph: &DirectedGraph,
        x: Var,
    ) -> Result<Var> {
        if graph.positions().is_none() {
            return arg_err("autoencoder input needs node positions");
        }
        let red = self.spec.red;
        let mut g = graph.clone();
        let mut h = x;
        let mut levels: Vec<(Var, Tensor)> = Vec::new();
        for (st, layer) in self.spec.stages.iter().zip(&self.encoder) {
            let pos = g.positions().expect("stage graphs carry positions");
            let clustering = voxel_grid(pos, st.rho)?;
            let bg = build_coarsening_bigraph(&g, &clustering, st.r, Remap::Radius)?
                .scaled_labels(1.0 / st.r);
            h = layer.apply(tape, bind, &bg, h, red, true)?;
            let sup = clustering.super_positions().clone();
            g = DirectedGraph::empty(sup.rows(), 2).with_positions(sup.clone())?;
            levels.push((h, sup));
        }
        for (layer, s) in self.decoder.iter().zip((1..self.spec.stages.len()).rev()) {
            let coarse = &levels[s].1;
            let (enc, fine) = &levels[s - 1];
            let radius = self.spec.stages[s].rho;
            let bg = build_expansion_bigraph(coarse, fine, radius)?
                .graph
                .scaled_labels(1.0 / radius);
            let d = layer.apply(tape, bind, &bg, h, red, true)?;
            h = match self.skip.iter().find(|(k, _)| *k == s) {
                Some((_, skip)) => {
                    let r = self.spec.stages[s - 1].r;
                    let bg = build_expansion_bigraph(fine, fine, r)?
                        .graph
                        .scaled_labels(1.0 / r);
                    let e = skip.apply(tape, bind, &bg, *enc, red, true)?;
                    let n2 = self.skip_weight_override.unwrap_or(fine.rows());
                    aggregate(tape, d, e, coarse.rows(), n2)?
                }
                None => d,
            };
        }
        let radius = self.spec.stages[0].rho;
        let bg = build_expansion_bigraph(&levels[0].1, &self.output_positions, radius)?
            .graph
            .scaled_labels(1.0 / radius);
        self.head.apply(tape, bind, &bg, h, red, false)
    }

    /// Evaluation-mode reconstruction.
    pub fn reconstruct(&self, graph: &DirectedGraph, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape, false);
        let x = tape.constant(features.clone());
        let y = self.forward(&mut tape, &bind, graph, x)?;
        Ok(tape.value(y).clone())
    }
}

impl Model for Autoencoder {
    fn task(&self) -> Task {
        Task::Reconstruct
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn loss(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        sample: &GraphSample,
        _mode: Mode,
    ) -> Result<(Var, Option<bool>)> {
        let Target::Signal(target) = &sample.target else {
            return Err(Error::Argument(
                "autoencoder samples need a signal target".into(),
            ));
        };
        let x = tape.constant(sample.signal.features().clone());
        let y = self.forward(tape, bind, &sample.graph, x)?;
        Ok((tape.mse(y, target.data())?, None))
    }
}

/// Turns a classification sample of a digit into a reconstruction sample
/// whose target is the full intensity grid.
pub fn reconstruction_sample(sample: GraphSample, grid: &[f64]) -> Result<GraphSample> {
    Ok(GraphSample {
        target: Target::Signal(Tensor::matrix(grid.len(), 1, grid.to_vec())?),
        ..sample
    })
}
