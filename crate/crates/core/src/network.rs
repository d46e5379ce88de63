//! Networks built from an [`ArchSpec`].

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, LayerSpec};
use crate::coarsening::{build_coarsening_bigraph, voxel_grid, Remap};
use crate::conv::{bipartite_conv, global_max_pool, graph_conv, graph_pool, Reduction};
use crate::error::{arg_err, Error, Result};
use crate::graph::{radius_graph, DirectedGraph};
use crate::kernels::{Kernel, KernelFamily};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{glorot_uniform, rng_from_seed, Activation, Tape, Tensor, Var};
use rand::Rng as _;

/// Options shared by all graph layers of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub kernel: KernelFamily,
    /// Reduction of edge-conditioned `C` and `BC` layers. Attention kernels
    /// always sum.
    pub red: Reduction,
    pub ecc_hidden: Vec<usize>,
    /// Dimension of node positions and therefore of edge labels.
    pub label_dim: usize,
    /// Radius the input graphs were built with. Edge labels are divided by
    /// the radius of the graph they belong to.
    pub input_radius: f64,
    /// Adds a zero-labelled self-edge to every node before a `C` layer.
    pub self_loops: bool,
    pub bias: bool,
    /// Edge construction of `BC` layers.
    #[serde(with = "remap_serde")]
    pub remap: Remap,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            kernel: KernelFamily::Ecc,
            red: Reduction::Mean,
            ecc_hidden: vec![16],
            label_dim: 2,
            input_radius: 1.0,
            self_loops: true,
            bias: true,
            remap: Remap::Radius,
        }
    }
}

mod remap_serde {
    use super::Remap;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Remap, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match r {
            Remap::Radius => "radius",
            Remap::Edges => "edges",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Remap, D::Error> {
        match String::deserialize(d)?.as_str() {
            "radius" => Ok(Remap::Radius),
            "edges" => Ok(Remap::Edges),
            other => Err(serde::de::Error::custom(format!("unknown remap `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        kernel: Kernel,
        bias: Option<ParamId>,
    },
    Pool {
        r: f64,
        rho: f64,
        red: Reduction,
    },
    BConv {
        kernel: Kernel,
        bias: Option<ParamId>,
        r: f64,
        rho: f64,
    },
    Fc {
        w: ParamId,
        b: ParamId,
        relu: bool,
    },
    Gmp,
    Dropout(f64),
}

/// Forward-pass mode. Dropout is only active in training; its masks are
/// drawn from `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Output of the last layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    /// One feature row per node of the final graph.
    Nodes(usize),
    /// A single `1 × n` vector.
    Vector(usize),
}

/// A network with initialised parameters.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ArchSpec,
    config: NetworkConfig,
    input_dim: usize,
    output: OutputKind,
    layers: Vec<Layer>,
    params: ParamStore,
}

fn build_err<T>(layer: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Build {
        layer,
        message: message.into(),
    })
}

/// Instantiates `spec` for `input_dim` node features. Layer shapes are
/// checked by walking the feature dimensions through the layers; parameters
/// are drawn from `seed` in layer order.
pub fn build_network(
    spec: &ArchSpec,
    input_dim: usize,
    seed: u64,
    config: &NetworkConfig,
) -> Result<Network> {
    if spec.is_empty() {
        return build_err(0, "architecture has no layers");
    }
    if input_dim == 0 {
        return build_err(0, "input feature dimension must be at least 1");
    }
    let mut rng = rng_from_seed(seed);
    let mut params = ParamStore::new();
    let mut cur = OutputKind::Nodes(input_dim);
    let mut layers = Vec::with_capacity(spec.len());
    let last_fc = spec
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Fc(_)));
    for (i, l) in spec.layers.iter().enumerate() {
        let on_graph = |what: &str| match cur {
            OutputKind::Nodes(n) => Ok(n),
            OutputKind::Vector(_) => build_err(
                i,
                format!("{what} needs a graph input but the previous layer is flat"),
            ),
        };
        let conv_kernel = |n: usize, x: usize, params: &mut ParamStore, rng: &mut _| {
            let kernel = Kernel::new(
                config.kernel,
                params,
                &format!("l{i}"),
                config.label_dim,
                n,
                x,
                &config.ecc_hidden,
                rng,
            );
            let bias = config
                .bias
                .then(|| params.add(format!("l{i}.bias"), Tensor::zeros(&[x])));
            (kernel, bias)
        };
        let layer = match *l {
            LayerSpec::Conv(x) => {
                let n = on_graph("C")?;
                let (kernel, bias) = conv_kernel(n, x, &mut params, &mut rng);
                cur = OutputKind::Nodes(x);
                Layer::Conv { kernel, bias }
            }
            LayerSpec::BConv { features, r, rho } => {
                let n = on_graph("BC")?;
                let (kernel, bias) = conv_kernel(n, features, &mut params, &mut rng);
                cur = OutputKind::Nodes(features);
                Layer::BConv {
                    kernel,
                    bias,
                    r,
                    rho,
                }
            }
            LayerSpec::MaxPool { r, rho } | LayerSpec::AvgPool { r, rho } => {
                on_graph("pooling")?;
                let red = if matches!(l, LayerSpec::MaxPool { .. }) {
                    Reduction::Max
                } else {
                    Reduction::Mean
                };
                Layer::Pool { r, rho, red }
            }
            LayerSpec::Gmp => {
                let n = on_graph("GMP")?;
                cur = OutputKind::Vector(n);
                Layer::Gmp
            }
            LayerSpec::Fc(y) => {
                let n = match cur {
                    OutputKind::Nodes(n) | OutputKind::Vector(n) => n,
                };
                let w = params.add(format!("l{i}.w"), glorot_uniform(&mut rng, &[n, y], n, y));
                let b = params.add(format!("l{i}.b"), Tensor::zeros(&[y]));
                cur = OutputKind::Vector(y);
                Layer::Fc {
                    w,
                    b,
                    relu: Some(i) != last_fc,
                }
            }
            LayerSpec::Dropout(p) => Layer::Dropout(p),
        };
        layers.push(layer);
    }
    Ok(Network {
        spec: spec.clone(),
        config: config.clone(),
        input_dim,
        output: cur,
        layers,
        params,
    })
}

struct State {
    graph: Option<(DirectedGraph, f64)>,
    x: Var,
}

// splitmix64 finaliser, used to derive independent dropout streams
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Network {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output(&self) -> OutputKind {
        self.output
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Number of layers that operate on graphs (`C`, `BC`, and pooling).
    pub fn num_graph_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| {
                matches!(
                    l,
                    Layer::Conv { .. } | Layer::BConv { .. } | Layer::Pool { .. }
                )
            })
            .count()
    }

    /// Runs the network on one graph. `x` holds its node features.
    ///
    /// Errors raised inside a layer are wrapped in [`Error::Layer`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        graph: &DirectedGraph,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let f = tape.value(x);
        if f.rows() != graph.num_nodes() || f.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "input features {:?} do not match {} nodes of dim {}",
                f.shape(),
                graph.num_nodes(),
                self.input_dim
            )));
        }
        let mut state = State {
            graph: Some((graph.clone(), self.config.input_radius)),
            x,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let before = tape.value(state.x).len() as u64;
            state = self
                .step(tape, bind, layer, state, i, mode)
                .map_err(|e| Error::Layer {
                    index: i,
                    layer: self.spec.layers[i].to_string(),
                    source: Box::new(e),
                })?;
            let live = before + tape.value(state.x).len() as u64;
            if let Some(c) = tape.counters_mut() {
                c.peak_live_values = c.peak_live_values.max(live);
            }
        }
        Ok(state.x)
    }

    /// Evaluation-mode forward pass returning the output values.
    pub fn predict(&self, graph: &DirectedGraph, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape, false);
        let x = tape.constant(features.clone());
        let y = self.forward(&mut tape, &bind, graph, x, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }

    fn conv_graph(&self, g: &DirectedGraph, radius: f64) -> DirectedGraph {
        let g = if self.config.self_loops {
            g.with_self_loops()
        } else {
            g.clone()
        };
        g.scaled_labels(1.0 / radius)
    }

    fn finish_conv(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        y: Var,
        bias: Option<ParamId>,
    ) -> Result<Var> {
        let y = match bias {
            Some(b) => tape.add_row_bias(y, bind.get(b))?,
            None => y,
        };
        tape.activation(y, Activation::Relu)
    }

    fn step(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        layer: &Layer,
        state: State,
        i: usize,
        mode: Mode,
    ) -> Result<State> {
        let State { graph, x } = state;
        let need_graph = || match &graph {
            Some(g) => Ok(g),
            None => arg_err("layer needs a graph input"),
        };
        let coarsen = |g: &DirectedGraph, rho: f64| {
            let pos = g
                .positions()
                .ok_or_else(|| Error::Argument("coarsening needs node positions".into()))?;
            voxel_grid(pos, rho)
        };
        Ok(match layer {
            Layer::Conv { kernel, bias } => {
                let (g, radius) = need_graph()?;
                let cg = self.conv_graph(g, *radius);
                let y = graph_conv(tape, bind, &cg, x, kernel, self.config.red)?;
                State {
                    x: self.finish_conv(tape, bind, y, *bias)?,
                    graph,
                }
            }
            Layer::BConv {
                kernel,
                bias,
                r,
                rho,
            } => {
                let (g, radius) = need_graph()?;
                let clustering = coarsen(g, *rho)?;
                let bg = match self.config.remap {
                    Remap::Radius => build_coarsening_bigraph(g, &clustering, *r, Remap::Radius)?
                        .scaled_labels(1.0 / r),
                    Remap::Edges => build_coarsening_bigraph(
                        &self.conv_graph(g, *radius),
                        &clustering,
                        *r,
                        Remap::Edges,
                    )?,
                };
                let y = bipartite_conv(tape, bind, &bg, x, kernel, self.config.red)?;
                let next = radius_graph(clustering.super_positions(), *r)?;
                State {
                    x: self.finish_conv(tape, bind, y, *bias)?,
                    graph: Some((next, *r)),
                }
            }
            Layer::Pool { r, rho, red } => {
                let (g, _) = need_graph()?;
                let clustering = coarsen(g, *rho)?;
                let y = graph_pool(tape, &clustering.groups(), x, *red)?;
                State {
                    x: y,
                    graph: Some((radius_graph(clustering.super_positions(), *r)?, *r)),
                }
            }
            Layer::Gmp => State {
                x: global_max_pool(tape, x)?,
                graph: None,
            },
            Layer::Fc { w, b, relu } => {
                let rows = tape.value(x).rows();
                if rows != 1 {
                    return arg_err(format!("FC needs a single node or vector, got {rows} rows"));
                }
                let y = tape.affine(x, bind.get(*w), Some(bind.get(*b)))?;
                let y = if *relu {
                    tape.activation(y, Activation::Relu)?
                } else {
                    y
                };
                State { x: y, graph }
            }
            Layer::Dropout(p) => match mode {
                Mode::Train { seed } if *p > 0.0 => {
                    let mut rng = rng_from_seed(mix(seed, i as u64));
                    let keep = 1.0 / (1.0 - p);
                    let n = tape.value(x).len();
                    let mask = (0..n)
                        .map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep })
                        .collect();
                    State {
                        x: tape.mul_const(x, mask)?,
                        graph,
                    }
                }
                _ => State { x, graph },
            },
        })
    }
}

/// Seed for the dropout masks of one sample in one epoch.
pub fn dropout_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    mix(
        mix(seed, (epoch as u64).wrapping_add(1)),
        (sample as u64).wrapping_add(1),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;

    fn lattice(n: usize) -> DirectedGraph {
        let rows: Vec<[f64; 2]> = (0..n * n)
            .map(|i| [(i % n) as f64, (i / n) as f64])
            .collect();
        radius_graph(&Tensor::from_rows(&rows).unwrap(), 1.5).unwrap()
    }

    #[test]
    fn fc_only_network() {
        let net = build_network(
            &parse_arch("FC(10)").unwrap(),
            64,
            0,
            &NetworkConfig::default(),
        )
        .unwrap();
        assert_eq!(net.num_params(), 64 * 10 + 10);
        assert_eq!(net.output(), OutputKind::Vector(10));
    }

    #[test]
    fn empty_and_inconsistent_specs() {
        let cfg = NetworkConfig::default();
        assert!(matches!(
            build_network(&ArchSpec::default(), 1, 0, &cfg),
            Err(Error::Build { layer: 0, .. })
        ));
        let bad = parse_arch("C(4)-GMP-FC(3)").unwrap();
        let mut spec = bad.clone();
        spec.layers.push(LayerSpec::Conv(3));
        assert!(matches!(
            build_network(&spec, 1, 0, &cfg),
            Err(Error::Build { layer: 3, .. })
        ));
    }

    #[test]
    fn mnist_bgn_shape_walk() {
        let fused = crate::arch::fuse_to_bgn(
            &parse_arch("C(16)-MP(2,3.4)-C(32)-MP(4,6.8)-C(64)-MP(8,30)-C(128)-D(0.5)-FC(10)")
                .unwrap(),
        )
        .unwrap();
        let cfg = NetworkConfig::default();
        let net = build_network(&fused, 1, 0, &cfg).unwrap();
        assert_eq!(net.num_graph_layers(), 4);
        // ECC kernel [2, 16, M·N] plus bias M per graph layer, then FC 128→10
        let ecc = |n: usize, m: usize| 2 * 16 + 16 + 16 * m * n + m * n + m;
        let expected = ecc(1, 16) + ecc(16, 32) + ecc(32, 64) + ecc(64, 128) + 128 * 10 + 10;
        assert_eq!(net.num_params(), expected);
        let again = build_network(&fused, 1, 0, &cfg).unwrap();
        assert_eq!(again.params(), net.params());
    }

    #[test]
    fn forward_runs_on_a_lattice() {
        let g = lattice(6);
        let cfg = NetworkConfig {
            input_radius: 1.5,
            ..NetworkConfig::default()
        };
        for arch in [
            "C(4)-MP(1.5,2)-C(3)-GMP-FC(5)",
            "BC(4,1.5,2)-C(3)-GMP-D(0.5)-FC(5)",
            "BC(4,2,3)-BC(3,4,30)-FC(2)",
        ] {
            for family in [KernelFamily::Ecc, KernelFamily::Gat, KernelFamily::Eca] {
                let cfg = NetworkConfig {
                    kernel: family,
                    ..cfg.clone()
                };
                let net = build_network(&parse_arch(arch).unwrap(), 1, 1, &cfg).unwrap();
                let x = Tensor::matrix(36, 1, (0..36).map(|i| i as f64 / 36.0).collect()).unwrap();
                let y = net.predict(&g, &x).unwrap();
                assert_eq!(y.rows(), 1, "{arch}");
                assert!(y.all_finite());
            }
        }
    }

    #[test]
    fn fc_on_many_nodes_names_the_layer() {
        let net = build_network(
            &parse_arch("C(2)-FC(3)").unwrap(),
            1,
            0,
            &NetworkConfig::default(),
        )
        .unwrap();
        let g = lattice(2);
        let err = net.predict(&g, &Tensor::zeros(&[4, 1])).unwrap_err();
        assert!(matches!(err, Error::Layer { index: 1, .. }), "{err}");
    }

    #[test]
    fn dropout_only_in_training() {
        let net = build_network(
            &parse_arch("GMP-D(0.5)-FC(3)").unwrap(),
            8,
            0,
            &NetworkConfig::default(),
        )
        .unwrap();
        let g = DirectedGraph::empty(1, 2);
        let x = Tensor::matrix(1, 8, vec![1.0; 8]).unwrap();
        let run = |mode| {
            let mut tape = Tape::new();
            let bind = net.params().bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let y = net.forward(&mut tape, &bind, &g, xv, mode).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(Mode::Eval), net.predict(&g, &x).unwrap());
        let a = run(Mode::Train { seed: 3 });
        assert_eq!(a, run(Mode::Train { seed: 3 }));
        assert_ne!(a, run(Mode::Eval));
    }
}
