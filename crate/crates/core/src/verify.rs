//! Executable correctness checks shared by the acceptance tests and the
//! `selftest` command.
//!
//! Every check compares the library against an independent route: a direct
//! scalar evaluation, a sliding-window correlation, finite differences, or a
//! second algebraic form of the same formula.

use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::arch::{fuse_to_bgn, parse_arch, ArchSpec, LayerSpec, MNIST_ARCH, MODELNET_ARCH};
use crate::autoencoder::{reconstruction_sample, Autoencoder, AutoencoderSpec};
use crate::coarsening::{build_coarsening_bigraph, voxel_grid, Remap};
use crate::conv::{
    aggregate, aggregate_signals, bipartite_conv, bipartite_conv_signal, global_max_pool,
    graph_conv_signal, graph_pool, graph_pool_signal, Reduction,
};
use crate::data::{load_mnist, mnist_to_graph, GraphSample, MnistDigit, MNIST_RADIUS};
use crate::graph::{as_bipartite, radius_graph, BipartiteGraph, DirectedGraph, GraphSignal};
use crate::kernels::{eca_coeffs, gat_coeffs, Kernel, KernelFamily, Mlp};
use crate::network::{build_network, Mode, NetworkConfig};
use crate::params::{Binding, ParamStore};
use crate::profile::scaling_report;
use crate::tensor::{
    grad_check_many, rng_from_seed, Activation, GradCheckOptions, Rng, Tape, Tensor, Var,
};
use crate::train::{evaluate_model, fit, train_to_dir, Optimizer, Task, TrainConfig};

type Outcome = std::result::Result<String, String>;

/// Result of one check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {} ({:.1} s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

fn run(name: &'static str, limit: Duration, f: impl FnOnce() -> Outcome) -> Check {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let (mut passed, mut detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    if passed && elapsed > limit {
        passed = false;
        detail = format!("{detail}; exceeded the {} s limit", limit.as_secs());
    }
    Check {
        name,
        passed,
        detail,
        elapsed,
    }
}

fn fail<T>(e: impl fmt::Display) -> std::result::Result<T, String> {
    Err(e.to_string())
}

trait OrFail<T> {
    fn or_fail(self) -> std::result::Result<T, String>;
}

impl<T, E: fmt::Display> OrFail<T> for std::result::Result<T, E> {
    fn or_fail(self) -> std::result::Result<T, String> {
        self.map_err(|e| e.to_string())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---- scalar oracles ---------------------------------------------------------

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
        Activation::Identity => x,
        Activation::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
    }
}

fn mlp_oracle(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let n = mlp.layers().len();
    for (l, &(w, b)) in mlp.layers().iter().enumerate() {
        let (w, b) = (store.get(w), store.get(b));
        let (rows, cols) = (w.rows(), w.cols());
        let mut out = b.data().to_vec();
        for (j, o) in out.iter_mut().enumerate() {
            for i in 0..rows {
                *o += h[i] * w.data()[i * cols + j];
            }
        }
        if l + 1 < n {
            out.iter_mut().for_each(|v| *v = act(mlp.hidden(), *v));
        }
        h = out;
    }
    h
}

/// Direct evaluation of an edge-conditioned convolution from in-neighbour
/// lists.
fn ecc_conv_oracle(
    store: &ParamStore,
    kernel: &Kernel,
    neighbours: &[Vec<(usize, Vec<f64>)>],
    f: &Tensor,
    red: Reduction,
) -> Vec<Vec<f64>> {
    let Kernel::EdgeConditioned(k) = kernel else {
        unreachable!("oracle covers edge-conditioned kernels")
    };
    let (m, n) = (k.out_dim, k.in_dim);
    neighbours
        .iter()
        .map(|nb| {
            let msgs: Vec<Vec<f64>> = nb
                .iter()
                .map(|(src, label)| {
                    let w = mlp_oracle(store, &k.mlp, label);
                    (0..m)
                        .map(|r| (0..n).map(|c| w[r * n + c] * f.get(*src, c)).sum())
                        .collect()
                })
                .collect();
            if msgs.is_empty() {
                return vec![0.0; m];
            }
            (0..m)
                .map(|r| {
                    let col = msgs.iter().map(|v| v[r]);
                    match red {
                        Reduction::Sum => col.sum(),
                        Reduction::Mean => col.sum::<f64>() / msgs.len() as f64,
                        Reduction::Max => col.fold(f64::NEG_INFINITY, f64::max),
                    }
                })
                .collect()
        })
        .collect()
}

// ---- random inputs ----------------------------------------------------------

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn random_graph(rng: &mut Rng, max_nodes: usize, label_dim: usize) -> DirectedGraph {
    let n = rng.random_range(1..=max_nodes);
    let p = rng.random_range(0.05..0.5);
    let mut edges = Vec::new();
    for s in 0..n {
        for d in 0..n {
            if rng.random_bool(p) {
                edges.push((
                    s,
                    d,
                    (0..label_dim)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect(),
                ));
            }
        }
    }
    DirectedGraph::new(n, label_dim, edges, None).unwrap()
}

fn random_bigraph(rng: &mut Rng, label_dim: usize) -> BipartiteGraph {
    let (ni, no) = (rng.random_range(1..=20), rng.random_range(1..=20));
    let p = rng.random_range(0.05..0.6);
    let mut edges = Vec::new();
    for s in 0..ni {
        for d in 0..no {
            if rng.random_bool(p) {
                edges.push((
                    s,
                    d,
                    (0..label_dim)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect(),
                ));
            }
        }
    }
    BipartiteGraph::new(ni, no, label_dim, edges).unwrap()
}

fn random_positions(rng: &mut Rng, n: usize, extent: f64) -> Tensor {
    Tensor::matrix(
        n,
        2,
        (0..2 * n).map(|_| rng.random_range(0.0..extent)).collect(),
    )
    .unwrap()
}

fn random_ecc(
    rng: &mut Rng,
    store: &mut ParamStore,
    label_dim: usize,
    n: usize,
    m: usize,
) -> Kernel {
    let hidden: Vec<usize> = if rng.random_bool(0.5) {
        vec![rng.random_range(1..=8)]
    } else {
        Vec::new()
    };
    Kernel::new(KernelFamily::Ecc, store, "k", label_dim, n, m, &hidden, rng)
}

// ---- checks -----------------------------------------------------------------

/// `graph_conv(g)` equals `bipartite_conv(as_bipartite(g))` bit for bit, and
/// both agree with a direct evaluation over the graph's in-neighbours.
pub fn embedding_equivalence(graphs: usize, seed: u64) -> Check {
    run("embedding equivalence", Duration::from_secs(10), || {
        let mut rng = rng_from_seed(seed);
        let mut worst = 0.0f64;
        for t in 0..graphs {
            let d = rng.random_range(1..=3);
            let g = random_graph(&mut rng, 30, d);
            let (n, m) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let mut store = ParamStore::new();
            let k = random_ecc(&mut rng, &mut store, d, n, m);
            let x = GraphSignal::new(random_tensor(&mut rng, g.num_nodes(), n)).or_fail()?;
            let direct: Vec<Vec<(usize, Vec<f64>)>> = (0..g.num_nodes())
                .map(|v| {
                    g.in_neighbors(v)
                        .into_iter()
                        .map(|(u, l)| (u, l.to_vec()))
                        .collect()
                })
                .collect();
            for red in [Reduction::Sum, Reduction::Mean, Reduction::Max] {
                let a = graph_conv_signal(&store, &g, &x, &k, red).or_fail()?;
                let b = bipartite_conv_signal(&store, &as_bipartite(&g), &x, &k, red).or_fail()?;
                if !bitwise_eq(a.features().data(), b.features().data()) {
                    return fail(format!("graph {t}, {red}: routes differ bitwise"));
                }
                let oracle = ecc_conv_oracle(&store, &k, &direct, x.features(), red);
                for (v, row) in oracle.iter().enumerate() {
                    for (c, &o) in row.iter().enumerate() {
                        let got = a.row(v)[c];
                        if !close(got, o, 1e-12) {
                            return fail(format!(
                                "graph {t}, {red}: node {v} has {got}, direct evaluation {o}"
                            ));
                        }
                        worst = worst.max((got - o).abs());
                    }
                }
            }
        }
        Ok(format!(
            "{graphs} graphs × 3 reductions bitwise equal; max deviation from direct evaluation {worst:.1e}"
        ))
    })
}

/// Fused bipartite conv over the edge-remapped coarsening equals conv then
/// pool for sum/sum, and a fixed counterexample shows that max pooling after
/// a sum convolution differs from the fused max.
pub fn fusion_equivalence(graphs: usize, seed: u64) -> Check {
    run("fusion equivalence", Duration::from_secs(10), || {
        let mut rng = rng_from_seed(seed);
        let mut worst = 0.0f64;
        for t in 0..graphs {
            let n = rng.random_range(2..=40);
            let pos = random_positions(&mut rng, n, 10.0);
            let g = radius_graph(&pos, rng.random_range(1.5..3.5)).or_fail()?;
            let clustering = voxel_grid(&pos, rng.random_range(1.0..5.0)).or_fail()?;
            let bg = build_coarsening_bigraph(&g, &clustering, 1.0, Remap::Edges).or_fail()?;
            let (ni, mo) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let mut store = ParamStore::new();
            let k = random_ecc(&mut rng, &mut store, 2, ni, mo);
            let x = GraphSignal::new(random_tensor(&mut rng, n, ni)).or_fail()?;
            let conv = graph_conv_signal(&store, &g, &x, &k, Reduction::Sum).or_fail()?;
            let pooled =
                graph_pool_signal(&clustering.groups(), &conv, Reduction::Sum).or_fail()?;
            let fused = bipartite_conv_signal(&store, &bg, &x, &k, Reduction::Sum).or_fail()?;
            for (a, b) in pooled.features().data().iter().zip(fused.features().data()) {
                worst = worst.max((a - b).abs());
                if (a - b).abs() > 1e-12 {
                    return fail(format!("graph {t}: conv+pool {a} vs fused {b}"));
                }
            }
        }
        let (pooled, fused) = max_counterexample().or_fail()?;
        if pooled == fused {
            return fail("max counterexample unexpectedly agrees");
        }
        Ok(format!(
            "{graphs} graphs within {worst:.1e}; max counterexample: conv(sum)+max pool {pooled} vs fused max {fused}"
        ))
    })
}

/// Three nodes in one voxel with features `[1, 1, 1.5]` and edges
/// `0→0, 1→0, 2→2` under an identity kernel. Conv (sum) then max pool gives
/// `max(2, 0, 1.5) = 2`; the fused max over the remapped edges gives `1.5`.
pub fn max_counterexample() -> crate::Result<(f64, f64)> {
    let pos = Tensor::from_rows(&[[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]])?;
    let edges = vec![
        (0, 0, vec![0.0, 0.0]),
        (1, 0, vec![0.5, 0.0]),
        (2, 2, vec![0.0, 0.0]),
    ];
    let g = DirectedGraph::new(3, 2, edges, Some(pos.clone()))?;
    let clustering = voxel_grid(&pos, 2.0)?;
    let bg = build_coarsening_bigraph(&g, &clustering, 1.0, Remap::Edges)?;
    let mut store = ParamStore::new();
    let k = Kernel::new(
        KernelFamily::Ecc,
        &mut store,
        "id",
        2,
        1,
        1,
        &[],
        &mut rng_from_seed(0),
    );
    if let Kernel::EdgeConditioned(e) = &k {
        let (w, b) = e.mlp.layers()[0];
        store.set(w, Tensor::zeros(&[2, 1]));
        store.set(b, Tensor::vector(vec![1.0]));
    }
    let x = GraphSignal::from_rows(&[[1.0], [1.0], [1.5]])?;
    let conv = graph_conv_signal(&store, &g, &x, &k, Reduction::Sum)?;
    let pooled = graph_pool_signal(&clustering.groups(), &conv, Reduction::Max)?;
    let fused = bipartite_conv_signal(&store, &bg, &x, &k, Reduction::Max)?;
    Ok((pooled.row(0)[0], fused.row(0)[0]))
}

/// Stride-2, 3-tap correlation of a length-`len` signal, zero padded.
pub fn strided_correlation(x: &[f64], taps: [f64; 3]) -> Vec<f64> {
    (0..x.len().div_ceil(2))
        .map(|o| {
            let centre = 2 * o as isize;
            let mut acc = 0.0;
            for (t, w) in (-1isize..=1).zip(taps) {
                let i = centre + t;
                if i >= 0 && (i as usize) < x.len() {
                    acc += w * x[i as usize];
                }
            }
            acc
        })
        .collect()
}

/// Stride-2 lattice bipartite graph: output `o` sits at lattice point `2o`
/// and receives edges from `2o + t`, labelled with the one-hot code of `t`.
pub fn lattice_bigraph(len: usize) -> crate::Result<BipartiteGraph> {
    let outs = len.div_ceil(2);
    let mut edges = Vec::new();
    for o in 0..outs {
        for t in -1isize..=1 {
            let i = 2 * o as isize + t;
            if i >= 0 && (i as usize) < len {
                let mut label = vec![0.0; 3];
                label[(t + 1) as usize] = 1.0;
                edges.push((i as usize, o, label));
            }
        }
    }
    BipartiteGraph::new(len, outs, 3, edges)
}

/// Bipartite conv on the stride-2 lattice reproduces a sliding-window
/// correlation exactly.
pub fn lattice_special_case(signals: usize, seed: u64) -> Check {
    run("lattice special case", Duration::from_secs(10), || {
        let len = 64;
        let bg = lattice_bigraph(len).or_fail()?;
        let mut rng = rng_from_seed(seed);
        for s in 0..signals {
            let taps = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let mut store = ParamStore::new();
            let k = Kernel::new(
                KernelFamily::Ecc,
                &mut store,
                "taps",
                3,
                1,
                1,
                &[],
                &mut rng,
            );
            if let Kernel::EdgeConditioned(e) = &k {
                let (w, b) = e.mlp.layers()[0];
                store.set(w, Tensor::matrix(3, 1, taps.to_vec()).or_fail()?);
                store.set(b, Tensor::zeros(&[1]));
            }
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let signal =
                GraphSignal::new(Tensor::matrix(len, 1, x.clone()).or_fail()?).or_fail()?;
            let got = bipartite_conv_signal(&store, &bg, &signal, &k, Reduction::Sum).or_fail()?;
            let want = strided_correlation(&x, taps);
            if !bitwise_eq(got.features().data(), &want) {
                return fail(format!(
                    "signal {s}: bipartite conv differs from the sliding window"
                ));
            }
        }
        Ok(format!("{signals} signals of length {len} match exactly"))
    })
}

/// Loss used by the gradient checks: a fixed random projection of `y`.
fn project(tape: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = rng_from_seed(seed ^ 0x9e37);
    let c: Vec<f64> = (0..tape.value(y).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let p = tape.mul_const(y, c)?;
    tape.sum(p)
}

fn toy_spatial_graph(rng: &mut Rng, n: usize) -> crate::Result<DirectedGraph> {
    let pos = random_positions(rng, n, 8.0);
    Ok(radius_graph(&pos, 3.0)?.with_self_loops())
}

/// Checks gradients w.r.t. the input features and every parameter.
fn grad_case<F>(store: &ParamStore, x: &Tensor, seed: u64, f: F) -> crate::Result<f64>
where
    F: Fn(&mut Tape, &Binding, Var) -> crate::Result<Var>,
{
    // Zero-initialised biases put some activations exactly on a kink, where
    // finite differences average the two slopes. Jitter away from it; the
    // small step keeps other ReLU inputs from straddling zero.
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let mut inputs = vec![x.clone()];
    inputs.extend(store.tensors().iter().map(|t| {
        let data = t
            .data()
            .iter()
            .map(|v| v + rng.random_range(-0.05..0.05))
            .collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    }));
    let opts = GradCheckOptions {
        eps: 1e-6,
        max_coords: Some(24),
        seed,
    };
    grad_check_many(
        |tape, vars| {
            let bind = Binding::from_vars(vars[1..].to_vec());
            let y = f(tape, &bind, vars[0])?;
            project(tape, y, seed)
        },
        &inputs,
        &opts,
    )
}

/// Finite-difference gradient checks through every kernel family and
/// reduction, pooling, aggregation, global max pooling and the fused MNIST
/// network, for each seed.
pub fn gradient_suite(seeds: u64) -> Check {
    run("gradient suite", Duration::from_secs(60), || {
        let mut worst: (f64, String) = (0.0, String::new());
        let mut cases = 0;
        let mut note = |err: f64, what: String| -> Outcome {
            cases += 1;
            if err > worst.0 {
                worst = (err, what.clone());
            }
            if err > 1e-4 {
                return fail(format!("{what}: relative error {err:.2e}"));
            }
            Ok(String::new())
        };
        for seed in 0..seeds {
            let mut rng = rng_from_seed(1000 + seed);
            let g = toy_spatial_graph(&mut rng, 10).or_fail()?;
            let bg = as_bipartite(&g).scaled_labels(1.0 / 3.0);
            let pos = g.positions().unwrap().clone();
            let clustering = voxel_grid(&pos, 4.0).or_fail()?;
            let coarse = build_coarsening_bigraph(&g, &clustering, 3.0, Remap::Radius)
                .or_fail()?
                .scaled_labels(1.0 / 3.0);
            for family in [KernelFamily::Ecc, KernelFamily::Gat, KernelFamily::Eca] {
                for red in [Reduction::Sum, Reduction::Mean, Reduction::Max] {
                    for (which, graph) in [("conv", &bg), ("bipartite conv", &coarse)] {
                        let mut store = ParamStore::new();
                        let k = Kernel::new(family, &mut store, "k", 2, 3, 2, &[6], &mut rng);
                        let x = random_tensor(&mut rng, 10, 3);
                        let err = grad_case(&store, &x, seed, |t, b, x| {
                            bipartite_conv(t, b, graph, x, &k, red)
                        })
                        .or_fail()?;
                        note(err, format!("seed {seed}: {family} {which} ({red})"))?;
                    }
                }
            }
            let groups = clustering.groups();
            for red in [Reduction::Sum, Reduction::Mean, Reduction::Max] {
                let x = random_tensor(&mut rng, 10, 3);
                let err = grad_case(&ParamStore::new(), &x, seed, |t, _, x| {
                    graph_pool(t, &groups, x, red)
                })
                .or_fail()?;
                note(err, format!("seed {seed}: pool ({red})"))?;
            }
            let (n1, n2) = (rng.random_range(0..20), rng.random_range(1..20));
            let other = random_tensor(&mut rng, 4, 3);
            let x = random_tensor(&mut rng, 4, 3);
            let err = grad_case(&ParamStore::new(), &x, seed, |t, _, x| {
                let b = t.leaf(other.clone(), false);
                let s = t.scale(x, 0.7)?;
                let y = aggregate(t, x, b, n1, n2)?;
                aggregate(t, y, s, n2, n1 + 1)
            })
            .or_fail()?;
            note(err, format!("seed {seed}: aggregate"))?;
            let x = random_tensor(&mut rng, 10, 3);
            let err = grad_case(&ParamStore::new(), &x, seed, |t, _, x| {
                global_max_pool(t, x)
            })
            .or_fail()?;
            note(err, format!("seed {seed}: global max pool"))?;

            let spec = fuse_to_bgn(&parse_arch(MNIST_ARCH).or_fail()?).or_fail()?;
            let cfg = NetworkConfig {
                input_radius: MNIST_RADIUS,
                ..NetworkConfig::default()
            };
            let net = build_network(&spec, 1, seed, &cfg).or_fail()?;
            let pos = random_positions(&mut rng, 10, 6.0);
            let graph = radius_graph(&pos, MNIST_RADIUS).or_fail()?;
            let x = Tensor::matrix(10, 1, (0..10).map(|_| rng.random_range(0.1..1.0)).collect())
                .or_fail()?;
            let class = rng.random_range(0..10);
            let err = grad_case(net.params(), &x, seed, |t, b, x| {
                let logits = net.forward(t, b, &graph, x, Mode::Train { seed })?;
                t.softmax_cross_entropy(logits, &[class])
            })
            .or_fail()?;
            note(err, format!("seed {seed}: fused MNIST network"))?;
        }
        Ok(format!(
            "{cases} cases, worst relative error {:.2e} ({})",
            worst.0, worst.1
        ))
    })
}

/// Attention coefficients sum to one over the in-edges of every output node.
pub fn attention_normalization(graphs: usize, seed: u64) -> Check {
    run("attention normalization", Duration::from_secs(10), || {
        let mut rng = rng_from_seed(seed);
        let mut worst = 0.0f64;
        for t in 0..graphs {
            let bg = if t % 4 == 0 {
                as_bipartite(&random_graph(&mut rng, 20, 2))
            } else {
                random_bigraph(&mut rng, 2)
            };
            let n = rng.random_range(1..=4);
            let x = GraphSignal::new(random_tensor(&mut rng, bg.num_in(), n)).or_fail()?;
            let mut store = ParamStore::new();
            let families = [KernelFamily::Gat, KernelFamily::Eca];
            for family in families {
                let k = Kernel::new(
                    family,
                    &mut store,
                    &format!("{family}"),
                    2,
                    n,
                    3,
                    &[],
                    &mut rng,
                );
                let alpha = match &k {
                    Kernel::Attention(a) => gat_coeffs(a, &store, &x, &bg),
                    Kernel::EdgeConditionedAttention(a) => {
                        eca_coeffs(a, &store, &bg.label_matrix(), &bg)
                    }
                    Kernel::EdgeConditioned(_) => unreachable!(),
                }
                .or_fail()?;
                let mut sums = vec![0.0; bg.num_out()];
                for (e, &d) in bg.targets().iter().enumerate() {
                    sums[d] += alpha.data()[e];
                }
                for (v, s) in sums.iter().enumerate() {
                    if bg.in_degree(v) == 0 {
                        continue;
                    }
                    worst = worst.max((s - 1.0).abs());
                    if (s - 1.0).abs() > 1e-12 {
                        return fail(format!("graph {t}, {family}: node {v} sums to {s}"));
                    }
                }
            }
        }
        Ok(format!("{graphs} graphs, max |Σα − 1| = {worst:.1e}"))
    })
}

/// `aggregate` against `out1 + (out2 − out1)·n2/(n1 + n2)`; `n2 = 0` must
/// return `out1` unchanged.
pub fn aggregation_oracle(tuples: usize, seed: u64) -> Check {
    run("aggregation oracle", Duration::from_secs(10), || {
        let mut rng = rng_from_seed(seed);
        let mut worst = 0.0f64;
        for t in 0..tuples {
            let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let a = GraphSignal::new(random_tensor(&mut rng, r, c)).or_fail()?;
            let b = GraphSignal::new(random_tensor(&mut rng, r, c)).or_fail()?;
            let n1 = rng.random_range(0..1000);
            let n2 = rng.random_range(if n1 == 0 { 1 } else { 0 }..1000);
            let got = aggregate_signals(&a, &b, n1, n2).or_fail()?;
            let w = n2 as f64 / (n1 + n2) as f64;
            for ((&g, &x), &y) in got
                .features()
                .data()
                .iter()
                .zip(a.features().data())
                .zip(b.features().data())
            {
                let want = x + (y - x) * w;
                worst = worst.max((g - want).abs());
                if !close(g, want, 1e-12) {
                    return fail(format!("tuple {t} (n1 = {n1}, n2 = {n2}): {g} vs {want}"));
                }
            }
            let degenerate = aggregate_signals(&a, &b, n1.max(1), 0).or_fail()?;
            if !bitwise_eq(degenerate.features().data(), a.features().data()) {
                return fail(format!("tuple {t}: n2 = 0 changed out1"));
            }
        }
        Ok(format!(
            "{tuples} tuples, max deviation {worst:.1e}; n2 = 0 returns out1 bitwise"
        ))
    })
}

/// Exact work counts of conv+pool against the fused layer on 1-D lattices.
pub fn complexity_claim() -> Check {
    run("complexity claim", Duration::from_secs(120), || {
        let a: ArchSpec = "C(8)-MP(1.5,4)".parse().or_fail()?;
        let b = fuse_to_bgn(&a).or_fail()?;
        let report = scaling_report((&a, &b), &[100, 1000, 10000], 4, &NetworkConfig::default())
            .or_fail()?;
        let mut parts = Vec::new();
        for (p, f) in report.pairs() {
            let (vi, vo) = (p.size_vi as u64, p.size_vo as u64);
            if vo * 4 != vi {
                return fail(format!("|V_i| = {vi} coarsened to {vo}"));
            }
            if f.counts.nodes_materialized != vo || p.counts.nodes_materialized != vi + vo {
                return fail(format!(
                    "|V_i| = {vi}: fused materialized {}, conv+pool {}",
                    f.counts.nodes_materialized, p.counts.nodes_materialized
                ));
            }
            if f.counts.kernel_evals > p.counts.kernel_evals {
                return fail(format!("|V_i| = {vi}: fused needs more kernel evaluations"));
            }
            parts.push(format!(
                "{vi}: nodes {}/{}, kernel evals {}/{}",
                f.counts.nodes_materialized,
                p.counts.nodes_materialized,
                f.counts.kernel_evals,
                p.counts.kernel_evals
            ));
        }
        Ok(format!("fused/conv+pool {}", parts.join("; ")))
    })
}

fn random_number(rng: &mut Rng, positive: bool) -> (f64, String) {
    match rng.random_range(0..3) {
        0 => {
            let v = rng.random_range(if positive { 1 } else { 0 }..200) as f64 / 8.0;
            (v, format!("{v}"))
        }
        1 => {
            let (a, b) = (
                rng.random_range(if positive { 1 } else { 0 }..100),
                rng.random_range(1..64),
            );
            (a as f64 / b as f64, format!("{a} /{b}"))
        }
        _ => {
            let v = rng.random_range(if positive { 1 } else { 0 }..50);
            (v as f64, format!("{v}"))
        }
    }
}

/// A random valid architecture string with irregular whitespace, and the
/// layers it should parse to.
pub fn random_arch(rng: &mut Rng) -> (String, Vec<LayerSpec>) {
    let mut parts = Vec::new();
    let mut layers = Vec::new();
    let pad = |rng: &mut Rng| if rng.random_bool(0.3) { " " } else { "" };
    for _ in 0..rng.random_range(1..10) {
        let (text, layer) = match rng.random_range(0..6) {
            0 => {
                let x = rng.random_range(1..512);
                (format!("C({}{x})", pad(rng)), LayerSpec::Conv(x))
            }
            1 | 2 => {
                let (r, rs) = random_number(rng, true);
                let (rho, ps) = random_number(rng, true);
                if rng.random_bool(0.5) {
                    (
                        format!("MP({rs},{}{ps})", pad(rng)),
                        LayerSpec::MaxPool { r, rho },
                    )
                } else {
                    (
                        format!("AP{}({rs},{ps})", pad(rng)),
                        LayerSpec::AvgPool { r, rho },
                    )
                }
            }
            3 => {
                let x = rng.random_range(1..128);
                let (r, rs) = random_number(rng, true);
                let (rho, ps) = random_number(rng, true);
                (
                    format!("BC({x},{rs},{ps})"),
                    LayerSpec::BConv {
                        features: x,
                        r,
                        rho,
                    },
                )
            }
            4 => {
                let x = rng.random_range(1..512);
                (format!("FC({x}{})", pad(rng)), LayerSpec::Fc(x))
            }
            _ => {
                let p = rng.random_range(0..100);
                (format!("D({p}/100)"), LayerSpec::Dropout(p as f64 / 100.0))
            }
        };
        parts.push(text);
        layers.push(layer);
    }
    if rng.random_bool(0.3) {
        parts.push("GMP".into());
        layers.push(LayerSpec::Gmp);
        let n = rng.random_range(1..20);
        parts.push(format!("FC({n})"));
        layers.push(LayerSpec::Fc(n));
    }
    let mut text = String::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            text.push_str([" - ", "-", "- "].choose(rng).unwrap());
        }
        text.push_str(p);
    }
    (text, layers)
}

/// The two reference strings parse to their layer lists; random strings
/// survive parse-render-parse; fusion is idempotent and removes pooling.
pub fn parser_suite(strings: usize, seed: u64) -> Check {
    run("parser suite", Duration::from_secs(10), || {
        use LayerSpec::*;
        let mnist = parse_arch(MNIST_ARCH).or_fail()?;
        let expected = vec![
            Conv(16),
            MaxPool { r: 2.0, rho: 3.4 },
            Conv(32),
            MaxPool { r: 4.0, rho: 6.8 },
            Conv(64),
            MaxPool { r: 8.0, rho: 30.0 },
            Conv(128),
            Dropout(0.5),
            Fc(10),
        ];
        if mnist.layers != expected {
            return fail(format!("digit architecture parsed to {mnist}"));
        }
        let modelnet = parse_arch(MODELNET_ARCH).or_fail()?;
        let expected = vec![
            Conv(16),
            Conv(32),
            MaxPool {
                r: 2.5 / 32.0,
                rho: 7.5 / 32.0,
            },
            Conv(32),
            Conv(32),
            MaxPool {
                r: 7.5 / 32.0,
                rho: 22.5 / 32.0,
            },
            Conv(64),
            Gmp,
            Fc(64),
            Dropout(0.2),
            Fc(10),
        ];
        if modelnet.layers != expected {
            return fail(format!("point-cloud architecture parsed to {modelnet}"));
        }
        let mut rng = rng_from_seed(seed);
        let mut fused_count = 0;
        for _ in 0..strings {
            let (text, layers) = random_arch(&mut rng);
            let first = parse_arch(&text).map_err(|e| format!("`{text}`: {e}"))?;
            if first.layers != layers {
                return fail(format!("`{text}` parsed to `{first}`"));
            }
            let again =
                parse_arch(&first.render()).map_err(|e| format!("`{}`: {e}", first.render()))?;
            if again != first || again.render() != first.render() {
                return fail(format!("`{text}` is not stable under parse-render-parse"));
            }
            if let Ok(fused) = fuse_to_bgn(&first) {
                fused_count += 1;
                if fused.layers.iter().any(LayerSpec::is_pool) {
                    return fail(format!("fusing `{text}` left a pooling layer"));
                }
                if fuse_to_bgn(&fused).ok().as_ref() != Some(&fused) {
                    return fail(format!("fusing `{text}` is not idempotent"));
                }
            }
        }
        for spec in [&mnist, &modelnet] {
            let fused = fuse_to_bgn(spec).or_fail()?;
            if fused.layers.iter().any(LayerSpec::is_pool)
                || fuse_to_bgn(&fused).or_fail()? != fused
            {
                return fail(format!(
                    "fusion of `{spec}` is not pool-free and idempotent"
                ));
            }
        }
        Ok(format!(
            "reference strings match; {strings} random strings round-trip ({fused_count} fusible)"
        ))
    })
}

/// The property checks that need no data and run in seconds.
pub fn invariant_suite() -> Vec<Check> {
    vec![
        embedding_equivalence(100, 1),
        fusion_equivalence(50, 2),
        lattice_special_case(20, 3),
        gradient_suite(10),
        attention_normalization(100, 5),
        aggregation_oracle(1000, 6),
        complexity_claim(),
        parser_suite(1000, 7),
    ]
}

// ---- data-driven experiments ------------------------------------------------

/// Converts digits to pixel graphs.
pub fn digit_graphs(digits: &[MnistDigit]) -> crate::Result<Vec<GraphSample>> {
    digits
        .iter()
        .map(|d| mnist_to_graph(d, MNIST_RADIUS, 0.0))
        .collect()
}

/// Training setup for the fused digit classifier.
pub fn mnist_classifier_config(seed: u64) -> crate::Result<TrainConfig> {
    let arch = fuse_to_bgn(&parse_arch(MNIST_ARCH)?)?;
    Ok(TrainConfig {
        epochs: 20,
        batch_size: 16,
        learning_rate: 3e-3,
        optimizer: Optimizer::default(),
        seed,
        workers: 1,
        arch: arch.render(),
        network: NetworkConfig {
            red: Reduction::Max,
            input_radius: MNIST_RADIUS,
            ..NetworkConfig::default()
        },
    })
}

/// Trains the fused classifier on a stratified 2000/500 split and reports
/// the final test accuracy.
pub fn mnist_desk_scale(root: &Path) -> Check {
    run("MNIST desk scale", Duration::from_secs(30 * 60), || {
        let split = load_mnist(root, 2000, 500, 0).or_fail()?;
        let (train, test) = (
            digit_graphs(&split.train).or_fail()?,
            digit_graphs(&split.test).or_fail()?,
        );
        let cfg = mnist_classifier_config(0).or_fail()?;
        let spec = parse_arch(&cfg.arch).or_fail()?;
        let mut net = build_network(&spec, 1, cfg.seed, &cfg.network).or_fail()?;
        let history = fit(&mut net, &train, &test, &cfg, None).or_fail()?;
        let acc = history
            .iter()
            .filter(|r| r.split == "test")
            .map(|r| r.accuracy.unwrap_or(0.0))
            .next_back()
            .unwrap_or(0.0);
        let detail = format!(
            "test accuracy {:.1}% after {} epochs",
            100.0 * acc,
            cfg.epochs
        );
        if acc >= 0.85 {
            Ok(detail)
        } else {
            Err(format!("{detail} (< 85%)"))
        }
    })
}

/// Training setup for the autoencoder experiment.
pub fn autoencoder_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 16,
        learning_rate: 3e-3,
        seed,
        workers: 1,
        ..TrainConfig::default()
    }
}

/// Reconstruction samples for a split of digits.
pub fn reconstruction_samples(digits: &[MnistDigit]) -> crate::Result<Vec<GraphSample>> {
    digits
        .iter()
        .map(|d| reconstruction_sample(mnist_to_graph(d, MNIST_RADIUS, 0.0)?, &d.pixels))
        .collect()
}

/// Test MSE of the autoencoder with and without skip connections, each
/// trained from the same seed.
pub fn autoencoder_pair(
    train: &[GraphSample],
    test: &[GraphSample],
    seed: u64,
) -> crate::Result<(f64, f64)> {
    let cfg = autoencoder_config(seed);
    let mut mse = [0.0; 2];
    for (slot, skip) in mse.iter_mut().zip([true, false]) {
        let mut ae = Autoencoder::new(
            AutoencoderSpec::mnist(skip),
            MnistDigit::grid_positions(),
            seed,
        )?;
        fit(&mut ae, train, &[], &cfg, None)?;
        *slot = evaluate_model(&ae, test, Task::Reconstruct, 1)?
            .mse
            .unwrap_or(f64::NAN);
    }
    Ok((mse[0], mse[1]))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Median test MSE over three seeds: the skip-connected autoencoder must
/// beat the plain one.
pub fn autoencoder_skip(root: &Path) -> Check {
    run(
        "autoencoder skip connections",
        Duration::from_secs(45 * 60),
        || {
            let split = load_mnist(root, 2000, 500, 0).or_fail()?;
            let train = reconstruction_samples(&split.train).or_fail()?;
            let test = reconstruction_samples(&split.test).or_fail()?;
            let mut with = Vec::new();
            let mut without = Vec::new();
            for seed in 0..3 {
                let (a, b) = autoencoder_pair(&train, &test, seed).or_fail()?;
                with.push(a);
                without.push(b);
            }
            let (a, b) = (median(with.clone()), median(without.clone()));
            let detail = format!("median test MSE with skips {a:.5} vs without {b:.5} (per seed {with:.5?} / {without:.5?})");
            if a < b {
                Ok(detail)
            } else {
                Err(detail)
            }
        },
    )
}

/// Drops the `wall_ms` field from every JSON line.
pub fn strip_wall_clock(log: &str) -> String {
    log.lines()
        .map(
            |line| match serde_json::from_str::<serde_json::Value>(line) {
                Ok(serde_json::Value::Object(mut m)) => {
                    m.remove("wall_ms");
                    serde_json::Value::Object(m).to_string()
                }
                _ => line.to_string(),
            },
        )
        .collect::<Vec<_>>()
        .join("\n")
}

/// Two identical single-worker runs must write identical metrics (ignoring
/// wall-clock time) and identical checkpoints.
pub fn determinism(root: &Path, work_dir: &Path) -> Check {
    run("determinism", Duration::from_secs(10 * 60), || {
        let split = load_mnist(root, 200, 100, 0).or_fail()?;
        let (train, test) = (
            digit_graphs(&split.train).or_fail()?,
            digit_graphs(&split.test).or_fail()?,
        );
        let cfg = TrainConfig {
            epochs: 2,
            ..mnist_classifier_config(0).or_fail()?
        };
        let spec = parse_arch(&cfg.arch).or_fail()?;
        let mut outputs = Vec::new();
        for run in ["a", "b"] {
            let dir = work_dir.join(run);
            let mut net = build_network(&spec, 1, cfg.seed, &cfg.network).or_fail()?;
            train_to_dir(&mut net, &train, &test, &cfg, &spec.render(), &dir).or_fail()?;
            let log = std::fs::read_to_string(dir.join("metrics.jsonl")).or_fail()?;
            let ckpt = std::fs::read(dir.join("model.ckpt")).or_fail()?;
            let meta = std::fs::read(dir.join("run.json")).or_fail()?;
            outputs.push((strip_wall_clock(&log), ckpt, meta));
        }
        let (a, b) = (&outputs[0], &outputs[1]);
        if a.0 != b.0 {
            return fail("metrics logs differ");
        }
        if a.1 != b.1 {
            return fail("checkpoints differ");
        }
        if a.2 != b.2 {
            return fail("run metadata differs");
        }
        Ok(format!(
            "{} log lines and {} checkpoint bytes identical",
            a.0.lines().count(),
            a.1.len()
        ))
    })
}
