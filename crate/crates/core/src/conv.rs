//! Convolution, pooling, aggregation and global pooling layers.
//!
//! [`bipartite_conv`] is the only convolution code path: [`graph_conv`] views
//! the graph as `BG(V, V, E)` and delegates.

use std::str::FromStr;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::graph::{as_bipartite, BipartiteGraph, DirectedGraph, GraphSignal};
use crate::kernels::Kernel;
use crate::params::{Binding, ParamStore};
use crate::tensor::{Tape, Var};

/// Permutation-invariant neighbourhood reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

impl FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::Argument(format!(
                "unknown reduction `{other}` (expected sum, mean or max)"
            ))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::Max => "max",
        })
    }
}

/// Computes `red({W_{o,i} f_i : v_i ∈ δ(v_o)})` for every output node.
///
/// `x` holds the input features (`|V_i| × N`); the result is `|V_o| × M`.
/// Attention kernels always reduce with a sum since their coefficients are
/// already normalised. Output nodes without in-edges get zero rows.
pub fn bipartite_conv(
    tape: &mut Tape,
    bind: &Binding,
    bg: &BipartiteGraph,
    x: Var,
    kernel: &Kernel,
    red: Reduction,
) -> Result<Var> {
    let f = tape.value(x);
    if !f.is_matrix() || f.rows() != bg.num_in() || f.cols() != kernel.in_dim() {
        return shape_err(format!(
            "conv input {:?} does not match {} input nodes of dim {}",
            f.shape(),
            bg.num_in(),
            kernel.in_dim()
        ));
    }
    if let Kernel::EdgeConditioned(k) = kernel {
        if bg.label_dim() != k.label_dim {
            return shape_err(format!(
                "graph labels have dim {}, kernel expects {}",
                bg.label_dim(),
                k.label_dim
            ));
        }
    }
    let out = match kernel {
        Kernel::EdgeConditioned(k) => {
            let labels = tape.constant(bg.label_matrix());
            let w = k.weights(tape, bind, labels)?;
            let xs = tape.gather_rows(x, bg.sources())?;
            let msg = tape.edge_matvec(w, xs, k.out_dim, k.in_dim)?;
            tape.segment_reduce(msg, bg.targets(), bg.num_out(), red)?
        }
        Kernel::Attention(k) => {
            let (alpha, h) = k.coefficients(tape, bind, x, bg)?;
            let msg = tape.scale_rows(h, alpha)?;
            tape.segment_reduce(msg, bg.targets(), bg.num_out(), Reduction::Sum)?
        }
        Kernel::EdgeConditionedAttention(k) => {
            let labels = tape.constant(bg.label_matrix());
            let (alpha, h) = k.coefficients(tape, bind, x, labels, bg)?;
            let msg = tape.scale_rows(h, alpha)?;
            tape.segment_reduce(msg, bg.targets(), bg.num_out(), Reduction::Sum)?
        }
    };
    if let Some(c) = tape.counters_mut() {
        c.kernel_evals += bg.num_edges() as u64;
        c.nodes_materialized += bg.num_out() as u64;
    }
    Ok(out)
}

/// Graph convolution on `g`, i.e. [`bipartite_conv`] on `BG(V, V, E)`.
pub fn graph_conv(
    tape: &mut Tape,
    bind: &Binding,
    g: &DirectedGraph,
    x: Var,
    kernel: &Kernel,
    red: Reduction,
) -> Result<Var> {
    bipartite_conv(tape, bind, &as_bipartite(g), x, kernel, red)
}

/// Pools the rows of `x` into one super-node per cluster. Nodes in no
/// cluster are dropped; a node in two clusters is an error.
pub fn graph_pool(tape: &mut Tape, clusters: &[Vec<usize>], x: Var, red: Reduction) -> Result<Var> {
    let n = tape.value(x).rows();
    if !tape.value(x).is_matrix() {
        return shape_err("pool input must be a matrix");
    }
    let mut owner = vec![usize::MAX; n];
    for (k, members) in clusters.iter().enumerate() {
        for &v in members {
            if v >= n {
                return Err(Error::Index(format!(
                    "cluster {k} references node {v} of {n}"
                )));
            }
            if owner[v] != usize::MAX {
                return arg_err(format!("node {v} is in clusters {} and {k}", owner[v]));
            }
            owner[v] = k;
        }
    }
    let rows: Vec<usize> = (0..n).filter(|&v| owner[v] != usize::MAX).collect();
    let seg: Vec<usize> = rows.iter().map(|&v| owner[v]).collect();
    let picked = tape.gather_rows(x, &rows)?;
    let out = tape.segment_reduce(picked, &seg, clusters.len(), red)?;
    if let Some(c) = tape.counters_mut() {
        c.nodes_materialized += clusters.len() as u64;
    }
    Ok(out)
}

/// `(n1·out1 + n2·out2) / (n1 + n2)`: fuses two convolutions onto the same
/// output node set, weighting each by its input graph's node count.
pub fn aggregate(tape: &mut Tape, out1: Var, out2: Var, n1: usize, n2: usize) -> Result<Var> {
    tape.aggregate(out1, out2, n1, n2)
}

/// Elementwise maximum over all nodes, `1 × N`.
pub fn global_max_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).rows();
    if n == 0 || !tape.value(x).is_matrix() {
        return arg_err("global max pool needs at least one node");
    }
    tape.segment_reduce(x, &vec![0; n], 1, Reduction::Max)
}

fn eval_with<F>(params: &ParamStore, signal: &GraphSignal, f: F) -> Result<GraphSignal>
where
    F: FnOnce(&mut Tape, &Binding, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape, false);
    let x = tape.constant(signal.features().clone());
    let y = f(&mut tape, &bind, x)?;
    GraphSignal::new(tape.value(y).clone())
}

/// [`bipartite_conv`] outside of training.
pub fn bipartite_conv_signal(
    params: &ParamStore,
    bg: &BipartiteGraph,
    signal: &GraphSignal,
    kernel: &Kernel,
    red: Reduction,
) -> Result<GraphSignal> {
    eval_with(params, signal, |t, b, x| {
        bipartite_conv(t, b, bg, x, kernel, red)
    })
}

/// [`graph_conv`] outside of training.
pub fn graph_conv_signal(
    params: &ParamStore,
    g: &DirectedGraph,
    signal: &GraphSignal,
    kernel: &Kernel,
    red: Reduction,
) -> Result<GraphSignal> {
    eval_with(params, signal, |t, b, x| {
        graph_conv(t, b, g, x, kernel, red)
    })
}

/// [`graph_pool`] outside of training.
pub fn graph_pool_signal(
    clusters: &[Vec<usize>],
    signal: &GraphSignal,
    red: Reduction,
) -> Result<GraphSignal> {
    eval_with(&ParamStore::new(), signal, |t, _, x| {
        graph_pool(t, clusters, x, red)
    })
}

/// [`aggregate`] outside of training.
pub fn aggregate_signals(
    out1: &GraphSignal,
    out2: &GraphSignal,
    n1: usize,
    n2: usize,
) -> Result<GraphSignal> {
    let mut tape = Tape::new();
    let a = tape.constant(out1.features().clone());
    let b = tape.constant(out2.features().clone());
    let y = aggregate(&mut tape, a, b, n1, n2)?;
    GraphSignal::new(tape.value(y).clone())
}

/// [`global_max_pool`] outside of training.
pub fn global_max_pool_signal(signal: &GraphSignal) -> Result<Vec<f64>> {
    let pooled = eval_with(&ParamStore::new(), signal, |t, _, x| global_max_pool(t, x))?;
    Ok(pooled.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::EdgeConditionedKernel;
    use crate::tensor::{rng_from_seed, Tensor};

    /// Zero-hidden-layer edge kernel that ignores labels and returns `I`.
    pub(crate) fn identity_kernel(store: &mut ParamStore, dim: usize, label_dim: usize) -> Kernel {
        let k = EdgeConditionedKernel::new(
            store,
            "id",
            label_dim,
            dim,
            dim,
            &[],
            &mut rng_from_seed(0),
        );
        let (w, b) = k.mlp.layers()[0];
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        store.set(w, Tensor::zeros(&[label_dim, dim * dim]));
        store.set(b, Tensor::vector(eye));
        Kernel::EdgeConditioned(k)
    }

    #[test]
    fn bipartite_conv_examples() {
        let mut store = ParamStore::new();
        let k2 = identity_kernel(&mut store, 2, 1);
        let bg = BipartiteGraph::new(1, 1, 1, vec![(0, 0, vec![0.3])]).unwrap();
        let f = GraphSignal::from_rows(&[[1.0, 2.0]]).unwrap();
        let out = bipartite_conv_signal(&store, &bg, &f, &k2, Reduction::Sum).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);

        let mut store = ParamStore::new();
        let k1 = identity_kernel(&mut store, 1, 1);
        let bg = BipartiteGraph::new(3, 1, 1, (0..3).map(|i| (i, 0, vec![0.0])).collect()).unwrap();
        let f = GraphSignal::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let out = bipartite_conv_signal(&store, &bg, &f, &k1, Reduction::Mean).unwrap();
        assert_eq!(out.row(0), &[2.0]);

        let empty = BipartiteGraph::new(2, 2, 1, vec![]).unwrap();
        let f = GraphSignal::from_rows(&[[5.0], [6.0]]).unwrap();
        for red in [Reduction::Sum, Reduction::Mean, Reduction::Max] {
            let out = bipartite_conv_signal(&store, &empty, &f, &k1, red).unwrap();
            assert_eq!(out.features().data(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn bipartite_conv_rejects_mismatched_inputs() {
        let mut store = ParamStore::new();
        let k = identity_kernel(&mut store, 2, 1);
        let bg = BipartiteGraph::new(2, 1, 1, vec![(0, 0, vec![0.0])]).unwrap();
        let f = GraphSignal::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(
            bipartite_conv_signal(&store, &bg, &f, &k, Reduction::Sum),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn graph_conv_examples() {
        let mut store = ParamStore::new();
        let k = identity_kernel(&mut store, 1, 1);
        let path = DirectedGraph::new(2, 1, vec![(0, 1, vec![1.0])], None).unwrap();
        let f = GraphSignal::from_rows(&[[4.0], [9.0]]).unwrap();
        let out = graph_conv_signal(&store, &path, &f, &k, Reduction::Sum).unwrap();
        assert_eq!(out.features().data(), &[0.0, 4.0]);

        let clique =
            DirectedGraph::new(2, 1, vec![(0, 1, vec![1.0]), (1, 0, vec![-1.0])], None).unwrap();
        let out = graph_conv_signal(&store, &clique, &f, &k, Reduction::Sum).unwrap();
        assert_eq!(out.features().data(), &[9.0, 4.0]);
    }

    #[test]
    fn pool_examples() {
        let f = GraphSignal::from_rows(&[[1.0], [3.0], [7.0]]).unwrap();
        let singletons = vec![vec![0], vec![1], vec![2]];
        for red in [Reduction::Sum, Reduction::Mean, Reduction::Max] {
            assert_eq!(graph_pool_signal(&singletons, &f, red).unwrap(), f);
        }
        let out = graph_pool_signal(&[vec![0, 1], vec![2]], &f, Reduction::Max).unwrap();
        assert_eq!(out.features().data(), &[3.0, 7.0]);
        let g = GraphSignal::from_rows(&[[2.0], [4.0]]).unwrap();
        assert_eq!(
            graph_pool_signal(&[vec![0, 1]], &g, Reduction::Mean)
                .unwrap()
                .row(0),
            &[3.0]
        );
        assert!(matches!(
            graph_pool_signal(&[vec![0, 1], vec![1]], &f, Reduction::Sum),
            Err(Error::Argument(_))
        ));
        // unassigned nodes are dropped
        assert_eq!(
            graph_pool_signal(&[vec![2]], &f, Reduction::Sum)
                .unwrap()
                .row(0),
            &[7.0]
        );
    }

    #[test]
    fn aggregate_examples() {
        let c = GraphSignal::from_rows(&[[0.3, -2.0]]).unwrap();
        assert_eq!(aggregate_signals(&c, &c, 3, 5).unwrap(), c);
        let zero = GraphSignal::from_rows(&[[0.0]]).unwrap();
        let eight = GraphSignal::from_rows(&[[8.0]]).unwrap();
        assert_eq!(
            aggregate_signals(&zero, &eight, 2, 6).unwrap().row(0),
            &[6.0]
        );
        assert_eq!(aggregate_signals(&c, &c, 4, 0).unwrap(), c);
        assert!(aggregate_signals(&c, &c, 0, 0).is_err());
    }

    #[test]
    fn global_max_pool_examples() {
        assert_eq!(
            global_max_pool_signal(&GraphSignal::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            global_max_pool_signal(&GraphSignal::from_rows(&[[1.0, 9.0], [5.0, 2.0]]).unwrap())
                .unwrap(),
            vec![5.0, 9.0]
        );
        assert!(global_max_pool_signal(&GraphSignal::zeros(0, 2)).is_err());

        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[[3.0], [3.0]]).unwrap());
        let y = global_max_pool(&mut tape, x).unwrap();
        let l = tape.sum(y).unwrap();
        assert_eq!(
            tape.backward(l).unwrap().get(x).unwrap().data(),
            &[1.0, 0.0]
        );
    }
}
