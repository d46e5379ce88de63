//! Directed and bipartite graphs with real-valued edge labels.
//!
//! An edge `(src, dst, label)` carries information from `src` to `dst`;
//! convolutions aggregate over the in-edges of each output node.

mod io;
mod spatial;

pub(crate) use io::fmt_f64;
pub use io::{read_bigraph, read_graph, write_bigraph, write_graph};
pub use spatial::SpatialIndex;

use std::collections::HashSet;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// A directed graph with labelled edges and optional node positions.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectedGraph {
    num_nodes: usize,
    label_dim: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    labels: Vec<f64>,
    positions: Option<Tensor>,
}

impl DirectedGraph {
    /// Builds a graph from `(src, dst, label)` triples. Duplicate `(src, dst)`
    /// pairs are rejected.
    pub fn new(
        num_nodes: usize,
        label_dim: usize,
        edges: Vec<(usize, usize, Vec<f64>)>,
        positions: Option<Tensor>,
    ) -> Result<Self> {
        let mut src = Vec::with_capacity(edges.len());
        let mut dst = Vec::with_capacity(edges.len());
        let mut labels = Vec::with_capacity(edges.len() * label_dim);
        for (s, d, l) in edges {
            src.push(s);
            dst.push(d);
            if l.len() != label_dim {
                return shape_err(format!(
                    "edge ({s}, {d}) has a {}-dim label, expected {label_dim}",
                    l.len()
                ));
            }
            labels.extend(l);
        }
        Self::from_parts(num_nodes, label_dim, src, dst, labels, positions)
    }

    pub(crate) fn from_parts(
        num_nodes: usize,
        label_dim: usize,
        src: Vec<usize>,
        dst: Vec<usize>,
        labels: Vec<f64>,
        positions: Option<Tensor>,
    ) -> Result<Self> {
        if src.len() != dst.len() || labels.len() != src.len() * label_dim {
            return shape_err("edge arrays disagree in length");
        }
        let mut seen = HashSet::with_capacity(src.len());
        for (&s, &d) in src.iter().zip(&dst) {
            if s >= num_nodes || d >= num_nodes {
                return Err(Error::Index(format!(
                    "edge ({s}, {d}) out of range for {num_nodes} nodes"
                )));
            }
            if !seen.insert((s, d)) {
                return arg_err(format!("duplicate edge ({s}, {d})"));
            }
        }
        if labels.iter().any(|v| !v.is_finite()) {
            return arg_err("edge labels must be finite");
        }
        check_positions(positions.as_ref(), num_nodes, "positions")?;
        Ok(Self {
            num_nodes,
            label_dim,
            src,
            dst,
            labels,
            positions,
        })
    }

    pub fn empty(num_nodes: usize, label_dim: usize) -> Self {
        Self {
            num_nodes,
            label_dim,
            src: vec![],
            dst: vec![],
            labels: vec![],
            positions: None,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn label_dim(&self) -> usize {
        self.label_dim
    }

    pub fn positions(&self) -> Option<&Tensor> {
        self.positions.as_ref()
    }

    pub fn with_positions(mut self, positions: Tensor) -> Result<Self> {
        check_positions(Some(&positions), self.num_nodes, "positions")?;
        self.positions = Some(positions);
        Ok(self)
    }

    pub fn sources(&self) -> &[usize] {
        &self.src
    }

    pub fn targets(&self) -> &[usize] {
        &self.dst
    }

    pub fn label(&self, e: usize) -> &[f64] {
        &self.labels[e * self.label_dim..(e + 1) * self.label_dim]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, &[f64])> + '_ {
        (0..self.num_edges()).map(move |e| (self.src[e], self.dst[e], self.label(e)))
    }

    /// In-neighbours of `v` as `(src, label)`, ascending by source.
    pub fn in_neighbors(&self, v: usize) -> Vec<(usize, &[f64])> {
        let mut out: Vec<_> = self
            .edges()
            .filter(|&(_, d, _)| d == v)
            .map(|(s, _, l)| (s, l))
            .collect();
        out.sort_by_key(|&(s, _)| s);
        out
    }

    /// Copy of the graph with a zero-labelled self-edge on every node that
    /// lacks one.
    pub fn with_self_loops(&self) -> Self {
        let mut has = vec![false; self.num_nodes];
        for (&s, &d) in self.src.iter().zip(&self.dst) {
            if s == d {
                has[s] = true;
            }
        }
        let mut g = self.clone();
        for (v, &h) in has.iter().enumerate() {
            if !h {
                g.src.push(v);
                g.dst.push(v);
                g.labels.extend(std::iter::repeat_n(0.0, self.label_dim));
            }
        }
        g
    }

    /// Multiplies every edge label by `factor`.
    pub fn scaled_labels(&self, factor: f64) -> Self {
        let mut g = self.clone();
        g.labels.iter_mut().for_each(|l| *l *= factor);
        g
    }
}

/// A bipartite graph whose edges all run from the input set `V_i` to the
/// output set `V_o`.
///
/// Edges are stored sorted by `(dst, src, label)`, so the edge order (and
/// therefore every reduction over it) does not depend on the order in which
/// edges were supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteGraph {
    num_in: usize,
    num_out: usize,
    label_dim: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    labels: Vec<f64>,
    offsets: Vec<usize>,
    in_positions: Option<Tensor>,
    out_positions: Option<Tensor>,
    shared_nodes: bool,
}

impl BipartiteGraph {
    /// Builds a bipartite graph, keeping one edge per `(src, dst)` pair (the one
    /// with the smallest label when duplicates disagree).
    pub fn new(
        num_in: usize,
        num_out: usize,
        label_dim: usize,
        edges: Vec<(usize, usize, Vec<f64>)>,
    ) -> Result<Self> {
        Self::build(num_in, num_out, label_dim, edges, false)
    }

    /// Like [`BipartiteGraph::new`] but keeps parallel edges between the same
    /// pair when their labels differ. Only exact duplicates are dropped.
    pub fn new_multi(
        num_in: usize,
        num_out: usize,
        label_dim: usize,
        edges: Vec<(usize, usize, Vec<f64>)>,
    ) -> Result<Self> {
        Self::build(num_in, num_out, label_dim, edges, true)
    }

    fn build(
        num_in: usize,
        num_out: usize,
        label_dim: usize,
        mut edges: Vec<(usize, usize, Vec<f64>)>,
        keep_parallel: bool,
    ) -> Result<Self> {
        for (s, d, l) in &edges {
            if *s >= num_in || *d >= num_out {
                return Err(Error::Index(format!(
                    "edge ({s}, {d}) out of range for a {num_in}×{num_out} bipartite graph"
                )));
            }
            if l.len() != label_dim {
                return shape_err(format!(
                    "edge ({s}, {d}) has a {}-dim label, expected {label_dim}",
                    l.len()
                ));
            }
            if l.iter().any(|v| !v.is_finite()) {
                return arg_err("edge labels must be finite");
            }
        }
        edges.sort_by(|a, b| {
            (a.1, a.0)
                .cmp(&(b.1, b.0))
                .then_with(|| cmp_labels(&a.2, &b.2))
        });
        edges.dedup_by(|b, a| {
            a.0 == b.0 && a.1 == b.1 && (!keep_parallel || cmp_labels(&a.2, &b.2).is_eq())
        });
        let mut src = Vec::with_capacity(edges.len());
        let mut dst = Vec::with_capacity(edges.len());
        let mut labels = Vec::with_capacity(edges.len() * label_dim);
        for (s, d, l) in edges {
            src.push(s);
            dst.push(d);
            labels.extend(l);
        }
        let offsets = csr_offsets(&dst, num_out);
        Ok(Self {
            num_in,
            num_out,
            label_dim,
            src,
            dst,
            labels,
            offsets,
            in_positions: None,
            out_positions: None,
            shared_nodes: false,
        })
    }

    pub fn with_positions(mut self, input: Option<Tensor>, output: Option<Tensor>) -> Result<Self> {
        check_positions(input.as_ref(), self.num_in, "input positions")?;
        check_positions(output.as_ref(), self.num_out, "output positions")?;
        if let (Some(a), Some(b)) = (&input, &output) {
            if a.cols() != b.cols() {
                return shape_err("input and output positions differ in dimension");
            }
        }
        self.in_positions = input;
        self.out_positions = output;
        Ok(self)
    }

    pub fn num_in(&self) -> usize {
        self.num_in
    }

    pub fn num_out(&self) -> usize {
        self.num_out
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn label_dim(&self) -> usize {
        self.label_dim
    }

    /// Source of each edge, in canonical edge order.
    pub fn sources(&self) -> &[usize] {
        &self.src
    }

    pub fn targets(&self) -> &[usize] {
        &self.dst
    }

    pub fn label(&self, e: usize) -> &[f64] {
        &self.labels[e * self.label_dim..(e + 1) * self.label_dim]
    }

    /// All labels as an `m × d` matrix.
    pub fn label_matrix(&self) -> Tensor {
        Tensor::matrix(self.num_edges(), self.label_dim, self.labels.clone()).expect("label layout")
    }

    pub fn in_positions(&self) -> Option<&Tensor> {
        self.in_positions.as_ref()
    }

    pub fn out_positions(&self) -> Option<&Tensor> {
        self.out_positions.as_ref()
    }

    /// True when the output set is the input set (a plain graph viewed as
    /// bipartite).
    pub fn shares_node_set(&self) -> bool {
        self.shared_nodes
    }

    pub fn in_degree(&self, v_o: usize) -> usize {
        self.offsets[v_o + 1] - self.offsets[v_o]
    }

    /// Edge index range of the in-edges of `v_o`.
    pub fn in_edge_range(&self, v_o: usize) -> std::ops::Range<usize> {
        self.offsets[v_o]..self.offsets[v_o + 1]
    }

    /// In-nodes with an edge into `v_o`, ascending by source.
    pub fn neighborhood(&self, v_o: usize) -> Result<Vec<(usize, &[f64])>> {
        if v_o >= self.num_out {
            return Err(Error::Index(format!(
                "output node {v_o} out of range for {} output nodes",
                self.num_out
            )));
        }
        Ok(self
            .in_edge_range(v_o)
            .map(|e| (self.src[e], self.label(e)))
            .collect())
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, &[f64])> + '_ {
        (0..self.num_edges()).map(move |e| (self.src[e], self.dst[e], self.label(e)))
    }

    /// Multiplies every edge label by `factor`.
    pub fn scaled_labels(&self, factor: f64) -> Self {
        let mut g = self.clone();
        g.labels.iter_mut().for_each(|l| *l *= factor);
        g
    }
}

/// Views a graph as the bipartite graph `BG(V, V, E)`.
pub fn as_bipartite(g: &DirectedGraph) -> BipartiteGraph {
    let edges = g.edges().map(|(s, d, l)| (s, d, l.to_vec())).collect();
    let mut bg = BipartiteGraph::build(g.num_nodes, g.num_nodes, g.label_dim, edges, true)
        .expect("a valid directed graph is a valid bipartite graph");
    bg.in_positions = g.positions.clone();
    bg.out_positions = g.positions.clone();
    bg.shared_nodes = true;
    bg
}

/// Connects every ordered pair of distinct points within distance `rho`.
///
/// Edge `i → j` is labelled `p_i - p_j`, so the edge set is symmetric and the
/// labels antisymmetric. Self-edges are not created.
pub fn radius_graph(positions: &Tensor, rho: f64) -> Result<DirectedGraph> {
    if !(rho > 0.0) {
        return arg_err(format!("radius must be positive, got {rho}"));
    }
    if !positions.is_matrix() {
        return shape_err("positions must be an n×k matrix");
    }
    if !positions.all_finite() {
        return arg_err("positions must be finite");
    }
    let (n, k) = (positions.rows(), positions.cols());
    let index = SpatialIndex::new(positions, rho);
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let pi = positions.row(i);
        for j in index.within(pi, rho) {
            if j == i {
                continue;
            }
            src.push(i);
            dst.push(j);
            labels.extend(pi.iter().zip(positions.row(j)).map(|(a, b)| a - b));
        }
    }
    DirectedGraph::from_parts(n, k, src, dst, labels, Some(positions.clone()))
}

/// Node features `f_i = s(v_i)` as a `|V| × N` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSignal {
    features: Tensor,
}

impl GraphSignal {
    pub fn new(features: Tensor) -> Result<Self> {
        if !features.is_matrix() {
            return shape_err("graph signal must be a |V|×N matrix");
        }
        if !features.all_finite() {
            return arg_err("graph signal entries must be finite");
        }
        Ok(Self { features })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn zeros(num_nodes: usize, dim: usize) -> Self {
        Self {
            features: Tensor::zeros(&[num_nodes, dim]),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn into_features(self) -> Tensor {
        self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Checks that the signal is bound to a node set of size `n`.
    pub fn expect_nodes(&self, n: usize) -> Result<()> {
        if self.num_nodes() != n {
            return shape_err(format!(
                "signal has {} rows but the node set has {n} nodes",
                self.num_nodes()
            ));
        }
        Ok(())
    }
}

fn check_positions(p: Option<&Tensor>, n: usize, what: &str) -> Result<()> {
    if let Some(p) = p {
        if !p.is_matrix() || p.rows() != n {
            return shape_err(format!(
                "{what} must have {n} rows, got shape {:?}",
                p.shape()
            ));
        }
        if !p.all_finite() {
            return arg_err(format!("{what} must be finite"));
        }
    }
    Ok(())
}

fn csr_offsets(dst: &[usize], num_out: usize) -> Vec<usize> {
    let mut offsets = vec![0usize; num_out + 1];
    for &d in dst {
        offsets[d + 1] += 1;
    }
    for i in 0..num_out {
        offsets[i + 1] += offsets[i];
    }
    offsets
}

fn cmp_labels(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.total_cmp(y);
        if o.is_ne() {
            return o;
        }
    }
    std::cmp::Ordering::Equal
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn as_bipartite_examples() {
        let bg = as_bipartite(&DirectedGraph::empty(0, 1));
        assert_eq!((bg.num_in(), bg.num_out(), bg.num_edges()), (0, 0, 0));

        let g = DirectedGraph::new(1, 1, vec![(0, 0, vec![0.0])], None).unwrap();
        let bg = as_bipartite(&g);
        assert_eq!((bg.num_in(), bg.num_out()), (1, 1));
        assert_eq!(bg.edges().collect::<Vec<_>>(), vec![(0, 0, &[0.0][..])]);

        let g = DirectedGraph::new(3, 1, vec![(1, 2, vec![7.0]), (0, 1, vec![5.0])], None).unwrap();
        let bg = as_bipartite(&g);
        assert_eq!(
            bg.edges().collect::<Vec<_>>(),
            vec![(0, 1, &[5.0][..]), (1, 2, &[7.0][..])]
        );
        assert!(bg.shares_node_set());
    }

    #[test]
    fn directed_graph_rejects_duplicates_and_bad_labels() {
        let e = vec![(0, 1, vec![1.0]), (0, 1, vec![2.0])];
        assert!(matches!(
            DirectedGraph::new(2, 1, e, None),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            DirectedGraph::new(2, 1, vec![(0, 3, vec![1.0])], None),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            DirectedGraph::new(2, 2, vec![(0, 1, vec![1.0])], None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bipartite_dedupes_pairs() {
        let bg = BipartiteGraph::new(
            2,
            1,
            1,
            vec![(1, 0, vec![3.0]), (1, 0, vec![-1.0]), (0, 0, vec![0.0])],
        )
        .unwrap();
        assert_eq!(bg.num_edges(), 2);
        assert_eq!(bg.label(1), &[-1.0]);
        let multi = BipartiteGraph::new_multi(
            2,
            1,
            1,
            vec![(1, 0, vec![3.0]), (1, 0, vec![3.0]), (1, 0, vec![-1.0])],
        )
        .unwrap();
        assert_eq!(multi.num_edges(), 2);
    }

    #[test]
    fn neighborhood_examples() {
        let bg = BipartiteGraph::new(3, 2, 1, vec![(2, 0, vec![2.0]), (0, 0, vec![0.5])]).unwrap();
        assert!(bg.neighborhood(1).unwrap().is_empty());
        let nb: Vec<usize> = bg.neighborhood(0).unwrap().iter().map(|n| n.0).collect();
        assert_eq!(nb, vec![0, 2]);
        assert!(matches!(bg.neighborhood(2), Err(Error::Index(_))));

        let single = BipartiteGraph::new(1, 1, 2, vec![(0, 0, vec![1.0, -1.0])]).unwrap();
        assert_eq!(single.neighborhood(0).unwrap(), vec![(0, &[1.0, -1.0][..])]);
    }

    #[test]
    fn radius_graph_examples() {
        let far = Tensor::from_rows(&[[0.0, 0.0], [5.0, 0.0]]).unwrap();
        assert_eq!(radius_graph(&far, 2.9).unwrap().num_edges(), 0);

        let near = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let g = radius_graph(&near, 2.9).unwrap();
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(
            edges,
            vec![(0, 1, &[-1.0, 0.0][..]), (1, 0, &[1.0, 0.0][..])]
        );

        assert!(matches!(radius_graph(&near, 0.0), Err(Error::Argument(_))));
        assert!(matches!(radius_graph(&near, -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn lattice_interior_degree_is_24() {
        // Brute-force count of integer offsets with x² + y² ≤ 2.9², excluding 0.
        let mut expected = 0;
        for dx in -3i32..=3 {
            for dy in -3i32..=3 {
                if (dx, dy) != (0, 0) && ((dx * dx + dy * dy) as f64) <= 2.9 * 2.9 {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 24);

        let rows: Vec<[f64; 2]> = (0..28 * 28)
            .map(|i| [(i % 28) as f64, (i / 28) as f64])
            .collect();
        let g = radius_graph(&Tensor::from_rows(&rows).unwrap(), 2.9).unwrap();
        let mut deg = vec![0usize; 28 * 28];
        for &d in g.targets() {
            deg[d] += 1;
        }
        for y in 3..25 {
            for x in 3..25 {
                assert_eq!(deg[y * 28 + x], expected);
            }
        }
    }

    #[test]
    fn self_loops_added_once() {
        let g = DirectedGraph::new(2, 1, vec![(0, 0, vec![0.0]), (0, 1, vec![1.0])], None).unwrap();
        let s = g.with_self_loops();
        assert_eq!(s.num_edges(), 3);
        assert_eq!(s.in_neighbors(1).len(), 2);
    }

    #[test]
    fn signal_validation() {
        assert!(GraphSignal::new(Tensor::vector(vec![1.0])).is_err());
        assert!(GraphSignal::from_rows(&[[f64::NAN]]).is_err());
        let s = GraphSignal::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(s.expect_nodes(2).is_err());
        assert!(s.expect_nodes(1).is_ok());
    }
}
