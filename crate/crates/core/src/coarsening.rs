//! VoxelGrid clustering, coarsening bipartite graphs and graph expansion.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{arg_err, shape_err, Result};
use crate::graph::{BipartiteGraph, DirectedGraph, SpatialIndex};
use crate::tensor::Tensor;

/// Vertex-exclusive assignment of nodes to super-nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    member_of: Vec<Option<usize>>,
    num_clusters: usize,
    super_positions: Tensor,
}

impl Clustering {
    /// Builds a clustering from per-node assignments. Every cluster index
    /// below `num_clusters` must be used.
    pub fn new(
        member_of: Vec<Option<usize>>,
        num_clusters: usize,
        super_positions: Tensor,
    ) -> Result<Self> {
        let mut used = vec![false; num_clusters];
        for c in member_of.iter().flatten() {
            if *c >= num_clusters {
                return arg_err(format!(
                    "cluster {c} out of range for {num_clusters} clusters"
                ));
            }
            used[*c] = true;
        }
        if used.iter().any(|u| !u) {
            return arg_err("every cluster must have at least one member");
        }
        if super_positions.rows() != num_clusters || !super_positions.is_matrix() {
            return shape_err("one super-node position per cluster is required");
        }
        Ok(Self {
            member_of,
            num_clusters,
            super_positions,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn num_nodes(&self) -> usize {
        self.member_of.len()
    }

    pub fn member_of(&self, v: usize) -> Option<usize> {
        self.member_of[v]
    }

    pub fn super_positions(&self) -> &Tensor {
        &self.super_positions
    }

    /// Member lists, each ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_clusters];
        for (v, c) in self.member_of.iter().enumerate() {
            if let Some(c) = c {
                groups[*c].push(v);
            }
        }
        groups
    }
}

/// Assigns each point to the axis-aligned cell of side `rho` containing it,
/// measured from the componentwise minimum of all points.
///
/// Non-empty cells become clusters, numbered in lexicographic cell order;
/// each super-node sits at the centroid of its members.
pub fn voxel_grid(positions: &Tensor, rho: f64) -> Result<Clustering> {
    if !(rho > 0.0) {
        return arg_err(format!("voxel resolution must be positive, got {rho}"));
    }
    if !positions.is_matrix() || !positions.all_finite() {
        return arg_err("positions must be a finite n×k matrix");
    }
    let (n, k) = (positions.rows(), positions.cols());
    let mut origin = vec![f64::INFINITY; k];
    for i in 0..n {
        for (o, &p) in origin.iter_mut().zip(positions.row(i)) {
            *o = o.min(p);
        }
    }
    let cells: Vec<Vec<i64>> = (0..n)
        .map(|i| {
            positions
                .row(i)
                .iter()
                .zip(&origin)
                .map(|(p, o)| ((p - o) / rho).floor() as i64)
                .collect()
        })
        .collect();
    let mut numbering: BTreeMap<&[i64], usize> = cells.iter().map(|c| (c.as_slice(), 0)).collect();
    for (idx, slot) in numbering.values_mut().enumerate() {
        *slot = idx;
    }
    let member_of: Vec<Option<usize>> = cells
        .iter()
        .map(|c| Some(numbering[c.as_slice()]))
        .collect();
    let num_clusters = numbering.len();
    let mut sums = vec![0.0; num_clusters * k];
    let mut counts = vec![0usize; num_clusters];
    for (i, c) in member_of.iter().enumerate() {
        let c = c.unwrap();
        counts[c] += 1;
        for (s, &p) in sums[c * k..(c + 1) * k].iter_mut().zip(positions.row(i)) {
            *s += p;
        }
    }
    for (c, &cnt) in counts.iter().enumerate() {
        for s in &mut sums[c * k..(c + 1) * k] {
            *s /= cnt as f64;
        }
    }
    Clustering::new(
        member_of,
        num_clusters,
        Tensor::matrix(num_clusters, k, sums)?,
    )
}

/// How input-node edges are attached to super-nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Remap {
    /// Input node `v_i` connects to every super-node within the radius,
    /// labelled `p_i - u_k`.
    #[default]
    Radius,
    /// Every edge `v_i → v_j` of the input graph becomes `v_i → u_k` for the
    /// cluster `k` of `v_j`, keeping its label. Parallel edges are kept.
    Edges,
}

/// Builds the bipartite graph from the nodes of `g` to the super-nodes of
/// `clustering`.
pub fn build_coarsening_bigraph(
    g: &DirectedGraph,
    clustering: &Clustering,
    radius: f64,
    remap: Remap,
) -> Result<BipartiteGraph> {
    let Some(pos) = g.positions() else {
        return arg_err("coarsening needs node positions");
    };
    if clustering.num_nodes() != g.num_nodes() {
        return shape_err(format!(
            "clustering covers {} nodes, graph has {}",
            clustering.num_nodes(),
            g.num_nodes()
        ));
    }
    let supers = clustering.super_positions();
    let k = clustering.num_clusters();
    let bg = match remap {
        Remap::Radius => {
            if !(radius > 0.0) {
                return arg_err(format!("radius must be positive, got {radius}"));
            }
            if supers.cols() != pos.cols() && k > 0 {
                return shape_err("super-node and node positions differ in dimension");
            }
            let index = SpatialIndex::new(supers, radius);
            let mut edges = Vec::new();
            for i in 0..g.num_nodes() {
                let p = pos.row(i);
                for u in index.within(p, radius) {
                    let label = p.iter().zip(supers.row(u)).map(|(a, b)| a - b).collect();
                    edges.push((i, u, label));
                }
            }
            BipartiteGraph::new(g.num_nodes(), k, pos.cols(), edges)?
        }
        Remap::Edges => {
            let edges = g
                .edges()
                .filter_map(|(s, d, l)| clustering.member_of(d).map(|c| (s, c, l.to_vec())))
                .collect();
            BipartiteGraph::new_multi(g.num_nodes(), k, g.label_dim(), edges)?
        }
    };
    bg.with_positions(Some(pos.clone()), Some(supers.clone()))
}

/// Inserts a node at the midpoint of every undirected edge and connects it to
/// both endpoints in both directions. Original edges are kept.
pub fn midpoint_expand(g: &DirectedGraph) -> Result<DirectedGraph> {
    let Some(pos) = g.positions() else {
        return arg_err("midpoint expansion needs node positions");
    };
    let k = pos.cols();
    if g.num_edges() > 0 && g.label_dim() != k {
        return shape_err(format!(
            "new edges carry {k}-dim position offsets but the graph has {}-dim labels",
            g.label_dim()
        ));
    }
    let undirected: BTreeSet<(usize, usize)> = g
        .edges()
        .filter(|(s, d, _)| s != d)
        .map(|(s, d, _)| (s.min(d), s.max(d)))
        .collect();
    let n = g.num_nodes();
    let mut positions = pos.data().to_vec();
    let mut edges: Vec<(usize, usize, Vec<f64>)> =
        g.edges().map(|(s, d, l)| (s, d, l.to_vec())).collect();
    let offset =
        |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    for (t, &(i, j)) in undirected.iter().enumerate() {
        let m = n + t;
        let mid: Vec<f64> = pos
            .row(i)
            .iter()
            .zip(pos.row(j))
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        for end in [i, j] {
            let pe = pos.row(end);
            edges.push((m, end, offset(&mid, pe)));
            edges.push((end, m, offset(pe, &mid)));
        }
        positions.extend(mid);
    }
    let total = n + undirected.len();
    DirectedGraph::new(total, k, edges, Some(Tensor::matrix(total, k, positions)?))
}

/// Bipartite graph from coarse nodes to fine nodes for interpolation.
#[derive(Clone, Debug)]
pub struct ExpansionGraph {
    pub graph: BipartiteGraph,
    /// Fine nodes with no coarse node in range (they receive zero features).
    pub uncovered: usize,
}

/// Connects coarse node `u` to fine node `w` when `|u - w| <= radius`,
/// labelled `u - w`.
pub fn build_expansion_bigraph(
    coarse: &Tensor,
    fine: &Tensor,
    radius: f64,
) -> Result<ExpansionGraph> {
    if !(radius > 0.0) {
        return arg_err(format!("radius must be positive, got {radius}"));
    }
    if !coarse.is_matrix()
        || !fine.is_matrix()
        || (coarse.cols() != fine.cols() && coarse.rows() > 0)
    {
        return shape_err("coarse and fine positions must be matrices of the same dimension");
    }
    let index = SpatialIndex::new(coarse, radius);
    let mut edges = Vec::new();
    let mut uncovered = 0;
    for w in 0..fine.rows() {
        let pw = fine.row(w);
        let near = index.within(pw, radius);
        if near.is_empty() {
            uncovered += 1;
        }
        for u in near {
            let label = coarse.row(u).iter().zip(pw).map(|(a, b)| a - b).collect();
            edges.push((u, w, label));
        }
    }
    let graph = BipartiteGraph::new(coarse.rows(), fine.rows(), fine.cols(), edges)?
        .with_positions(Some(coarse.clone()), Some(fine.clone()))?;
    Ok(ExpansionGraph { graph, uncovered })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::radius_graph;
    use proptest::prelude::*;

    fn pts(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn voxel_grid_examples() {
        let c = voxel_grid(&pts(&[[0.1, 0.1], [0.2, 0.3], [0.6, 0.0]]), 1.0).unwrap();
        assert_eq!(c.num_clusters(), 1);
        let cen = c.super_positions().row(0);
        assert!((cen[0] - 0.3).abs() < 1e-15 && (cen[1] - 0.4 / 3.0).abs() < 1e-15);

        let c = voxel_grid(&pts(&[[0.0, 0.0], [10.0, 0.0]]), 1.0).unwrap();
        assert_eq!(c.num_clusters(), 2);
        assert_eq!(c.super_positions().data(), &[0.0, 0.0, 10.0, 0.0]);

        let c = voxel_grid(&pts(&[[0.0, 0.0], [0.4, 0.0], [1.2, 0.0], [1.4, 0.0]]), 1.0).unwrap();
        assert_eq!(c.groups(), vec![vec![0, 1], vec![2, 3]]);
        let s = c.super_positions();
        assert!((s.get(0, 0) - 0.2).abs() < 1e-15 && (s.get(1, 0) - 1.3).abs() < 1e-15);

        assert!(voxel_grid(&pts(&[[0.0, 0.0]]), 0.0).is_err());
    }

    #[test]
    fn voxel_numbering_is_lexicographic() {
        let c = voxel_grid(&pts(&[[5.0, 0.0], [0.0, 5.0], [0.0, 0.0]]), 1.0).unwrap();
        // cells (5,0), (0,5), (0,0) → order (0,0) < (0,5) < (5,0)
        assert_eq!(c.member_of(2), Some(0));
        assert_eq!(c.member_of(1), Some(1));
        assert_eq!(c.member_of(0), Some(2));
    }

    #[test]
    fn coarsening_singletons_connect_to_own_super_node() {
        let p = pts(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]);
        let g = radius_graph(&p, 1.0).unwrap();
        let c = voxel_grid(&p, 1.0).unwrap();
        let bg = build_coarsening_bigraph(&g, &c, 0.5, Remap::Radius).unwrap();
        assert_eq!(bg.num_edges(), 3);
        for (s, d, l) in bg.edges() {
            assert_eq!(c.member_of(s), Some(d));
            assert_eq!(l, &[0.0, 0.0]);
        }
    }

    #[test]
    fn coarsening_small_radius_is_pure_pooling() {
        let rows: Vec<[f64; 2]> = (0..12)
            .map(|i| [(i % 4) as f64 * 0.3, (i / 4) as f64 * 0.3])
            .collect();
        let p = pts(&rows);
        let g = radius_graph(&p, 0.5).unwrap();
        let c = voxel_grid(&p, 0.6).unwrap();
        // brute force: smallest radius that still reaches every node's own centroid
        let own = (0..12)
            .map(|i| {
                let u = c.super_positions().row(c.member_of(i).unwrap());
                ((rows[i][0] - u[0]).powi(2) + (rows[i][1] - u[1]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max);
        let other = (0..12)
            .flat_map(|i| (0..c.num_clusters()).map(move |k| (i, k)))
            .filter(|&(i, k)| c.member_of(i) != Some(k))
            .map(|(i, k)| {
                let u = c.super_positions().row(k);
                ((rows[i][0] - u[0]).powi(2) + (rows[i][1] - u[1]).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(own < other);
        let bg = build_coarsening_bigraph(&g, &c, (own + other) / 2.0, Remap::Radius).unwrap();
        assert_eq!(bg.num_edges(), 12);
        for (s, d, _) in bg.edges() {
            assert_eq!(c.member_of(s), Some(d));
        }
    }

    #[test]
    fn coarsening_lattice_enumeration() {
        let n = 10;
        let rows: Vec<[f64; 1]> = (0..n).map(|i| [i as f64]).collect();
        let p = Tensor::from_rows(&rows).unwrap();
        let g = radius_graph(&p, 1.0).unwrap();
        let c = voxel_grid(&p, 2.0).unwrap();
        assert_eq!(c.num_clusters(), 5);
        let bg = build_coarsening_bigraph(&g, &c, 1.0, Remap::Radius).unwrap();
        // exhaustive: centroids at 0.5, 2.5, ...; members at distance 0.5, next nodes at 1.5
        for k in 0..5 {
            let centre = 2.0 * k as f64 + 0.5;
            let expected: Vec<usize> = (0..n)
                .filter(|&i| (i as f64 - centre).abs() <= 1.0)
                .collect();
            let got: Vec<usize> = bg.neighborhood(k).unwrap().iter().map(|e| e.0).collect();
            assert_eq!(got, expected);
            assert_eq!(got, vec![2 * k, 2 * k + 1]);
        }
    }

    #[test]
    fn coarsening_needs_positions() {
        let g = DirectedGraph::new(2, 1, vec![(0, 1, vec![1.0])], None).unwrap();
        let c = Clustering::new(vec![Some(0), Some(0)], 1, Tensor::zeros(&[1, 1])).unwrap();
        assert!(build_coarsening_bigraph(&g, &c, 1.0, Remap::Radius).is_err());
    }

    #[test]
    fn literal_remap_keeps_parallel_edges() {
        let p = pts(&[[0.0, 0.0], [0.5, 0.0], [0.5, 0.5]]);
        let g = radius_graph(&p, 1.0).unwrap();
        let c = voxel_grid(&p, 1.0).unwrap();
        let bg = build_coarsening_bigraph(&g, &c, 1.0, Remap::Edges).unwrap();
        assert_eq!(bg.num_edges(), g.num_edges());
    }

    #[test]
    fn midpoint_examples() {
        let p = pts(&[[0.0, 0.0], [2.0, 4.0]]);
        let g = radius_graph(&p, 5.0).unwrap();
        let e = midpoint_expand(&g).unwrap();
        assert_eq!(e.num_nodes(), 3);
        assert_eq!(e.positions().unwrap().row(2), &[1.0, 2.0]);

        let lonely = radius_graph(&p, 1.0).unwrap();
        assert_eq!(midpoint_expand(&lonely).unwrap(), lonely);

        let tri = radius_graph(&pts(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), 2.0).unwrap();
        let e = midpoint_expand(&tri).unwrap();
        assert_eq!(e.num_nodes(), 6);
        assert_eq!(e.num_edges() - tri.num_edges(), 12);
    }

    #[test]
    fn expansion_examples() {
        let c = pts(&[[0.0, 0.0], [1.0, 1.0]]);
        let ex = build_expansion_bigraph(&c, &c, 0.1).unwrap();
        assert_eq!(ex.graph.num_edges(), 2);
        assert!(ex.graph.edges().all(|(s, d, l)| s == d && l == [0.0, 0.0]));

        let one = pts(&[[0.0, 0.0]]);
        let fine = pts(&[[0.1, 0.0], [0.0, -0.2], [0.3, 0.3]]);
        let ex = build_expansion_bigraph(&one, &fine, 1.0).unwrap();
        assert!((0..3).all(|w| ex.graph.in_degree(w) == 1));

        let coarse = Tensor::from_rows(&[[0.0], [2.0]]).unwrap();
        let fine = Tensor::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let ex = build_expansion_bigraph(&coarse, &fine, 1.5).unwrap();
        let nb: Vec<usize> = ex
            .graph
            .neighborhood(1)
            .unwrap()
            .iter()
            .map(|e| e.0)
            .collect();
        assert_eq!(nb, vec![0, 1]);
        assert_eq!(ex.uncovered, 0);

        let ex =
            build_expansion_bigraph(&coarse, &Tensor::from_rows(&[[9.0]]).unwrap(), 1.5).unwrap();
        assert_eq!(ex.uncovered, 1);
    }

    proptest! {
        #[test]
        fn voxel_grid_translation_consistent(
            raw in prop::collection::vec((0i32..64, 0i32..64), 1..30),
            shift in (-5i32..5, -5i32..5),
        ) {
            let rho = 0.5;
            let rows: Vec<[f64; 2]> = raw.iter().map(|&(x, y)| [x as f64 / 8.0, y as f64 / 8.0]).collect();
            let moved: Vec<[f64; 2]> = rows.iter()
                .map(|r| [r[0] + shift.0 as f64 * rho, r[1] + shift.1 as f64 * rho]).collect();
            let a = voxel_grid(&pts(&rows), rho).unwrap();
            let b = voxel_grid(&pts(&moved), rho).unwrap();
            prop_assert_eq!(a.groups(), b.groups());
        }

        #[test]
        fn centroids_inside_member_bounds(raw in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..40)) {
            let rows: Vec<[f64; 2]> = raw.iter().map(|&(x, y)| [x, y]).collect();
            let c = voxel_grid(&pts(&rows), 0.7).unwrap();
            for (k, members) in c.groups().iter().enumerate() {
                for axis in 0..2 {
                    let lo = members.iter().map(|&m| rows[m][axis]).fold(f64::INFINITY, f64::min);
                    let hi = members.iter().map(|&m| rows[m][axis]).fold(f64::NEG_INFINITY, f64::max);
                    let v = c.super_positions().get(k, axis);
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn diagonal_radius_reaches_own_centroid(raw in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..40)) {
            let rows: Vec<[f64; 2]> = raw.iter().map(|&(x, y)| [x, y]).collect();
            let p = pts(&rows);
            let g = radius_graph(&p, 0.5).unwrap();
            let rho = 0.7;
            let c = voxel_grid(&p, rho).unwrap();
            let bg = build_coarsening_bigraph(&g, &c, rho * 2f64.sqrt(), Remap::Radius).unwrap();
            let mut out_deg = vec![0; rows.len()];
            for &s in bg.sources() { out_deg[s] += 1; }
            prop_assert!(out_deg.iter().all(|&d| d >= 1));
        }

        #[test]
        fn midpoint_counts(raw in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..15)) {
            let rows: Vec<[f64; 2]> = raw.iter().map(|&(x, y)| [x, y]).collect();
            let g = radius_graph(&pts(&rows), 1.0).unwrap();
            let undirected = g.num_edges() / 2;
            let e = midpoint_expand(&g).unwrap();
            prop_assert_eq!(e.num_nodes(), rows.len() + undirected);
            prop_assert_eq!(e.num_edges(), g.num_edges() + 4 * undirected);
        }
    }
}
