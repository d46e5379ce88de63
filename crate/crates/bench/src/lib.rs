//! Inputs shared by the benchmarks.

use bgnn_core::graph::{radius_graph, DirectedGraph};
use bgnn_core::tensor::{rng_from_seed, Tensor};
use rand::Rng as _;

/// A 1-D lattice of `n` unit-spaced nodes, each linked to its two
/// neighbours, with one feature per node.
pub fn lattice(n: usize) -> (DirectedGraph, Tensor) {
    let positions = Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
    let graph = radius_graph(&positions, 1.5).unwrap();
    let features = Tensor::matrix(n, 1, (0..n).map(|i| (i % 5) as f64 / 5.0).collect()).unwrap();
    (graph, features)
}

/// `n` uniform points in a `side × side` square.
pub fn random_points(n: usize, side: f64, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::matrix(
        n,
        2,
        (0..2 * n).map(|_| rng.random_range(0.0..side)).collect(),
    )
    .unwrap()
}
