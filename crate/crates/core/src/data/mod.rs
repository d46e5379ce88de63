//! Datasets as graphs: MNIST digits, point clouds and synthetic shapes.

mod idx;
mod mnist;
mod pointcloud;

pub use idx::{read_idx_images, read_idx_labels, IdxImages};
pub use mnist::{load_mnist, mnist_to_graph, MnistDigit, MnistSplit, MNIST_RADIUS, MNIST_SIDE};
pub use pointcloud::{
    normalize_pointcloud, read_manifest, read_pointcloud, synthetic_shapes, PointCloud, Shape,
    SHAPES,
};

use rand::seq::SliceRandom;

use crate::graph::{DirectedGraph, GraphSignal};
use crate::tensor::{rng_from_seed, Tensor};

/// What a sample should be mapped to.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Values the network output is regressed onto, row-major.
    Signal(Tensor),
}

/// A graph with its node features and target.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSample {
    pub graph: DirectedGraph,
    pub signal: GraphSignal,
    pub target: Target,
}

impl GraphSample {
    pub fn class(&self) -> Option<usize> {
        match self.target {
            Target::Class(c) => Some(c),
            Target::Signal(_) => None,
        }
    }
}

/// Picks `per_class` indices of every class, shuffled with `seed`. Classes
/// with fewer members contribute all of them. The result is sorted by
/// class, then by the shuffled order.
pub fn stratified_subset(labels: &[usize], per_class: usize, seed: u64) -> Vec<usize> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_class);
        out.extend(idx);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_subset_is_balanced_and_seeded() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let a = stratified_subset(&labels, 5, 9);
        assert_eq!(a.len(), 20);
        for c in 0..4 {
            assert_eq!(a.iter().filter(|&&i| labels[i] == c).count(), 5);
        }
        assert_eq!(a, stratified_subset(&labels, 5, 9));
        assert_ne!(a, stratified_subset(&labels, 5, 10));
    }
}
