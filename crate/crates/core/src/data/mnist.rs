//! MNIST digits as graphs over their lit pixels.

use std::path::Path;

use super::{idx, stratified_subset, GraphSample, Target};
use crate::error::{arg_err, Error, Result};
use crate::graph::{radius_graph, GraphSignal};
use crate::tensor::Tensor;

pub const MNIST_SIDE: usize = 28;
/// Neighbourhood radius of the pixel graphs, in pixels.
pub const MNIST_RADIUS: f64 = 2.9;

/// A digit with intensities scaled to `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistDigit {
    pub pixels: Vec<f64>,
    pub label: usize,
}

impl MnistDigit {
    pub fn from_bytes(bytes: &[u8], label: usize) -> Self {
        Self {
            pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
            label,
        }
    }

    pub fn is_blank(&self, threshold: f64) -> bool {
        self.pixels.iter().all(|&p| p <= threshold)
    }

    /// Pixel coordinates `(x, y) = (column, row)` of the whole grid.
    pub fn grid_positions() -> Tensor {
        let n = MNIST_SIDE * MNIST_SIDE;
        let data = (0..n)
            .flat_map(|i| [(i % MNIST_SIDE) as f64, (i / MNIST_SIDE) as f64])
            .collect();
        Tensor::matrix(n, 2, data).unwrap()
    }
}

/// Builds the graph of pixels brighter than `threshold`: nodes sit at their
/// integer coordinates, carry their intensity and are joined when within
/// `rho`. A blank image gives an empty graph.
pub fn mnist_to_graph(digit: &MnistDigit, rho: f64, threshold: f64) -> Result<GraphSample> {
    if digit.pixels.len() != MNIST_SIDE * MNIST_SIDE {
        return arg_err(format!(
            "expected {} pixels, got {}",
            MNIST_SIDE * MNIST_SIDE,
            digit.pixels.len()
        ));
    }
    let mut pos = Vec::new();
    let mut feat = Vec::new();
    for (i, &v) in digit.pixels.iter().enumerate() {
        if v > threshold {
            pos.extend([(i % MNIST_SIDE) as f64, (i / MNIST_SIDE) as f64]);
            feat.push(v);
        }
    }
    let n = feat.len();
    let graph = radius_graph(&Tensor::matrix(n, 2, pos)?, rho)?;
    Ok(GraphSample {
        graph,
        signal: GraphSignal::new(Tensor::matrix(n, 1, feat)?)?,
        target: Target::Class(digit.label),
    })
}

/// Disjoint train and test digits.
#[derive(Clone, Debug)]
pub struct MnistSplit {
    pub train: Vec<MnistDigit>,
    pub test: Vec<MnistDigit>,
}

fn read_set(root: &Path, prefix: &str) -> Result<Option<Vec<MnistDigit>>> {
    let images = root.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = root.join(format!("{prefix}-labels-idx1-ubyte"));
    if !images.exists() || !labels.exists() {
        return Ok(None);
    }
    let im = idx::read_idx_images(&images)?;
    let lb = idx::read_idx_labels(&labels)?;
    if im.count != lb.len() || im.rows != MNIST_SIDE || im.cols != MNIST_SIDE {
        return Err(Error::Format(format!(
            "{}: inconsistent MNIST files",
            root.display()
        )));
    }
    Ok(Some(
        (0..im.count)
            .map(|i| MnistDigit::from_bytes(im.image(i), lb[i] as usize))
            .filter(|d| !d.is_blank(0.0))
            .collect(),
    ))
}

/// Loads a stratified subset of `train_size` training and `test_size` test
/// digits from `root` (sizes must be multiples of 10).
///
/// The test digits come from the `t10k` files when present; otherwise both
/// sets are drawn, disjointly, from the training files.
pub fn load_mnist(
    root: &Path,
    train_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<MnistSplit> {
    if !train_size.is_multiple_of(10) || !test_size.is_multiple_of(10) {
        return arg_err("MNIST subset sizes must be multiples of 10");
    }
    let pool = read_set(root, "train")?.ok_or_else(|| {
        Error::Argument(format!(
            "no MNIST training files under {} (run scripts/fetch_mnist.py)",
            root.display()
        ))
    })?;
    let (tr, te) = (train_size / 10, test_size / 10);
    let pick = |set: &[MnistDigit], per_class: usize, seed: u64| -> Result<Vec<Vec<usize>>> {
        let labels: Vec<usize> = set.iter().map(|d| d.label).collect();
        let chosen = stratified_subset(&labels, per_class, seed);
        let mut by_class = vec![Vec::new(); 10];
        for i in chosen {
            by_class[labels[i]].push(i);
        }
        if by_class.iter().any(|c| c.len() < per_class) {
            return arg_err(format!("not enough digits for {per_class} per class"));
        }
        Ok(by_class)
    };
    match read_set(root, "t10k")? {
        Some(test_pool) => {
            let train = pick(&pool, tr, seed)?
                .concat()
                .into_iter()
                .map(|i| pool[i].clone())
                .collect();
            let test = pick(&test_pool, te, seed ^ 1)?
                .concat()
                .into_iter()
                .map(|i| test_pool[i].clone())
                .collect();
            Ok(MnistSplit { train, test })
        }
        None => {
            let groups = pick(&pool, tr + te, seed)?;
            let train = groups
                .iter()
                .flat_map(|g| &g[..tr])
                .map(|&i| pool[i].clone())
                .collect();
            let test = groups
                .iter()
                .flat_map(|g| &g[tr..])
                .map(|&i| pool[i].clone())
                .collect();
            Ok(MnistSplit { train, test })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digit(lit: &[(usize, usize, f64)]) -> MnistDigit {
        let mut pixels = vec![0.0; 784];
        for &(x, y, v) in lit {
            pixels[y * 28 + x] = v;
        }
        MnistDigit { pixels, label: 3 }
    }

    #[test]
    fn single_pixel() {
        let s = mnist_to_graph(&digit(&[(4, 5, 0.5)]), MNIST_RADIUS, 0.0).unwrap();
        assert_eq!(s.graph.num_nodes(), 1);
        assert_eq!(s.graph.num_edges(), 0);
        assert_eq!(s.signal.row(0), &[0.5]);
        assert_eq!(s.target, Target::Class(3));
    }

    #[test]
    fn two_pixels_two_apart() {
        let s = mnist_to_graph(&digit(&[(4, 5, 1.0), (6, 5, 1.0)]), MNIST_RADIUS, 0.0).unwrap();
        assert_eq!(s.graph.num_edges(), 2);
        let labels: Vec<&[f64]> = (0..2).map(|e| s.graph.label(e)).collect();
        assert!(labels.contains(&&[-2.0, 0.0][..]) && labels.contains(&&[2.0, 0.0][..]));
    }

    #[test]
    fn full_grid_interior_degree() {
        let s = mnist_to_graph(
            &MnistDigit {
                pixels: vec![1.0; 784],
                label: 0,
            },
            MNIST_RADIUS,
            0.0,
        )
        .unwrap();
        assert_eq!(s.graph.num_nodes(), 784);
        let centre = 14 * 28 + 14;
        assert_eq!(s.graph.in_neighbors(centre).len(), 24);
    }

    #[test]
    fn blank_and_threshold() {
        let s = mnist_to_graph(&digit(&[]), MNIST_RADIUS, 0.0).unwrap();
        assert_eq!(s.graph.num_nodes(), 0);
        let s = mnist_to_graph(&digit(&[(1, 1, 0.2), (2, 2, 0.8)]), MNIST_RADIUS, 0.5).unwrap();
        assert_eq!(s.graph.num_nodes(), 1);
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_mnist(dir.path(), 20, 10, 0).unwrap_err();
        assert!(err.to_string().contains("fetch_mnist"), "{err}");
    }
}
