//! Point clouds: normalisation, text I/O and a synthetic shape generator.

use std::f64::consts::PI;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{GraphSample, Target};
use crate::error::{arg_err, Error, Result};
use crate::graph::{radius_graph, GraphSignal};
use crate::tensor::{rng_from_seed, Rng, Tensor};

/// Centres the points on their centroid and scales them so that the
/// farthest point has norm 1. All-coincident points map to the origin.
pub fn normalize_pointcloud(points: &Tensor) -> Result<Tensor> {
    if !points.is_matrix() || points.rows() == 0 {
        return arg_err("point cloud must be a non-empty n×k matrix");
    }
    let (n, k) = (points.rows(), points.cols());
    let mut centroid = vec![0.0; k];
    for i in 0..n {
        for (c, &p) in centroid.iter_mut().zip(points.row(i)) {
            *c += p;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);
    let mut out: Vec<f64> = (0..n)
        .flat_map(|i| {
            points
                .row(i)
                .iter()
                .zip(&centroid)
                .map(|(p, c)| p - c)
                .collect::<Vec<_>>()
        })
        .collect();
    let max_norm = out
        .chunks(k)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if max_norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= max_norm);
    }
    Tensor::matrix(n, k, out)
}

/// A labelled cloud of 3-D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Tensor,
    pub label: usize,
}

impl PointCloud {
    /// Radius graph over the points with a constant unit feature per node.
    pub fn to_sample(&self, radius: f64) -> Result<GraphSample> {
        let n = self.points.rows();
        Ok(GraphSample {
            graph: radius_graph(&self.points, radius)?,
            signal: GraphSignal::new(Tensor::matrix(n, 1, vec![1.0; n])?)?,
            target: Target::Class(self.label),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
}

pub const SHAPES: [Shape; 6] = [
    Shape::Sphere,
    Shape::Cube,
    Shape::Cylinder,
    Shape::Cone,
    Shape::Torus,
    Shape::Plane,
];

impl Shape {
    /// A point drawn uniformly from the surface.
    pub fn sample(self, rng: &mut Rng) -> [f64; 3] {
        match self {
            Shape::Sphere => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-12 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            },
            Shape::Cube => {
                let face = rng.random_range(0..6);
                let (a, b) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
            Shape::Cylinder => {
                // radius 1, height 2: side area 4π, each cap π
                let t = rng.random_range(0.0..2.0 * PI);
                let u: f64 = rng.random_range(0.0..6.0);
                if u < 4.0 {
                    [t.cos(), t.sin(), rng.random_range(-1.0..=1.0)]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    [r * t.cos(), r * t.sin(), if u < 5.0 { 1.0 } else { -1.0 }]
                }
            }
            Shape::Cone => {
                // lateral surface, apex at z = 1, base radius 1 at z = -1
                let t = rng.random_range(0.0..2.0 * PI);
                let s = rng.random::<f64>().sqrt();
                [s * t.cos(), s * t.sin(), 1.0 - 2.0 * s]
            }
            Shape::Torus => {
                let (big, small) = (1.0, 0.35);
                loop {
                    let u = rng.random_range(0.0..2.0 * PI);
                    let v = rng.random_range(0.0..2.0 * PI);
                    let w = rng.random_range(0.0..big + small);
                    if w <= big + small * v.cos() {
                        let ring = big + small * v.cos();
                        break [ring * u.cos(), ring * u.sin(), small * v.sin()];
                    }
                }
            }
            Shape::Plane => [
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                0.0,
            ],
        }
    }
}

/// `num_classes × samples_per_class` normalised clouds of uniform surface
/// samples with gaussian noise of standard deviation `noise`. Samples are
/// ordered by class.
///
/// Sphere points are drawn in antipodal pairs so that a noise-free sphere
/// with an even point count is already centred and keeps unit norms.
pub fn synthetic_shapes(
    num_classes: usize,
    points_per_cloud: usize,
    samples_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    if num_classes > SHAPES.len() {
        return arg_err(format!(
            "at most {} shape classes are available",
            SHAPES.len()
        ));
    }
    if points_per_cloud == 0 {
        return arg_err("clouds need at least one point");
    }
    let jitter = Normal::new(0.0, noise).map_err(|e| Error::Argument(format!("noise: {e}")))?;
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(num_classes * samples_per_class);
    for (label, shape) in SHAPES.iter().take(num_classes).enumerate() {
        for _ in 0..samples_per_class {
            let mut data = Vec::with_capacity(points_per_cloud * 3);
            let mut pending: Option<[f64; 3]> = None;
            for _ in 0..points_per_cloud {
                let p = match pending.take() {
                    Some(p) => p,
                    None => {
                        let p = shape.sample(&mut rng);
                        if *shape == Shape::Sphere {
                            pending = Some([-p[0], -p[1], -p[2]]);
                        }
                        p
                    }
                };
                for c in p {
                    data.push(
                        c + if noise > 0.0 {
                            jitter.sample(&mut rng)
                        } else {
                            0.0
                        },
                    );
                }
            }
            let points = normalize_pointcloud(&Tensor::matrix(points_per_cloud, 3, data)?)?;
            out.push(PointCloud { points, label });
        }
    }
    Ok(out)
}

/// Reads whitespace-separated `x y z` lines. Blank lines and lines starting
/// with `#` are skipped.
pub fn read_pointcloud<R: BufRead>(r: R) -> Result<Tensor> {
    let mut data = Vec::new();
    for (no, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse).collect();
        match vals {
            Ok(v) if v.len() == 3 && v.iter().all(|x| x.is_finite()) => data.extend(v),
            _ => return Err(Error::Format(format!("line {}: expected `x y z`", no + 1))),
        }
    }
    let n = data.len() / 3;
    Tensor::matrix(n, 3, data)
}

/// Reads a manifest of `path label` lines. Relative paths are resolved
/// against `base`.
pub fn read_manifest<R: BufRead>(r: R, base: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let mut out = Vec::new();
    for (no, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(path), Some(label), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Format(format!(
                "line {}: expected `path label`",
                no + 1
            )));
        };
        let label = label
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad label `{label}`", no + 1)))?;
        out.push((base.join(path), label));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norms(t: &Tensor) -> Vec<f64> {
        (0..t.rows())
            .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    #[test]
    fn normalisation_examples() {
        let p = Tensor::from_rows(&[[0.0, 0.0, 0.0], [0.0, 0.0, 4.0]]).unwrap();
        assert_eq!(
            normalize_pointcloud(&p).unwrap().data(),
            &[0.0, 0.0, -1.0, 0.0, 0.0, 1.0]
        );

        let single = Tensor::from_rows(&[[3.0, -2.0, 7.0]]).unwrap();
        assert_eq!(
            normalize_pointcloud(&single).unwrap().data(),
            &[0.0, 0.0, 0.0]
        );

        let unit = Tensor::from_rows(&[
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 0.6, 0.0],
            [0.0, -0.6, 0.0],
        ])
        .unwrap();
        let back = normalize_pointcloud(&unit).unwrap();
        for (a, b) in back.data().iter().zip(unit.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn normalised_sphere_has_unit_norms() {
        let set = synthetic_shapes(1, 200, 2, 0.0, 4).unwrap();
        for c in &set {
            for n in norms(&c.points) {
                assert!((n - 1.0).abs() < 1e-12, "{n}");
            }
        }
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let a = synthetic_shapes(2, 256, 10, 0.01, 7).unwrap();
        assert_eq!(a.len(), 20);
        assert!(a.iter().all(|c| c.points.shape() == [256, 3]));
        assert_eq!(a.iter().filter(|c| c.label == 1).count(), 10);
        assert_eq!(a, synthetic_shapes(2, 256, 10, 0.01, 7).unwrap());
        assert!(synthetic_shapes(7, 10, 1, 0.0, 0).is_err());
    }

    #[test]
    fn every_shape_normalises_to_max_norm_one() {
        let set = synthetic_shapes(6, 300, 1, 0.02, 1).unwrap();
        for c in &set {
            let m = norms(&c.points).into_iter().fold(0.0, f64::max);
            assert!((m - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn text_readers() {
        let t = read_pointcloud("# cloud\n1 2 3\n\n4 5 6\n".as_bytes()).unwrap();
        assert_eq!(t.shape(), [2, 3]);
        assert!(read_pointcloud("1 2\n".as_bytes()).is_err());
        let m = read_manifest("a.xyz 2\n/abs/b.xyz 0\n".as_bytes(), Path::new("/data")).unwrap();
        assert_eq!(
            m,
            vec![
                (PathBuf::from("/data/a.xyz"), 2),
                (PathBuf::from("/abs/b.xyz"), 0)
            ]
        );
        assert!(read_manifest("a.xyz\n".as_bytes(), Path::new(".")).is_err());
    }
}
