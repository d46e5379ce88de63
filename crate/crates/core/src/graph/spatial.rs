use std::collections::HashMap;

use crate::tensor::Tensor;

/// Uniform-grid hash over a point set for fixed-radius queries.
pub struct SpatialIndex<'a> {
    points: &'a Tensor,
    cell: f64,
    dim: usize,
    buckets: HashMap<Vec<i64>, Vec<usize>>,
}

impl<'a> SpatialIndex<'a> {
    /// Indexes the rows of `points` with grid cells of side `cell`.
    pub fn new(points: &'a Tensor, cell: f64) -> Self {
        let dim = points.cols();
        let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for i in 0..points.rows() {
            buckets.entry(key(points.row(i), cell)).or_default().push(i);
        }
        Self {
            points,
            cell,
            dim,
            buckets,
        }
    }

    /// Indices of all points `q` with `|q - p| <= r`, in ascending order.
    pub fn within(&self, p: &[f64], r: f64) -> Vec<usize> {
        let center = key(p, self.cell);
        let reach = (r / self.cell).ceil() as i64;
        let r2 = r * r;
        let mut out = Vec::new();
        let mut offset = vec![-reach; self.dim];
        loop {
            let cell: Vec<i64> = center.iter().zip(&offset).map(|(c, o)| c + o).collect();
            if let Some(ids) = self.buckets.get(&cell) {
                for &i in ids {
                    let q = self.points.row(i);
                    let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d2 <= r2 {
                        out.push(i);
                    }
                }
            }
            // odometer increment over the (2·reach+1)^dim neighbourhood
            let mut axis = 0;
            loop {
                if axis == self.dim {
                    out.sort_unstable();
                    return out;
                }
                offset[axis] += 1;
                if offset[axis] > reach {
                    offset[axis] = -reach;
                    axis += 1;
                } else {
                    break;
                }
            }
        }
    }
}

fn key(p: &[f64], cell: f64) -> Vec<i64> {
    p.iter().map(|v| (v / cell).floor() as i64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matches_brute_force(pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40),
                               r in 0.1f64..4.0, cell in 0.2f64..3.0) {
            let rows: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let t = Tensor::from_rows(&rows).unwrap();
            let idx = SpatialIndex::new(&t, cell);
            for p in &rows {
                let brute: Vec<usize> = rows.iter().enumerate()
                    .filter(|(_, q)| (p[0]-q[0]).powi(2) + (p[1]-q[1]).powi(2) <= r * r)
                    .map(|(i, _)| i).collect();
                prop_assert_eq!(idx.within(p, r), brute);
            }
        }
    }
}
