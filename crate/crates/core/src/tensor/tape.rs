use super::{matmul_into, Activation, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::profile::OpCounts;
use crate::Reduction;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    MulConst {
        x: Var,
        c: Vec<f64>,
    },
    AddRowBias {
        x: Var,
        b: Var,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    SegmentReduce {
        x: Var,
        seg: Vec<usize>,
        red: Reduction,
        // Per output element: source row for max (usize::MAX when empty).
        argmax: Vec<usize>,
        counts: Vec<usize>,
    },
    SegmentSoftmax {
        x: Var,
        seg: Vec<usize>,
        num_segments: usize,
    },
    EdgeMatVec {
        w: Var,
        x: Var,
        out_dim: usize,
        in_dim: usize,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    Aggregate {
        a: Var,
        b: Var,
        n1: f64,
        n2: f64,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is single-threaded; run one tape per worker.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counters: Option<OpCounts>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that tallies work done by graph layers into [`OpCounts`].
    pub fn with_counting() -> Self {
        Self {
            nodes: Vec::new(),
            counters: Some(OpCounts::default()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> Option<&OpCounts> {
        self.counters.as_ref()
    }

    pub(crate) fn counters_mut(&mut self) -> Option<&mut OpCounts> {
        self.counters.as_mut()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name, node });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(node))
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return shape_err(format!(
                "{what} must be a matrix, got shape {:?}",
                t.shape()
            ));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `x · w + bias` for `x: n×a`, `w: a×b`, `bias: [b]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (n, a) = self.matrix_dims(x, "affine input")?;
        let (wa, b) = self.matrix_dims(w, "affine weight")?;
        if a != wa {
            return shape_err(format!(
                "affine: input has {a} columns, weight has {wa} rows"
            ));
        }
        let mut out = vec![0.0; n * b];
        matmul_into(
            self.value(x).data(),
            self.value(w).data(),
            n,
            a,
            b,
            &mut out,
        );
        if let Some(bv) = bias {
            let bt = self.value(bv);
            if bt.len() != b {
                return shape_err(format!(
                    "affine: bias has {} values, expected {b}",
                    bt.len()
                ));
            }
            for row in out.chunks_mut(b.max(1)) {
                for (o, &bb) in row.iter_mut().zip(bt.data()) {
                    *o += bb;
                }
            }
        }
        if let Some(c) = self.counters.as_mut() {
            c.mac_ops += (n * a * b) as u64;
        }
        let value = Tensor::matrix(n, b, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("affine", value, Op::Affine { x, w, b: bias }, &inputs)
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.affine(x, w, None)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("activation", value, Op::Act { x, kind }, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        self.push("scale", value, Op::Scale { x, c }, &[x])
    }

    /// Elementwise product with a non-differentiable factor (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if t.len() != c.len() {
            return shape_err(format!(
                "mul_const: {} factors for {} values",
                c.len(),
                t.len()
            ));
        }
        let value = Tensor::new(t.shape().to_vec(), zip_map(t.data(), &c, |x, y| x * y))?;
        self.push("mul_const", value, Op::MulConst { x, c }, &[x])
    }

    /// Adds `b: [c]` to every row of `x: n×c`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c) = self.matrix_dims(x, "add_row_bias input")?;
        if self.value(b).len() != c {
            return shape_err(format!(
                "add_row_bias: bias has {} values, expected {c}",
                self.value(b).len()
            ));
        }
        let mut data = self.value(x).data().to_vec();
        let bd = self.value(b).data();
        for row in data.chunks_mut(c.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bd) {
                *o += bb;
            }
        }
        let value = Tensor::matrix(n, c, data)?;
        self.push("add_row_bias", value, Op::AddRowBias { x, b }, &[x, b])
    }

    /// Row gather: `out[e] = x[idx[e]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(x, "gather input")?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::Index(format!(
                    "gather: row {i} out of range for {n} rows"
                )));
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(idx.len(), c, data)?;
        self.push(
            "gather_rows",
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Per-segment reduction of the rows of `values: m×c`.
    ///
    /// Contributions are accumulated in ascending (segment, row) order. Empty
    /// segments produce zero rows for every reduction; max sends its gradient to
    /// the first maximal row.
    pub fn segment_reduce(
        &mut self,
        values: Var,
        segment_of: &[usize],
        num_segments: usize,
        red: Reduction,
    ) -> Result<Var> {
        let (m, c) = self.matrix_dims(values, "segment_reduce input")?;
        if segment_of.len() != m {
            return shape_err(format!(
                "segment_reduce: {} segment ids for {m} rows",
                segment_of.len()
            ));
        }
        if let Some(&bad) = segment_of.iter().find(|&&s| s >= num_segments) {
            return Err(Error::Index(format!(
                "segment_reduce: segment {bad} out of range for {num_segments} segments"
            )));
        }
        let order = canonical_order(segment_of, num_segments);
        let x = self.value(values).data();
        let mut out = vec![0.0; num_segments * c];
        let mut counts = vec![0usize; num_segments];
        let mut argmax = Vec::new();
        match red {
            Reduction::Sum | Reduction::Mean => {
                for &r in &order {
                    let s = segment_of[r];
                    counts[s] += 1;
                    let o = &mut out[s * c..(s + 1) * c];
                    for (ov, &xv) in o.iter_mut().zip(&x[r * c..(r + 1) * c]) {
                        *ov += xv;
                    }
                }
                if red == Reduction::Mean {
                    for (s, &k) in counts.iter().enumerate() {
                        if k > 0 {
                            for ov in &mut out[s * c..(s + 1) * c] {
                                *ov /= k as f64;
                            }
                        }
                    }
                }
            }
            Reduction::Max => {
                argmax = vec![usize::MAX; num_segments * c];
                for &r in &order {
                    let s = segment_of[r];
                    counts[s] += 1;
                    for j in 0..c {
                        let xv = x[r * c + j];
                        let slot = s * c + j;
                        if argmax[slot] == usize::MAX || xv > out[slot] {
                            out[slot] = xv;
                            argmax[slot] = r;
                        }
                    }
                }
            }
        }
        let value = Tensor::matrix(num_segments, c, out)?;
        self.push(
            "segment_reduce",
            value,
            Op::SegmentReduce {
                x: values,
                seg: segment_of.to_vec(),
                red,
                argmax,
                counts,
            },
            &[values],
        )
    }

    /// Softmax of `scores: m×1` within each segment, stabilised by the
    /// per-segment maximum.
    pub fn segment_softmax(
        &mut self,
        scores: Var,
        segment_of: &[usize],
        num_segments: usize,
    ) -> Result<Var> {
        let (m, c) = self.matrix_dims(scores, "segment_softmax input")?;
        if c != 1 || segment_of.len() != m {
            return shape_err(format!(
                "segment_softmax: expected {m}×1 scores with {m} segment ids, got {m}×{c} and {}",
                segment_of.len()
            ));
        }
        if let Some(&bad) = segment_of.iter().find(|&&s| s >= num_segments) {
            return Err(Error::Index(format!(
                "segment_softmax: segment {bad} out of range for {num_segments} segments"
            )));
        }
        let x = self.value(scores).data();
        let order = canonical_order(segment_of, num_segments);
        let mut seg_max = vec![f64::NEG_INFINITY; num_segments];
        for &r in &order {
            let s = segment_of[r];
            if x[r] > seg_max[s] {
                seg_max[s] = x[r];
            }
        }
        let mut out: Vec<f64> = (0..m)
            .map(|r| (x[r] - seg_max[segment_of[r]]).exp())
            .collect();
        let mut denom = vec![0.0; num_segments];
        for &r in &order {
            denom[segment_of[r]] += out[r];
        }
        for (r, o) in out.iter_mut().enumerate() {
            *o /= denom[segment_of[r]];
        }
        let value = Tensor::matrix(m, 1, out)?;
        self.push(
            "segment_softmax",
            value,
            Op::SegmentSoftmax {
                x: scores,
                seg: segment_of.to_vec(),
                num_segments,
            },
            &[scores],
        )
    }

    /// Per-row matrix-vector product: row `e` of `w: m×(out·in)` is read as an
    /// `out×in` matrix and applied to row `e` of `x: m×in`.
    pub fn edge_matvec(&mut self, w: Var, x: Var, out_dim: usize, in_dim: usize) -> Result<Var> {
        let (m, wc) = self.matrix_dims(w, "edge_matvec weights")?;
        let (mx, xc) = self.matrix_dims(x, "edge_matvec input")?;
        if m != mx || wc != out_dim * in_dim || xc != in_dim {
            return shape_err(format!(
                "edge_matvec: weights {m}×{wc}, inputs {mx}×{xc}, kernel {out_dim}×{in_dim}"
            ));
        }
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; m * out_dim];
        for e in 0..m {
            let xe = &xd[e * in_dim..(e + 1) * in_dim];
            let we = &wd[e * wc..(e + 1) * wc];
            for o in 0..out_dim {
                let wrow = &we[o * in_dim..(o + 1) * in_dim];
                let mut acc = 0.0;
                for (a, b) in wrow.iter().zip(xe) {
                    acc += a * b;
                }
                out[e * out_dim + o] = acc;
            }
        }
        if let Some(c) = self.counters.as_mut() {
            c.mac_ops += (m * out_dim * in_dim) as u64;
        }
        let value = Tensor::matrix(m, out_dim, out)?;
        self.push(
            "edge_matvec",
            value,
            Op::EdgeMatVec {
                w,
                x,
                out_dim,
                in_dim,
            },
            &[w, x],
        )
    }

    /// Scales row `e` of `x: m×c` by `s[e]` for `s: m×1`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, c) = self.matrix_dims(x, "scale_rows input")?;
        if self.value(s).shape() != [m, 1] {
            return shape_err(format!(
                "scale_rows: factors {:?}, expected [{m}, 1]",
                self.value(s).shape()
            ));
        }
        let sd = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (e, row) in data.chunks_mut(c.max(1)).enumerate().take(m) {
            for v in row {
                *v *= sd[e];
            }
        }
        let value = Tensor::matrix(m, c, data)?;
        self.push("scale_rows", value, Op::ScaleRows { x, s }, &[x, s])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.matrix_dims(a, "concat left")?;
        let (mb, q) = self.matrix_dims(b, "concat right")?;
        if m != mb {
            return shape_err(format!("concat_cols: {m} vs {mb} rows"));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(&ad[r * p..(r + 1) * p]);
            data.extend_from_slice(&bd[r * q..(r + 1) * q]);
        }
        let value = Tensor::matrix(m, p + q, data)?;
        self.push("concat_cols", value, Op::ConcatCols { a, b }, &[a, b])
    }

    /// Node-count weighted average `(n1·a + n2·b) / (n1 + n2)`.
    ///
    /// When one count is zero the other operand is returned unchanged, so the
    /// degenerate case is exact.
    pub fn aggregate(&mut self, a: Var, b: Var, n1: usize, n2: usize) -> Result<Var> {
        self.same_shape(a, b, "aggregate")?;
        if n1 + n2 == 0 {
            return Err(Error::Argument(
                "aggregate: n1 + n2 must be positive".into(),
            ));
        }
        if n2 == 0 {
            return Ok(a);
        }
        if n1 == 0 {
            return Ok(b);
        }
        let (f1, f2) = (n1 as f64, n2 as f64);
        let total = f1 + f2;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| {
            (f1 * x + f2 * y) / total
        });
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(
            "aggregate",
            value,
            Op::Aggregate {
                a,
                b,
                n1: f1,
                n2: f2,
            },
            &[a, b],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return shape_err("mean of an empty tensor");
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Mean softmax cross-entropy of `logits: B×C` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix_dims(logits, "logits")?;
        if targets.len() != b || b == 0 {
            return shape_err(format!(
                "cross entropy: {} targets for {b} rows",
                targets.len()
            ));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index(format!(
                    "target class {t} out of range for {c} logits"
                )));
            }
            let row = &x[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() - (row[t] - mx);
        }
        loss /= b as f64;
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return shape_err(format!(
                "mse: {} predictions, {} targets",
                p.len(),
                target.len()
            ));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let loss = s / p.len() as f64;
        self.push(
            "mse",
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        )
    }

    /// Propagates gradients from the scalar `loss` and returns the gradient of
    /// every differentiable leaf. Leaves with no path to the loss get zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let out = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    let shape = n.value.shape().to_vec();
                    Some(match g {
                        Some(d) => Tensor::new(shape, d).expect("gradient matches shape"),
                        None => Tensor::zeros(&shape),
                    })
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

/// Gradients of a loss with respect to the leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a differentiable leaf; `None` for constants and
    /// intermediate values.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Row indices sorted by (segment, row). A counting sort keeps it linear.
fn canonical_order(segment_of: &[usize], num_segments: usize) -> Vec<usize> {
    let mut start = vec![0usize; num_segments + 1];
    for &s in segment_of {
        start[s + 1] += 1;
    }
    for s in 0..num_segments {
        start[s + 1] += start[s];
    }
    let mut order = vec![0usize; segment_of.len()];
    for (r, &s) in segment_of.iter().enumerate() {
        order[start[s]] = r;
        start[s] += 1;
    }
    order
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let (n, a) = (val(*x).shape()[0], val(*x).shape()[1]);
            let bcols = val(*w).shape()[1];
            let wd = val(*w).data();
            let xd = val(*x).data();
            accumulate(grads, nodes, *x, |dx| {
                for r in 0..n {
                    let grow = &g[r * bcols..(r + 1) * bcols];
                    for k in 0..a {
                        let wrow = &wd[k * bcols..(k + 1) * bcols];
                        let mut acc = 0.0;
                        for (gv, wv) in grow.iter().zip(wrow) {
                            acc += gv * wv;
                        }
                        dx[r * a + k] += acc;
                    }
                }
            });
            accumulate(grads, nodes, *w, |dw| {
                for r in 0..n {
                    let grow = &g[r * bcols..(r + 1) * bcols];
                    for k in 0..a {
                        let xv = xd[r * a + k];
                        if xv == 0.0 {
                            continue;
                        }
                        for (d, gv) in dw[k * bcols..(k + 1) * bcols].iter_mut().zip(grow) {
                            *d += xv * gv;
                        }
                    }
                }
            });
            if let Some(b) = b {
                accumulate(grads, nodes, *b, |db| {
                    for grow in g.chunks(bcols.max(1)) {
                        for (d, gv) in db.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                });
            }
        }
        Op::Act { x, kind } => {
            let xd = val(*x).data();
            let yd = nodes[i].value.data();
            accumulate(grads, nodes, *x, |dx| {
                for k in 0..dx.len() {
                    dx[k] += g[k] * kind.derivative(xd[k], yd[k]);
                }
            });
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                accumulate(grads, nodes, *v, |d| {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv)
                });
            }
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            accumulate(grads, nodes, *a, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * bd[k];
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * ad[k];
                }
            });
        }
        Op::Scale { x, c } => {
            accumulate(grads, nodes, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * c)
            });
        }
        Op::MulConst { x, c } => {
            accumulate(grads, nodes, *x, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * c[k];
                }
            });
        }
        Op::AddRowBias { x, b } => {
            let c = val(*b).len();
            accumulate(grads, nodes, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv)
            });
            accumulate(grads, nodes, *b, |db| {
                for grow in g.chunks(c.max(1)) {
                    for (d, gv) in db.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
            });
        }
        Op::Gather { x, idx } => {
            let c = val(*x).cols();
            accumulate(grads, nodes, *x, |dx| {
                for (e, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += g[e * c + j];
                    }
                }
            });
        }
        Op::SegmentReduce {
            x,
            seg,
            red,
            argmax,
            counts,
        } => {
            let c = val(*x).cols();
            accumulate(grads, nodes, *x, |dx| match red {
                Reduction::Sum => {
                    for (r, &s) in seg.iter().enumerate() {
                        for j in 0..c {
                            dx[r * c + j] += g[s * c + j];
                        }
                    }
                }
                Reduction::Mean => {
                    for (r, &s) in seg.iter().enumerate() {
                        let k = counts[s] as f64;
                        for j in 0..c {
                            dx[r * c + j] += g[s * c + j] / k;
                        }
                    }
                }
                Reduction::Max => {
                    for (slot, &r) in argmax.iter().enumerate() {
                        if r != usize::MAX {
                            dx[r * c + slot % c] += g[slot];
                        }
                    }
                }
            });
        }
        Op::SegmentSoftmax {
            x,
            seg,
            num_segments,
        } => {
            let y = nodes[i].value.data();
            let mut dot = vec![0.0; *num_segments];
            for (r, &s) in seg.iter().enumerate() {
                dot[s] += g[r] * y[r];
            }
            accumulate(grads, nodes, *x, |dx| {
                for (r, &s) in seg.iter().enumerate() {
                    dx[r] += y[r] * (g[r] - dot[s]);
                }
            });
        }
        Op::EdgeMatVec {
            w,
            x,
            out_dim,
            in_dim,
        } => {
            let (od, id) = (*out_dim, *in_dim);
            let wd = val(*w).data();
            let xd = val(*x).data();
            let m = val(*x).rows();
            accumulate(grads, nodes, *w, |dw| {
                for e in 0..m {
                    let xe = &xd[e * id..(e + 1) * id];
                    for o in 0..od {
                        let gv = g[e * od + o];
                        if gv == 0.0 {
                            continue;
                        }
                        let base = e * od * id + o * id;
                        for (d, xv) in dw[base..base + id].iter_mut().zip(xe) {
                            *d += gv * xv;
                        }
                    }
                }
            });
            accumulate(grads, nodes, *x, |dx| {
                for e in 0..m {
                    for o in 0..od {
                        let gv = g[e * od + o];
                        if gv == 0.0 {
                            continue;
                        }
                        let base = e * od * id + o * id;
                        for (d, wv) in dx[e * id..(e + 1) * id]
                            .iter_mut()
                            .zip(&wd[base..base + id])
                        {
                            *d += gv * wv;
                        }
                    }
                }
            });
        }
        Op::ScaleRows { x, s } => {
            let c = val(*x).cols();
            let (xd, sd) = (val(*x).data(), val(*s).data());
            accumulate(grads, nodes, *x, |dx| {
                for k in 0..dx.len() {
                    dx[k] += g[k] * sd[k / c];
                }
            });
            accumulate(grads, nodes, *s, |ds| {
                for k in 0..xd.len() {
                    ds[k / c] += g[k] * xd[k];
                }
            });
        }
        Op::ConcatCols { a, b } => {
            let (p, q) = (val(*a).cols(), val(*b).cols());
            let m = val(*a).rows();
            accumulate(grads, nodes, *a, |d| {
                for r in 0..m {
                    for j in 0..p {
                        d[r * p + j] += g[r * (p + q) + j];
                    }
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for r in 0..m {
                    for j in 0..q {
                        d[r * q + j] += g[r * (p + q) + p + j];
                    }
                }
            });
        }
        Op::Aggregate { a, b, n1, n2 } => {
            let total = n1 + n2;
            accumulate(grads, nodes, *a, |d| {
                d.iter_mut()
                    .zip(g)
                    .for_each(|(d, gv)| *d += gv * n1 / total)
            });
            accumulate(grads, nodes, *b, |d| {
                d.iter_mut()
                    .zip(g)
                    .for_each(|(d, gv)| *d += gv * n2 / total)
            });
        }
        Op::Sum { x } => {
            accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean { x } => {
            let n = val(*x).len() as f64;
            accumulate(grads, nodes, *x, |d| {
                d.iter_mut().for_each(|d| *d += g[0] / n)
            });
        }
        Op::Reshape { x } => {
            accumulate(grads, nodes, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv)
            });
        }
        Op::SoftmaxXent {
            logits,
            targets,
            probs,
        } => {
            let c = val(*logits).cols();
            let b = targets.len() as f64;
            accumulate(grads, nodes, *logits, |d| {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let ind = if j == t { 1.0 } else { 0.0 };
                        d[r * c + j] += g[0] * (probs[r * c + j] - ind) / b;
                    }
                }
            });
        }
        Op::Mse { pred, target } => {
            let p = val(*pred).data();
            let n = p.len() as f64;
            accumulate(grads, nodes, *pred, |d| {
                for k in 0..d.len() {
                    d[k] += g[0] * 2.0 * (p[k] - target[k]) / n;
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0]]));
        let w = t.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.affine(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);

        let x = t.constant(m(&[&[1.0, 1.0]]));
        let w = t.constant(m(&[&[2.0], &[3.0]]));
        let b = t.constant(Tensor::vector(vec![1.0]));
        let y = t.affine(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[6.0]);

        let x = t.constant(m(&[&[0.0, 0.0]]));
        let w = t.constant(m(&[&[0.3], &[-7.0]]));
        let b = t.constant(Tensor::vector(vec![5.0]));
        let y = t.affine(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[5.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0, 3.0]]));
        let w = t.constant(m(&[&[1.0], &[1.0]]));
        assert!(matches!(t.affine(x, w, None), Err(Error::Shape(_))));
    }

    #[test]
    fn segment_reduce_examples() {
        let mut t = Tape::new();
        let v = t.constant(m(&[&[1.0], &[2.0], &[3.0]]));
        let s = t.segment_reduce(v, &[0, 0, 1], 2, Reduction::Sum).unwrap();
        assert_eq!(t.value(s).data(), &[3.0, 3.0]);
        let s = t.segment_reduce(v, &[0, 0, 1], 2, Reduction::Max).unwrap();
        assert_eq!(t.value(s).data(), &[2.0, 3.0]);
        let s = t.segment_reduce(v, &[0, 0, 1], 3, Reduction::Mean).unwrap();
        assert_eq!(t.value(s).data(), &[1.5, 3.0, 0.0]);
        let s = t.segment_reduce(v, &[0, 0, 1], 3, Reduction::Max).unwrap();
        assert_eq!(t.value(s).data()[2], 0.0);
        assert!(matches!(
            t.segment_reduce(v, &[0, 0, 5], 2, Reduction::Sum),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn max_ties_route_to_first() {
        let mut t = Tape::new();
        let v = t.param(m(&[&[4.0], &[4.0], &[1.0]]));
        let s = t.segment_reduce(v, &[0, 0, 0], 1, Reduction::Max).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn segment_softmax_examples() {
        let mut t = Tape::new();
        let s = t.constant(m(&[&[0.0], &[0.0]]));
        let a = t.segment_softmax(s, &[0, 0], 1).unwrap();
        assert_eq!(t.value(a).data(), &[0.5, 0.5]);
        let s = t.constant(m(&[&[17.3]]));
        let a = t.segment_softmax(s, &[0], 1).unwrap();
        assert_eq!(t.value(a).data(), &[1.0]);
        let s = t.constant(m(&[&[1f64.ln()], &[3f64.ln()]]));
        let a = t.segment_softmax(s, &[0, 0], 1).unwrap();
        let d = t.value(a).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let l = t.sum(w).unwrap();
        assert_eq!(
            t.backward(l).unwrap().get(w).unwrap().data(),
            &[1.0, 1.0, 1.0]
        );

        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![2.0, -1.0]));
        let sq = t.mul(w, w).unwrap();
        let l = t.sum(sq).unwrap();
        assert_eq!(t.backward(l).unwrap().get(w).unwrap().data(), &[4.0, -2.0]);

        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![2.0, -1.0]));
        let other = t.param(Tensor::vector(vec![1.0]));
        let l = t.sum(other).unwrap();
        assert_eq!(t.backward(l).unwrap().get(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![2.0, -1.0]));
        let y = t.scale(w, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_is_reported() {
        let mut t = Tape::new();
        let w = t.constant(Tensor::vector(vec![f64::MAX]));
        assert!(matches!(
            t.scale(w, 10.0),
            Err(Error::NonFinite { op: "scale", .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::matrix(1, 10, vec![0.3; 10]).unwrap());
        let l = t.softmax_cross_entropy(z, &[4]).unwrap();
        assert!((t.value(l).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aggregate_degenerate_returns_operand() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[0.1, 0.7]]));
        let b = t.constant(m(&[&[9.0, 9.0]]));
        assert_eq!(t.aggregate(a, b, 3, 0).unwrap(), a);
        assert_eq!(t.aggregate(a, b, 0, 2).unwrap(), b);
        assert!(t.aggregate(a, b, 0, 0).is_err());
        let y = t.aggregate(a, b, 2, 6).unwrap();
        assert_eq!(
            t.value(y).data(),
            &[(2.0 * 0.1 + 6.0 * 9.0) / 8.0, (2.0 * 0.7 + 54.0) / 8.0]
        );
    }
}
