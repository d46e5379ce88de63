use rand::seq::index::sample;

use super::{rng_from_seed, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Largest relative disagreement between the tape gradient of the scalar
/// function `f` at `x` and a central finite difference.
///
/// The error of one coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        &opts,
    )
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], track: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), track)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !track {
            return Ok((value, None));
        }
        let grads = tape.backward(out)?;
        let g = vars
            .iter()
            .map(|&v| grads.get(v).cloned().expect("leaf gradient"))
            .collect();
        Ok((value, Some(g)))
    };

    let (_, analytic) = eval(inputs, true)?;
    let analytic = analytic.expect("tracked");
    let mut rng = rng_from_seed(opts.seed);
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (t, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = input.data()[c];
            probe[t].data_mut()[c] = orig + opts.eps;
            let (plus, _) = eval(&probe, false)?;
            probe[t].data_mut()[c] = orig - opts.eps;
            let (minus, _) = eval(&probe, false)?;
            probe[t].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[t].data()[c];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;
    use rand::Rng;

    #[test]
    fn linear_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = grad_check(|t, x| t.sum(x), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn tanh_seed0() {
        let mut rng = rng_from_seed(0);
        let x =
            Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let err = grad_check(
            |t, x| {
                let y = t.activation(x, Activation::Tanh)?;
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_tape_op_differentiates() {
        let mut rng = rng_from_seed(3);
        let mut r =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let inputs = vec![
            Tensor::matrix(4, 3, r(12)).unwrap(),
            Tensor::matrix(3, 2, r(6)).unwrap(),
            Tensor::vector(r(2)),
            Tensor::matrix(4, 6, r(24)).unwrap(),
        ];
        let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let h = t.affine(v[0], v[1], Some(v[2]))?;
            let h = t.activation(h, Activation::Tanh)?;
            let w = t.gather_rows(v[3], &[0, 1, 2, 3, 1])?;
            let hx = t.gather_rows(h, &[0, 1, 2, 3, 0])?;
            let hx3 = t.concat_cols(hx, hx)?;
            let hx3 = t.reshape(hx3, vec![5, 4])?;
            let w8 = t.concat_cols(w, w)?;
            let w8 = t.reshape(w8, vec![5, 12])?;
            let msg = t.edge_matvec(w8, hx3, 3, 4)?;
            let s = t.gather_rows(v[0], &[0, 1, 2, 3, 0])?;
            let s = t.affine(s, v[1], None)?;
            let score = t.reshape(s, vec![10, 1])?;
            let seg = [0, 0, 1, 1, 1, 2, 2, 3, 3, 3];
            let a = t.segment_softmax(score, &seg, 4)?;
            let a = t.reshape(a, vec![5, 2])?;
            let a0 = t.gather_rows(a, &[0, 1, 2, 3, 4])?;
            let aa = t.mul(a0, a0)?;
            let aa = t.reshape(aa, vec![10, 1])?;
            let aa = t.segment_reduce(aa, &seg, 4, crate::Reduction::Sum)?;
            let aa = t.reshape(aa, vec![4, 1])?;
            let m2 = t.reshape(msg, vec![15, 1])?;
            let m2 = t.segment_reduce(
                m2,
                &[0, 1, 2, 0, 1, 2, 3, 3, 2, 1, 0, 0, 1, 2, 3],
                4,
                crate::Reduction::Mean,
            )?;
            let m3 = t.scale_rows(m2, aa)?;
            let m4 = t.aggregate(m3, m2, 2, 5)?;
            let m5 = t.add(m4, m3)?;
            let m6 = t.scale(m5, 0.7)?;
            let m6 = t.mul_const(m6, vec![1.0, 2.0, 0.0, 0.5])?;
            let m7 = t.reshape(m6, vec![1, 4])?;
            let l1 = t.softmax_cross_entropy(m7, &[2])?;
            let l2 = t.mse(m6, &[0.1, 0.2, 0.3, 0.4])?;
            let l3 = t.mean(h)?;
            let s = t.add(l1, l2)?;
            t.add(s, l3)
        };
        let err = grad_check_many(f, &inputs, &GradCheckOptions::default()).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
