//! Central finite-difference verification of tape gradients (double precision).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub pass: bool,
}

/// Which coordinates to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many coordinates per input, chosen with a fixed seed.
    Sample { per_input: usize, seed: u64 },
}

/// Checks `f` (scalar-valued, built on a fresh tape from the given leaves)
/// against `(f(x+eps) − f(x−eps)) / (2·eps)` on every input coordinate.
///
/// The relative error is `|a − n| / max(|a|, |n|, eps)`: gradients smaller
/// than `eps` sit below the resolution of the central difference and are
/// judged by an absolute error of `tol · eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, eps, tol, Coverage::All)
}

pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
        pass: true,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        let n = inputs[i].numel();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample { per_input, seed } if per_input < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
                let mut idx = sample(&mut rng, n, per_input).into_vec();
                idx.sort_unstable();
                idx
            }
            Coverage::Sample { .. } => (0..n).collect(),
        };
        for j in coords {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(eps);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = rel;
                report.worst = Some((i, j));
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_matches_polynomial_gradient() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly zero: analytic says 0, central difference says 0.5.
        let x = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let report = grad_check(|t, v| Ok({ let r = t.relu(v[0]); t.sum(r) }), &[x], 1e-5, 1e-4).unwrap();
        assert!(!report.pass);
    }
}
