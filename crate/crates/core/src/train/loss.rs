//! Soft Dice loss with the squared (V-Net) denominator:
//! `1 − (2·Σp·g + ε) / (Σp² + Σg² + ε)` per sample, averaged over the batch.
//! Use it through [`Tape::dice_loss`](crate::autograd::Tape::dice_loss).

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub(crate) struct DiceStats<T> {
    numerator: T,
    denominator: T,
    batch: usize,
}

pub(crate) fn dice_forward<T: Scalar>(
    prob: &[T],
    target: &[T],
    batch: usize,
) -> Result<(T, Vec<DiceStats<T>>)> {
    if target.iter().any(|&g| g != T::zero() && g != T::one()) {
        return Err(Error::Value("dice target must be binary (0 or 1)".into()));
    }
    let eps = T::from_f64_lossy(DICE_EPS);
    let two = T::from_f64_lossy(2.0);
    let per = prob.len() / batch;
    let mut stats = Vec::with_capacity(batch);
    let mut total = T::zero();
    for b in 0..batch {
        let p = &prob[b * per..(b + 1) * per];
        let g = &target[b * per..(b + 1) * per];
        let (mut pg, mut pp, mut gg) = (T::zero(), T::zero(), T::zero());
        for (&pi, &gi) in p.iter().zip(g) {
            pg += pi * gi;
            pp += pi * pi;
            gg += gi * gi;
        }
        let numerator = two * pg + eps;
        let denominator = pp + gg + eps;
        total += T::one() - numerator / denominator;
        stats.push(DiceStats {
            numerator,
            denominator,
            batch,
        });
    }
    Ok((total / T::from_usize(batch).unwrap(), stats))
}

pub(crate) fn dice_backward<T: Scalar>(prob: &[T], target: &[T], stats: &[DiceStats<T>]) -> Vec<T> {
    let two = T::from_f64_lossy(2.0);
    let per = prob.len() / stats.len();
    let mut grad = Vec::with_capacity(prob.len());
    for (b, s) in stats.iter().enumerate() {
        let scale = T::one() / (T::from_usize(s.batch).unwrap() * s.denominator * s.denominator);
        for i in b * per..(b + 1) * per {
            // d/dp of −N/D = −(2g·D − N·2p) / D²
            grad.push(-(two * target[i] * s.denominator - s.numerator * two * prob[i]) * scale);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct scalar evaluation of the formula, independent of the batched kernel.
    fn dice_oracle(p: &[f64], g: &[f64]) -> f64 {
        let pg: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let pp: f64 = p.iter().map(|a| a * a).sum();
        let gg: f64 = g.iter().map(|a| a * a).sum();
        1.0 - (2.0 * pg + DICE_EPS) / (pp + gg + DICE_EPS)
    }

    #[test]
    fn half_frame_at_half_probability() {
        let p = [0.5; 4];
        let g = [1.0, 1.0, 0.0, 0.0];
        let (loss, _) = dice_forward(&p, &g, 1).unwrap();
        assert!((loss - dice_oracle(&p, &g)).abs() < 1e-15);
        assert!((loss - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn perfect_and_disjoint_overlap() {
        let g = [1.0f64, 0.0, 1.0, 0.0];
        let (perfect, _) = dice_forward(&g, &g, 1).unwrap();
        assert!(perfect.abs() < 1e-5);
        let p = [0.0f64, 1.0, 0.0, 1.0];
        let (disjoint, _) = dice_forward(&p, &g, 1).unwrap();
        assert!((disjoint - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_non_binary_target() {
        assert!(dice_forward(&[0.5f32; 2], &[0.5, 1.0], 1).is_err());
    }

    #[test]
    fn averages_over_batch() {
        let p = [0.2, 0.9, 0.4, 0.1, 0.7, 0.3];
        let g = [0.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        let (loss, _) = dice_forward(&p, &g, 2).unwrap();
        let expect = 0.5 * (dice_oracle(&p[..3], &g[..3]) + dice_oracle(&p[3..], &g[3..]));
        assert!((loss - expect).abs() < 1e-15);
    }
}
