use rand::Rng;

use crate::tensor::{Scalar, Tensor};
use crate::train::data::Sample;

/// Mirrors the last axis of a `[.., W]` tensor.
pub fn hflip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let w = *t.shape().last().expect("tensor has at least one axis");
    let mut out = t.clone();
    if w > 0 {
        for row in out.data_mut().chunks_exact_mut(w) {
            row.reverse();
        }
    }
    out
}

/// Flips image and mask together with probability `p`.
///
/// Exactly one draw is taken from `rng` regardless of `p`, so the stream stays
/// aligned across configurations.
pub fn augment_hflip<T: Scalar, R: Rng + ?Sized>(sample: &Sample<T>, p: f64, rng: &mut R) -> Sample<T> {
    let u: f64 = rng.gen();
    if u < p {
        Sample {
            id: sample.id.clone(),
            image: hflip(&sample.image),
            mask: hflip(&sample.mask),
        }
    } else {
        sample.clone()
    }
}
