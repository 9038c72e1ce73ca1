use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// 2×2 / stride-2 max pooling. Returns the pooled values and, per output,
/// the flat input index that won (first in row-major order on ties).
pub(crate) fn maxpool2x2<T: Scalar>(x: &[T], dims: [usize; 4]) -> Result<(Vec<T>, Vec<usize>)> {
    let [b, c, h, w] = dims;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2d needs even spatial extents, got {h}×{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((out, arg))
}

pub(crate) fn maxpool2x2_backward<T: Scalar>(dy: &[T], argmax: &[usize], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (&g, &idx) in dy.iter().zip(argmax) {
        dx[idx] += g;
    }
    dx
}
