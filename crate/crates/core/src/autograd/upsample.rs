//! Bilinear upsampling with half-pixel centers:
//! `src = (dst + 0.5) / scale − 0.5`, clamped to the valid pixel range.

use crate::tensor::Scalar;

/// Interpolation taps for one axis: `(lo, hi, weight_lo, weight_hi)` per output index.
pub(crate) fn axis_taps(input: usize, scale: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..input * scale)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) fn forward<T: Scalar>(x: &[T], dims: [usize; 4], scale: usize) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (ho, wo) = (h * scale, w * scale);
    let ty = axis_taps(h, scale);
    let tx = axis_taps(w, scale);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                dst[oy * wo + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub(crate) fn backward<T: Scalar>(dy: &[T], dims: [usize; 4], scale: usize) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (ho, wo) = (h * scale, w * scale);
    let ty = axis_taps(h, scale);
    let tx = axis_taps(w, scale);
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let g = &dy[plane * ho * wo..(plane + 1) * ho * wo];
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                let v = g[oy * wo + ox];
                d[y0 * w + x0] += wy0 * wx0 * v;
                d[y0 * w + x1] += wy0 * wx1 * v;
                d[y1 * w + x0] += wy1 * wx0 * v;
                d[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    dx
}
