use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Saved statistics for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn forward<T: Scalar>(
    x: &[T],
    dims: [usize; 4],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Vec<T>, NormCache<T>)> {
    let [b, c, h, w] = dims;
    let n = h * w;
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "instance norm over a {h}×{w} plane has no spread"
        )));
    }
    let nf = T::from_usize(n).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(b * c);
    for plane in 0..b * c {
        let ch = plane % c;
        let src = &x[plane * n..(plane + 1) * n];
        let mean = src.iter().copied().sum::<T>() / nf;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = &mut xhat[plane * n..(plane + 1) * n];
        let out = &mut y[plane * n..(plane + 1) * n];
        for i in 0..n {
            xh[i] = (src[i] - mean) * is;
            out[i] = gamma[ch] * xh[i] + beta[ch];
        }
    }
    Ok((y, NormCache { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn backward<T: Scalar>(
    dy: &[T],
    dims: [usize; 4],
    gamma: &[T],
    cache: &NormCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [b, c, h, w] = dims;
    let n = h * w;
    let nf = T::from_usize(n).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for plane in 0..b * c {
        let ch = plane % c;
        let g = &dy[plane * n..(plane + 1) * n];
        let xh = &cache.xhat[plane * n..(plane + 1) * n];
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for i in 0..n {
            dgamma[ch] += g[i] * xh[i];
            dbeta[ch] += g[i];
            let dxh = g[i] * gamma[ch];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[i];
        }
        let scale = cache.inv_std[plane] / nf;
        let out = &mut dx[plane * n..(plane + 1) * n];
        for i in 0..n {
            let dxh = g[i] * gamma[ch];
            out[i] = scale * (nf * dxh - sum_dxh - xh[i] * sum_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}
