//! Grouped, strided, dilated 2-D cross-correlation via im2col + GEMM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Geometry of one convolution. `groups == in_channels` makes it depthwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Square `k×k` kernel, stride 1, dilation 1, "same" zero padding.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            padding: ((k - 1) / 2, (k - 1) / 2),
            dilation: 1,
            groups: 1,
        }
    }

    /// Sets the dilation and re-derives same padding `d·(k−1)/2`.
    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = (
            dilation * (self.kernel.0 - 1) / 2,
            dilation * (self.kernel.1 - 1) / 2,
        );
        self
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.groups = self.in_channels;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = (padding, padding);
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn weight_numel(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Side length of the input patch one output unit sees.
    pub fn effective_extent(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel.0 - 1) + 1,
            self.dilation * (self.kernel.1 - 1) + 1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConvSpec(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return bad(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 || self.dilation == 0 {
            return bad("kernel, stride and dilation must be positive".into());
        }
        Ok(())
    }

    /// Output spatial extent for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (eh, ew) = self.effective_extent();
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if eh > ph || ew > pw {
            return Err(Error::ConvSpec(format!(
                "effective kernel {eh}×{ew} exceeds padded input {ph}×{pw}"
            )));
        }
        Ok(((ph - eh) / self.stride + 1, (pw - ew) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == (0, 0)
    }
}

/// Shapes resolved for one call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub spec: ConvSpec,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.spec.in_channels / self.spec.groups
    }
    fn cout_g(&self) -> usize {
        self.spec.out_channels / self.spec.groups
    }
    fn k_rows(&self) -> usize {
        self.cin_g() * self.spec.kernel.0 * self.spec.kernel.1
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn in_plane(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds the `cin_g` channels starting at `x` into `[cin_g·kh·kw, ho·wo]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let s = &g.spec;
    let (kh, kw) = s.kernel;
    let n = g.out_plane();
    for c in 0..g.cin_g() {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * s.stride + ki * s.dilation) as isize - s.padding.0 as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kj * s.dilation) as isize - s.padding.1 as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input planes.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let s = &g.spec;
    let (kh, kw) = s.kernel;
    let n = g.out_plane();
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * s.stride + ki * s.dilation) as isize - s.padding.0 as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * s.stride + kj * s.dilation) as isize - s.padding.1 as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let cin = g.spec.in_channels;
    let cout = g.spec.out_channels;
    let (cin_g, cout_g, k_rows, n) = (g.cin_g(), g.cout_g(), g.k_rows(), g.out_plane());
    let mut out = vec![T::zero(); g.batch * cout * n];
    out.par_chunks_mut(cout * n)
        .enumerate()
        .for_each(|(b, out_b)| {
            let x_b = &x[b * cin * g.in_plane()..(b + 1) * cin * g.in_plane()];
            let mut cols = if g.spec.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); k_rows * n]
            };
            for grp in 0..g.spec.groups {
                let x_g = &x_b[grp * cin_g * g.in_plane()..(grp + 1) * cin_g * g.in_plane()];
                let cols_ref: &[T] = if g.spec.is_pointwise() {
                    x_g
                } else {
                    im2col(x_g, g, &mut cols);
                    &cols
                };
                let w_g = &weight[grp * cout_g * k_rows..(grp + 1) * cout_g * k_rows];
                let o_g = &mut out_b[grp * cout_g * n..(grp + 1) * cout_g * n];
                T::gemm(
                    cout_g,
                    k_rows,
                    n,
                    T::one(),
                    w_g,
                    k_rows as isize,
                    1,
                    cols_ref,
                    n as isize,
                    1,
                    T::zero(),
                    o_g,
                    n as isize,
                    1,
                );
            }
            if let Some(bias) = bias {
                for (co, plane) in out_b.chunks_mut(n).enumerate() {
                    let bv = bias[co];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let cin = g.spec.in_channels;
    let cout = g.spec.out_channels;
    let (cin_g, cout_g, k_rows, n) = (g.cin_g(), g.cout_g(), g.k_rows(), g.out_plane());
    let in_len = cin * g.in_plane();
    let w_len = weight.len();

    // Each sample is independent; per-sample weight gradients are reduced
    // afterwards in batch order so results do not depend on thread count.
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let x_b = &x[b * in_len..(b + 1) * in_len];
            let dy_b = &dy[b * cout * n..(b + 1) * cout * n];
            let mut dx_b = if need_dx { vec![T::zero(); in_len] } else { Vec::new() };
            let mut dw_b = if need_dw { vec![T::zero(); w_len] } else { Vec::new() };
            let mut cols = vec![T::zero(); k_rows * n];
            for grp in 0..g.spec.groups {
                let dy_g = &dy_b[grp * cout_g * n..(grp + 1) * cout_g * n];
                let w_g = &weight[grp * cout_g * k_rows..(grp + 1) * cout_g * k_rows];
                let x_g = &x_b[grp * cin_g * g.in_plane()..(grp + 1) * cin_g * g.in_plane()];
                if need_dw {
                    let cols_ref: &[T] = if g.spec.is_pointwise() {
                        x_g
                    } else {
                        im2col(x_g, g, &mut cols);
                        &cols
                    };
                    // dW_g[cout_g, K] = dY_g[cout_g, N] · cols[K, N]^T
                    T::gemm(
                        cout_g,
                        n,
                        k_rows,
                        T::one(),
                        dy_g,
                        n as isize,
                        1,
                        cols_ref,
                        1,
                        n as isize,
                        T::zero(),
                        &mut dw_b[grp * cout_g * k_rows..(grp + 1) * cout_g * k_rows],
                        k_rows as isize,
                        1,
                    );
                }
                if need_dx {
                    let dx_g = &mut dx_b
                        [grp * cin_g * g.in_plane()..(grp + 1) * cin_g * g.in_plane()];
                    if g.spec.is_pointwise() {
                        // dX_g[cin_g, N] = W_g^T · dY_g
                        T::gemm(
                            k_rows,
                            cout_g,
                            n,
                            T::one(),
                            w_g,
                            1,
                            k_rows as isize,
                            dy_g,
                            n as isize,
                            1,
                            T::zero(),
                            dx_g,
                            n as isize,
                            1,
                        );
                    } else {
                        T::gemm(
                            k_rows,
                            cout_g,
                            n,
                            T::one(),
                            w_g,
                            1,
                            k_rows as isize,
                            dy_g,
                            n as isize,
                            1,
                            T::zero(),
                            &mut cols,
                            n as isize,
                            1,
                        );
                        col2im(&cols, g, dx_g);
                    }
                }
            }
            (dx_b, dw_b)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(g.batch * in_len);
        for (dx_b, _) in &per_sample {
            dx.extend_from_slice(dx_b);
        }
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); w_len];
        for (_, dw_b) in &per_sample {
            dw.iter_mut().zip(dw_b).for_each(|(a, &v)| *a += v);
        }
        dw
    });
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); cout];
        for b in 0..g.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                let plane = &dy[(b * cout + co) * n..(b * cout + co + 1) * n];
                *acc += plane.iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

pub(crate) fn geometry(
    input_shape: &[usize],
    weight_shape: &[usize],
    bias_shape: Option<&[usize]>,
    spec: &ConvSpec,
) -> Result<ConvGeom> {
    spec.validate()?;
    let [b, c, h, w] = match input_shape {
        &[b, c, h, w] => [b, c, h, w],
        s => return Err(Error::Shape(format!("conv2d input must be 4-D, got {s:?}"))),
    };
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv2d input has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    if weight_shape != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "conv2d weight shape {weight_shape:?}, spec expects {:?}",
            spec.weight_shape()
        )));
    }
    if let Some(bs) = bias_shape {
        if bs != [spec.out_channels] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {bs:?}, expected [{}]",
                spec.out_channels
            )));
        }
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    Ok(ConvGeom {
        spec: *spec,
        batch: b,
        h,
        w,
        ho,
        wo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_keeps_extent() {
        for d in [1, 2, 6, 9, 12] {
            let s = ConvSpec::same(3, 4, 3).dilated(d);
            assert_eq!(s.output_hw(16, 16).unwrap(), (16, 16));
            assert_eq!(s.strided(2).output_hw(16, 16).unwrap(), (8, 8));
        }
    }

    #[test]
    fn rejects_bad_groups_and_oversized_kernels() {
        let mut s = ConvSpec::same(6, 4, 3);
        s.groups = 4;
        assert!(matches!(s.validate(), Err(Error::ConvSpec(_))));
        let s = ConvSpec::same(1, 1, 3).dilated(4).with_padding(0);
        assert!(matches!(s.output_hw(5, 5), Err(Error::ConvSpec(_))));
        assert_eq!(s.output_hw(9, 9).unwrap(), (1, 1));
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let spec = ConvSpec::same(2, 2, 3).dilated(2).strided(2);
        let g = geometry(&[1, 2, 7, 6], &spec.weight_shape(), None, &spec).unwrap();
        let x: Vec<f64> = (0..2 * 7 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let mut cols = vec![0.0; g.k_rows() * g.out_plane()];
        im2col(&x[..g.cin_g() * 42], &g, &mut cols);
        let c: Vec<f64> = (0..cols.len()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut back = vec![0.0; g.cin_g() * 42];
        col2im(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x[..back.len()].iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
