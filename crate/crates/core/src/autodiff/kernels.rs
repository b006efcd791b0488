//! Raw loops behind the differentiable ops. Everything here works on flat
//! row-major slices; shape validation happens in the graph layer.

use crate::real::{gemm, Mat, Real};

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
    fn in_pixels(&self) -> usize {
        self.h * self.w
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let opix = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * opix..(row + 1) * opix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
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

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let opix = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut gx[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * opix..(row + 1) * opix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let (patch, opix) = (g.patch(), g.out_pixels());
    let mut out = vec![T::zero(); g.batch * g.cout * opix];
    let mut cols = vec![T::zero(); if is_pointwise(g) { 0 } else { patch * opix }];
    let xin = g.cin * g.in_pixels();
    for b in 0..g.batch {
        let xb = &x[b * xin..(b + 1) * xin];
        let cols_ref: &[T] = if is_pointwise(g) {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        gemm(
            Mat::new(k, g.cout, patch),
            Mat::new(cols_ref, patch, opix),
            &mut out[b * g.cout * opix..(b + 1) * g.cout * opix],
            false,
        );
    }
    out
}

/// Returns `(grad_input, grad_kernel)`, each only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    k: &[T],
    gy: &[T],
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (patch, opix) = (g.patch(), g.out_pixels());
    let xin = g.cin * g.in_pixels();
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gk = need_k.then(|| vec![T::zero(); k.len()]);
    let pointwise = is_pointwise(g);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { patch * opix }];
    let mut dcols = vec![
        T::zero();
        if pointwise || !need_x {
            0
        } else {
            patch * opix
        }
    ];
    for b in 0..g.batch {
        let gyb = &gy[b * g.cout * opix..(b + 1) * g.cout * opix];
        if let Some(gk) = gk.as_mut() {
            let xb = &x[b * xin..(b + 1) * xin];
            let cols_ref: &[T] = if pointwise {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            gemm(
                Mat::new(gyb, g.cout, opix),
                Mat::new(cols_ref, patch, opix).t(),
                gk,
                true,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[b * xin..(b + 1) * xin];
            if pointwise {
                gemm(
                    Mat::new(k, g.cout, patch).t(),
                    Mat::new(gyb, g.cout, opix),
                    gxb,
                    true,
                );
            } else {
                gemm(
                    Mat::new(k, g.cout, patch).t(),
                    Mat::new(gyb, g.cout, opix),
                    &mut dcols,
                    false,
                );
                col2im_add(g, &dcols, gxb);
            }
        }
    }
    (gx, gk)
}

/// Per-sample group normalisation over `[B, C, S]` (S = spatial size).
/// Returns `(y, xhat, inv_std)`; `inv_std` has one entry per (sample, group).
pub(crate) fn group_norm_forward<T: Real>(
    x: &[T],
    (batch, channels, spatial): (usize, usize, usize),
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let per_group = channels / groups;
    let m = per_group * spatial;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); batch * groups];
    let eps = T::lit(NORM_EPS);
    let inv_m = T::one() / T::lit(m as f64);
    for b in 0..batch {
        for gi in 0..groups {
            let start = (b * channels + gi * per_group) * spatial;
            let seg = &x[start..start + m];
            let mean = seg.iter().copied().sum::<T>() * inv_m;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[b * groups + gi] = istd;
            for c in 0..per_group {
                let ch = gi * per_group + c;
                let (gm, bt) = (gamma[ch], beta[ch]);
                for s in 0..spatial {
                    let idx = start + c * spatial + s;
                    let xh = (x[idx] - mean) * istd;
                    xhat[idx] = xh;
                    y[idx] = gm * xh + bt;
                }
            }
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(gx, ggamma, gbeta)`.
pub(crate) fn group_norm_backward<T: Real>(
    gy: &[T],
    xhat: &[T],
    inv_std: &[T],
    (batch, channels, spatial): (usize, usize, usize),
    groups: usize,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let per_group = channels / groups;
    let m = per_group * spatial;
    let mut gx = vec![T::zero(); gy.len()];
    let mut ggamma = vec![T::zero(); channels];
    let mut gbeta = vec![T::zero(); channels];
    let inv_m = T::one() / T::lit(m as f64);
    for b in 0..batch {
        for gi in 0..groups {
            let start = (b * channels + gi * per_group) * spatial;
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for c in 0..per_group {
                let ch = gi * per_group + c;
                for s in 0..spatial {
                    let idx = start + c * spatial + s;
                    ggamma[ch] += gy[idx] * xhat[idx];
                    gbeta[ch] += gy[idx];
                    let dxh = gy[idx] * gamma[ch];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[idx];
                }
            }
            let istd = inv_std[b * groups + gi];
            for c in 0..per_group {
                let ch = gi * per_group + c;
                for s in 0..spatial {
                    let idx = start + c * spatial + s;
                    let dxh = gy[idx] * gamma[ch];
                    gx[idx] = istd * (dxh - (sum_dxh + xhat[idx] * sum_dxh_xh) * inv_m);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Row-wise stabilised log-softmax of a `rows x cols` matrix.
pub(crate) fn log_softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = src.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}
