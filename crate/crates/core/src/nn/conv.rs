//! Convolution, batch norm and pooling on channel-major (`C×N×H×W`) feature maps.
//!
//! Channel-major layout lets a whole batch go through one im2col + GEMM, and makes
//! each channel's batch-norm statistics a contiguous slice.

use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{ensure, KtError, Result};

/// Geometry of a square-kernel 2-D convolution over a `cin×n×h×w` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.stride >= 1,
            KtError::Invalid("convolution stride must be >= 1".into())
        );
        ensure!(
            self.h + 2 * self.pad >= self.k && self.w + 2 * self.pad >= self.k,
            KtError::Invalid(format!(
                "kernel {} larger than padded input {}x{}",
                self.k, self.h, self.w
            ))
        );
        Ok(())
    }
}

/// Output columns `[lo, hi)` whose stride-1 tap `kx` lands inside the input row.
fn valid_cols(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(ow);
    let hi = (w + pad).saturating_sub(kx).min(ow).max(lo);
    (lo, hi)
}

/// Unfolds a channel-major input into `[cin·k·k, n·oh·ow]` patch columns.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let np = g.n * oh * ow;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for ni in 0..g.n {
                    let src = &x[(ci * g.n + ni) * g.h * g.w..(ci * g.n + ni + 1) * g.h * g.w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let base = (ni * oh + oy) * ow;
                        if iy < 0 || iy >= g.h as isize {
                            dst[base..base + ow].fill(T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        if g.stride == 1 {
                            let (lo, hi) = valid_cols(kx, g.pad, g.w, ow);
                            let d = &mut dst[base..base + ow];
                            d[..lo].fill(T::zero());
                            d[hi..].fill(T::zero());
                            if lo < hi {
                                let s0 = lo + kx - g.pad;
                                d[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                            }
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            dst[base + ox] = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Folds patch-column gradients back onto the input map (accumulating overlaps).
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    dx.fill(T::zero());
    let (oh, ow) = (g.out_h(), g.out_w());
    let np = g.n * oh * ow;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * np..(row + 1) * np];
                for ni in 0..g.n {
                    let off = (ci * g.n + ni) * g.h * g.w;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (ni * oh + oy) * ow;
                        if g.stride == 1 {
                            let (lo, hi) = valid_cols(kx, g.pad, g.w, ow);
                            if lo < hi {
                                let d0 = off + iy as usize * g.w + lo + kx - g.pad;
                                for (d, &v) in dx[d0..d0 + hi - lo].iter_mut().zip(&src[base + lo..base + hi]) {
                                    *d += v;
                                }
                            }
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dx[off + iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution; returns the output map and the patch columns kept for backward.
pub fn conv_forward_cnhw<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let np = g.out_pixels();
    let mut cols = vec![T::zero(); g.patch() * np];
    im2col(x, g, &mut cols);
    let mut y = vec![T::zero(); g.cout * np];
    gemm(false, false, g.cout, np, g.patch(), T::one(), w, &cols, T::zero(), &mut y);
    (y, cols)
}

/// Accumulates `dw` and, when requested, returns the input gradient.
pub fn conv_backward_cnhw<T: Scalar>(
    cols: &[T],
    dy: &[T],
    w: &[T],
    g: &ConvGeom,
    dw: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    let np = g.out_pixels();
    gemm(false, true, g.cout, g.patch(), np, T::one(), dy, cols, T::one(), dw);
    if !want_dx {
        return None;
    }
    let mut dcols = vec![T::zero(); g.patch() * np];
    gemm(true, false, g.patch(), np, g.cout, T::one(), w, dy, T::zero(), &mut dcols);
    let mut dx = vec![T::zero(); g.cin * g.n * g.h * g.w];
    col2im(&dcols, g, &mut dx);
    Some(dx)
}

/// Batch-first (`N×C×H×W`) cross-correlation with bias-free `(out, in, k, k)` weights.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (is, ws) = (input.shape(), weights.shape());
    ensure!(
        is.len() == 4 && ws.len() == 4 && ws[1] == is[1] && ws[2] == ws[3],
        KtError::shape("conv2d_forward", is, ws)
    );
    let g = ConvGeom {
        cin: is[1],
        cout: ws[0],
        k: ws[2],
        stride,
        pad: padding,
        n: is[0],
        h: is[2],
        w: is[3],
    };
    g.validate()?;
    let x = nchw_to_cnhw(input.data(), g.n, g.cin, g.h * g.w);
    let (y, _) = conv_forward_cnhw(&x, weights.data(), &g);
    let (oh, ow) = (g.out_h(), g.out_w());
    Tensor::new(&[g.n, g.cout, oh, ow], cnhw_to_nchw(&y, g.cout, g.n, oh * ow))
}

pub fn nchw_to_cnhw<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ci * n + ni) * hw..(ci * n + ni + 1) * hw]
                .copy_from_slice(&x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]);
        }
    }
    out
}

pub fn cnhw_to_nchw<T: Scalar>(x: &[T], c: usize, n: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        for ni in 0..n {
            out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                .copy_from_slice(&x[(ci * n + ni) * hw..(ci * n + ni + 1) * hw]);
        }
    }
    out
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch-norm statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub scale: Vec<T>,
    pub train: bool,
}

/// Batch norm over `[c, m]` (channel-major) activations.
///
/// In train mode the batch statistics normalize the input and the running buffers are
/// updated in place (unbiased variance, momentum 0.1); in eval mode the running
/// statistics are used and left untouched.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward<T: Scalar>(
    x: &[T],
    c: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    train: bool,
    y: &mut [T],
) -> BnCache<T> {
    let m = x.len() / c;
    let eps = T::of(BN_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut scale = vec![T::zero(); c];
    for ch in 0..c {
        let xs = &x[ch * m..(ch + 1) * m];
        let (mean, var) = if train {
            let mean = xs.iter().copied().sum::<T>() / T::of(m as f64);
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(m as f64);
            let mom = T::of(BN_MOMENTUM);
            let unbiased = if m > 1 {
                var * T::of(m as f64) / T::of((m - 1) as f64)
            } else {
                var
            };
            running_mean[ch] = (T::one() - mom) * running_mean[ch] + mom * mean;
            running_var[ch] = (T::one() - mom) * running_var[ch] + mom * unbiased;
            (mean, var)
        } else {
            (running_mean[ch], running_var[ch])
        };
        let rstd = T::one() / (var + eps).sqrt();
        scale[ch] = rstd;
        let xh = &mut xhat[ch * m..(ch + 1) * m];
        let ys = &mut y[ch * m..(ch + 1) * m];
        for i in 0..m {
            xh[i] = (xs[i] - mean) * rstd;
            ys[i] = gamma[ch] * xh[i] + beta[ch];
        }
    }
    BnCache { xhat, scale, train }
}

/// Accumulates `dgamma`/`dbeta` and writes the input gradient into `dx`.
pub fn batch_norm_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: Option<(&mut [T], &mut [T])>,
    dx: &mut [T],
) {
    let m = dy.len() / c;
    let mf = T::of(m as f64);
    let mut dg_acc = vec![T::zero(); c];
    let mut db_acc = vec![T::zero(); c];
    for ch in 0..c {
        let dys = &dy[ch * m..(ch + 1) * m];
        let xh = &cache.xhat[ch * m..(ch + 1) * m];
        let sum_dy: T = dys.iter().copied().sum();
        let sum_dy_xh: T = dys.iter().zip(xh).map(|(&d, &h)| d * h).sum();
        dg_acc[ch] = sum_dy_xh;
        db_acc[ch] = sum_dy;
        let k = gamma[ch] * cache.scale[ch];
        let dxs = &mut dx[ch * m..(ch + 1) * m];
        if cache.train {
            for i in 0..m {
                dxs[i] = k * (dys[i] - sum_dy / mf - xh[i] * sum_dy_xh / mf);
            }
        } else {
            for i in 0..m {
                dxs[i] = k * dys[i];
            }
        }
    }
    if let Some((dg, db)) = dgamma {
        for ch in 0..c {
            dg[ch] += dg_acc[ch];
            db[ch] += db_acc[ch];
        }
    }
}

/// 2×2 stride-2 max pool over `[c, n, h, w]`; returns output and argmax indices.
pub fn max_pool2_forward<T: Scalar>(
    x: &[T],
    c: usize,
    n: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * n * oh * ow);
    let mut idx = Vec::with_capacity(c * n * oh * ow);
    for plane in 0..c * n {
        let off = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = off + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = off + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                y.push(x[best]);
                idx.push(best);
            }
        }
    }
    (y, idx)
}

pub fn max_pool2_backward<T: Scalar>(dy: &[T], idx: &[usize], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (&d, &i) in dy.iter().zip(idx) {
        dx[i] += d;
    }
    dx
}

/// Global average pool: `[c, n, hw]` → `[n, c]`.
pub fn global_avg_pool<T: Scalar>(x: &[T], c: usize, n: usize, hw: usize) -> Vec<T> {
    let inv = T::one() / T::of(hw as f64);
    let mut y = vec![T::zero(); n * c];
    for ch in 0..c {
        for ni in 0..n {
            let s: T = x[(ch * n + ni) * hw..(ch * n + ni + 1) * hw]
                .iter()
                .copied()
                .sum();
            y[ni * c + ch] = s * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &[T], c: usize, n: usize, hw: usize) -> Vec<T> {
    let inv = T::one() / T::of(hw as f64);
    let mut dx = vec![T::zero(); c * n * hw];
    for ch in 0..c {
        for ni in 0..n {
            let g = dy[ni * c + ch] * inv;
            dx[(ch * n + ni) * hw..(ch * n + ni + 1) * hw].fill(g);
        }
    }
    dx
}
