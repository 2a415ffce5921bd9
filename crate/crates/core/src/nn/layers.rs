//! Row-oriented kernels: dense, layer norm, activations, dropout and losses.
//!
//! Every kernel works on flat row-major slices with explicit dimensions. Backward
//! kernels accumulate (`+=`) into parameter gradients and overwrite input gradients.

use rand::Rng;

use super::tensor::{gemm, Scalar};

/// `y[rows, out] = x[rows, inp] · wᵀ + b`, with `w` stored `[out, inp]`.
pub fn dense_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    inp: usize,
    w: &[T],
    b: Option<&[T]>,
    out: usize,
    y: &mut [T],
) {
    gemm(false, true, rows, out, inp, T::one(), x, w, T::zero(), y);
    if let Some(b) = b {
        for row in y[..rows * out].chunks_exact_mut(out) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    inp: usize,
    out: usize,
    w: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    gemm(true, false, out, inp, rows, T::one(), dy, x, T::one(), dw);
    if let Some(db) = db {
        for row in dy[..rows * out].chunks_exact(out) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
    if let Some(dx) = dx {
        gemm(false, false, rows, inp, out, T::one(), dy, w, T::zero(), dx);
    }
}

/// Dense over the leading (sequence) axis of one `[seq, cols]` sample:
/// `y[out, cols] = w[out, seq] · x + b[out]`.
pub fn seq_dense_forward<T: Scalar>(
    x: &[T],
    seq: usize,
    cols: usize,
    w: &[T],
    b: Option<&[T]>,
    out: usize,
    y: &mut [T],
) {
    gemm(false, false, out, cols, seq, T::one(), w, x, T::zero(), y);
    if let Some(b) = b {
        for (row, &bb) in y[..out * cols].chunks_exact_mut(cols).zip(b) {
            row.iter_mut().for_each(|v| *v += bb);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn seq_dense_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    seq: usize,
    cols: usize,
    out: usize,
    w: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    gemm(false, true, out, seq, cols, T::one(), dy, x, T::one(), dw);
    if let Some(db) = db {
        for (row, g) in dy[..out * cols].chunks_exact(cols).zip(db.iter_mut()) {
            *g += row.iter().copied().sum::<T>();
        }
    }
    if let Some(dx) = dx {
        gemm(true, false, seq, cols, out, T::one(), w, dy, T::zero(), dx);
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over the last axis. Returns per-row `(mean, rstd)` for backward.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    dim: usize,
    gamma: &[T],
    beta: &[T],
    y: &mut [T],
) -> Vec<(T, T)> {
    let n = T::of(dim as f64);
    let eps = T::of(LN_EPS);
    x.chunks_exact(dim)
        .zip(y.chunks_exact_mut(dim))
        .map(|(xr, yr)| {
            let mean = xr.iter().copied().sum::<T>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for i in 0..dim {
                yr[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
            }
            (mean, rstd)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    dim: usize,
    stats: &[(T, T)],
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: &mut [T],
) {
    let n = T::of(dim as f64);
    let mut xhat = vec![T::zero(); dim];
    let mut dxhat = vec![T::zero(); dim];
    for (r, &(mean, rstd)) in stats.iter().enumerate() {
        let xr = &x[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for i in 0..dim {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = dyr[i] * gamma[i];
            dgamma[i] += dyr[i] * xhat[i];
            dbeta[i] += dyr[i];
            s1 += dxhat[i];
            s2 += dxhat[i] * xhat[i];
        }
        let m1 = s1 / n;
        let m2 = s2 / n;
        let dxr = &mut dx[r * dim..(r + 1) * dim];
        for i in 0..dim {
            dxr[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * x * (T::one() + t)
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_with_grad(x).1
}

/// GELU and its derivative from one tanh evaluation; bit-identical to `gelu` and `gelu_grad`.
pub fn gelu_with_grad<T: Scalar>(x: T) -> (T, T) {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    let dt = (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x);
    (half * x * (T::one() + t), half * (T::one() + t) + half * x * dt)
}

pub fn gelu_forward<T: Scalar>(x: &[T], y: &mut [T]) {
    for (o, &i) in y.iter_mut().zip(x) {
        *o = gelu(i);
    }
}

/// `dx = dy * gelu'(x)`, in place on `dy`.
pub fn gelu_backward_inplace<T: Scalar>(x: &[T], dy: &mut [T]) {
    for (d, &i) in dy.iter_mut().zip(x) {
        *d *= gelu_grad(i);
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `dy` wherever the forward output `y` was clamped.
pub fn relu_backward_inplace<T: Scalar>(y: &[T], dy: &mut [T]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Inverted dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

pub fn apply_mask<T: Scalar>(x: &mut [T], mask: &[T]) {
    for (v, &m) in x.iter_mut().zip(mask) {
        *v *= m;
    }
}

/// Mean squared error, elementwise mean.
pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> T {
    assert_eq!(pred.len(), target.len(), "mse length mismatch");
    let n = T::of(pred.len() as f64);
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<T>()
        / n
}

/// Mean softmax cross-entropy over `rows` logit rows, and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &[T],
    classes: usize,
    labels: &[u8],
) -> (T, Vec<T>) {
    let rows = labels.len();
    let inv = T::one() / T::of(rows as f64);
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let z = &logits[r * classes..(r + 1) * classes];
        let g = &mut grad[r * classes..(r + 1) * classes];
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (gi, &zi) in g.iter_mut().zip(z) {
            *gi = (zi - max).exp();
            sum += *gi;
        }
        loss += sum.ln() + max - z[label as usize];
        for gi in g.iter_mut() {
            *gi = *gi / sum * inv;
        }
        g[label as usize] -= inv;
    }
    (loss * inv, grad)
}

/// In-place row softmax.
pub fn softmax_rows<T: Scalar>(x: &mut [T], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
