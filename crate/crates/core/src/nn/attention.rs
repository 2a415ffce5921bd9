//! Single-head scaled dot-product attention with learned `(d, d)` projections.

use super::layers::softmax_rows;
use super::tensor::{gemm, Scalar};

/// Projection weights, each stored `[d, d]` (`y = x · wᵀ`).
pub struct AttnWeights<'a, T> {
    pub wq: &'a [T],
    pub wk: &'a [T],
    pub wv: &'a [T],
    pub wo: &'a [T],
}

pub struct AttnGrads<'a, T> {
    pub wq: &'a mut [T],
    pub wk: &'a mut [T],
    pub wv: &'a mut [T],
    pub wo: &'a mut [T],
}

/// Intermediates of one sample's forward pass.
#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
    o: Vec<T>,
}

/// Attends `sq` query rows of `xq` over `sk` rows of `xkv` (both width `d`).
pub fn attention_forward<T: Scalar>(
    xq: &[T],
    xkv: &[T],
    sq: usize,
    sk: usize,
    d: usize,
    w: &AttnWeights<'_, T>,
    y: &mut [T],
) -> AttnCache<T> {
    let mut q = vec![T::zero(); sq * d];
    let mut k = vec![T::zero(); sk * d];
    let mut v = vec![T::zero(); sk * d];
    gemm(false, true, sq, d, d, T::one(), xq, w.wq, T::zero(), &mut q);
    gemm(false, true, sk, d, d, T::one(), xkv, w.wk, T::zero(), &mut k);
    gemm(false, true, sk, d, d, T::one(), xkv, w.wv, T::zero(), &mut v);
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut p = vec![T::zero(); sq * sk];
    gemm(false, true, sq, sk, d, scale, &q, &k, T::zero(), &mut p);
    softmax_rows(&mut p, sk);
    let mut o = vec![T::zero(); sq * d];
    gemm(false, false, sq, d, sk, T::one(), &p, &v, T::zero(), &mut o);
    gemm(false, true, sq, d, d, T::one(), &o, w.wo, T::zero(), y);
    AttnCache { q, k, v, p, o }
}

/// Backward pass. Accumulates weight gradients; returns `(dxq, dxkv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    xq: &[T],
    xkv: &[T],
    sq: usize,
    sk: usize,
    d: usize,
    w: &AttnWeights<'_, T>,
    cache: &AttnCache<T>,
    dy: &[T],
    g: &mut AttnGrads<'_, T>,
) -> (Vec<T>, Vec<T>) {
    let AttnCache { q, k, v, p, o } = cache;
    gemm(true, false, d, d, sq, T::one(), dy, o, T::one(), g.wo);
    let mut d_o = vec![T::zero(); sq * d];
    gemm(false, false, sq, d, d, T::one(), dy, w.wo, T::zero(), &mut d_o);

    let mut dp = vec![T::zero(); sq * sk];
    gemm(false, true, sq, sk, d, T::one(), &d_o, v, T::zero(), &mut dp);
    let mut dv = vec![T::zero(); sk * d];
    gemm(true, false, sk, d, sq, T::one(), p, &d_o, T::zero(), &mut dv);

    // softmax Jacobian, folded with the 1/sqrt(d) score scale
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut ds = dp;
    for (drow, prow) in ds.chunks_exact_mut(sk).zip(p.chunks_exact(sk)) {
        let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
        for (dv_, &pv) in drow.iter_mut().zip(prow) {
            *dv_ = pv * (*dv_ - dot) * scale;
        }
    }
    let mut dq = vec![T::zero(); sq * d];
    gemm(false, false, sq, d, sk, T::one(), &ds, k, T::zero(), &mut dq);
    let mut dk = vec![T::zero(); sk * d];
    gemm(true, false, sk, d, sq, T::one(), &ds, q, T::zero(), &mut dk);

    gemm(true, false, d, d, sq, T::one(), &dq, xq, T::one(), g.wq);
    gemm(true, false, d, d, sk, T::one(), &dk, xkv, T::one(), g.wk);
    gemm(true, false, d, d, sk, T::one(), &dv, xkv, T::one(), g.wv);

    let mut dxq = vec![T::zero(); sq * d];
    gemm(false, false, sq, d, d, T::one(), &dq, w.wq, T::zero(), &mut dxq);
    let mut dxkv = vec![T::zero(); sk * d];
    gemm(false, false, sk, d, d, T::one(), &dk, w.wk, T::zero(), &mut dxkv);
    gemm(false, false, sk, d, d, T::one(), &dv, w.wv, T::one(), &mut dxkv);
    (dxq, dxkv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_and_grads(x: &[f64], ws: &[Vec<f64>; 4], s: usize, d: usize) -> (f64, Vec<f64>, [Vec<f64>; 4]) {
        let w = AttnWeights { wq: &ws[0], wk: &ws[1], wv: &ws[2], wo: &ws[3] };
        let mut y = vec![0.0; s * d];
        let cache = attention_forward(x, x, s, s, d, &w, &mut y);
        // loss = sum(y * c) with a fixed probe c
        let c: Vec<f64> = (0..s * d).map(|i| (i as f64 * 0.41).sin()).collect();
        let loss = y.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut gw = [vec![0.0; d * d], vec![0.0; d * d], vec![0.0; d * d], vec![0.0; d * d]];
        let [g0, g1, g2, g3] = &mut gw;
        let mut g = AttnGrads { wq: g0, wk: g1, wv: g2, wo: g3 };
        let (dxq, dxkv) = attention_backward(x, x, s, s, d, &w, &cache, &c, &mut g);
        let dx = dxq.iter().zip(&dxkv).map(|(a, b)| a + b).collect();
        (loss, dx, gw)
    }

    #[test]
    fn self_attention_gradients_match_central_differences() {
        let (s, d) = (4, 3);
        let x: Vec<f64> = (0..s * d).map(|i| (i as f64 * 0.77).cos()).collect();
        let ws: [Vec<f64>; 4] = std::array::from_fn(|j| {
            (0..d * d).map(|i| ((i + 3 * j) as f64 * 0.53).sin() * 0.8).collect()
        });
        let (_, dx, gw) = loss_and_grads(&x, &ws, s, d);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss_and_grads(&xp, &ws, s, d).0 - loss_and_grads(&xm, &ws, s, d).0) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7, "dx[{i}]: {fd} vs {}", dx[i]);
        }
        for j in 0..4 {
            for i in 0..d * d {
                let mut wp = ws.clone();
                wp[j][i] += h;
                let mut wm = ws.clone();
                wm[j][i] -= h;
                let fd = (loss_and_grads(&x, &wp, s, d).0 - loss_and_grads(&x, &wm, s, d).0) / (2.0 * h);
                assert!((fd - gw[j][i]).abs() < 1e-7, "w{j}[{i}]");
            }
        }
    }

    #[test]
    fn zero_output_projection_gives_zero_output() {
        let (s, d) = (5, 2);
        let x: Vec<f32> = (0..s * d).map(|i| i as f32).collect();
        let ones = vec![0.3f32; d * d];
        let zero = vec![0.0f32; d * d];
        let w = AttnWeights { wq: &ones, wk: &ones, wv: &ones, wo: &zero };
        let mut y = vec![1.0; s * d];
        attention_forward(&x, &x, s, s, d, &w, &mut y);
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
