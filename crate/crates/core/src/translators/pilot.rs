//! FLOPs-matched pilot translators for the architecture comparison.
//!
//! All three map a `2C² × 9` token batch to `C² × 9` small-block tokens:
//!
//! * `mlp`: flatten, `depth` × (dense → layer norm → GELU) of `width`, dense to the output.
//! * `conv`: tokens are the channels of a 3×3 image; `depth` residual bottlenecks
//!   (1×1 → ReLU → 3×3 → ReLU → 1×1, inner width `width`), then a 1×1 projection to `C²` channels.
//! * `attention`: token embedding plus learned positions, `depth` pre-norm encoder layers
//!   (single-head attention, GELU MLP of `2·width`), then `C²` learned queries cross-attend
//!   to the encoded tokens and a dense maps each to 9 values.
//!
//! FLOPs are `2 ×` the multiply-accumulates of dense, convolution and attention products
//! for one sample; norms, activations and additions are not counted.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{dense_flops, dense_init, Translate};
use crate::error::{ensure, KtError, Result};
use crate::nn::attention::{attention_backward, attention_forward, AttnCache, AttnGrads, AttnWeights};
use crate::nn::conv::{conv_backward_cnhw, conv_forward_cnhw, ConvGeom};
use crate::nn::layers::{
    dense_backward, dense_forward, gelu, gelu_grad, layer_norm_backward, layer_norm_forward, relu_backward_inplace,
    relu_inplace, seq_dense_backward, seq_dense_forward,
};
use crate::nn::{Param, Parameterized, Scalar, Tensor};

const TOKEN: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PilotKind {
    Mlp,
    Conv,
    Attention,
}

impl PilotKind {
    pub const ALL: [PilotKind; 3] = [PilotKind::Mlp, PilotKind::Conv, PilotKind::Attention];

    pub fn default_depth(self) -> usize {
        match self {
            PilotKind::Mlp => 3,
            PilotKind::Conv => 3,
            PilotKind::Attention => 2,
        }
    }
}

impl fmt::Display for PilotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PilotKind::Mlp => "mlp",
            PilotKind::Conv => "conv",
            PilotKind::Attention => "attention",
        })
    }
}

impl FromStr for PilotKind {
    type Err = KtError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(PilotKind::Mlp),
            "conv" => Ok(PilotKind::Conv),
            "attention" | "attn" => Ok(PilotKind::Attention),
            _ => Err(KtError::Config(format!("unknown pilot kind `{s}` (expected mlp, conv or attention)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotConfig {
    pub kind: PilotKind,
    pub channels: usize,
    pub width: usize,
    pub depth: usize,
}

impl PilotConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.channels >= 2 && self.channels % 2 == 0,
            KtError::Config(format!("pilot needs an even channel count >= 2, got {}", self.channels))
        );
        ensure!(
            self.width >= 1 && self.depth >= 1,
            KtError::Config("pilot width and depth must be >= 1".into())
        );
        Ok(())
    }

    fn seq(&self) -> usize {
        2 * self.channels * self.channels
    }

    fn out_seq(&self) -> usize {
        self.channels * self.channels
    }

    /// Forward FLOPs of one sample, computed from the configuration alone.
    pub fn flops(&self) -> u64 {
        let (s, so, w, l) = (self.seq(), self.out_seq(), self.width, self.depth as u64);
        match self.kind {
            PilotKind::Mlp => {
                dense_flops(1, s * TOKEN, w) + (l - 1) * dense_flops(1, w, w) + dense_flops(1, w, so * TOKEN)
            }
            PilotKind::Conv => {
                let block = dense_flops(TOKEN, s, w) + dense_flops(TOKEN, w * 9, w) + dense_flops(TOKEN, w, s);
                l * block + dense_flops(TOKEN, s, so)
            }
            PilotKind::Attention => {
                let d = w;
                let attn = |sq: usize, sk: usize| {
                    dense_flops(sq, d, d) * 2 + dense_flops(sk, d, d) * 2 + dense_flops(sq, d, sk) * 2
                };
                let layer = attn(s, s) + dense_flops(s, d, 2 * d) + dense_flops(s, 2 * d, d);
                dense_flops(s, TOKEN, d) + l * layer + attn(so, s) + dense_flops(so, d, TOKEN)
            }
        }
    }
}

/// Estimated forward FLOPs of a built pilot.
pub fn flops_estimate(model: &PilotModel) -> u64 {
    model.config().flops()
}

const MAX_WIDTH: usize = 1 << 14;

/// Builds a pilot of `kind` whose width puts its FLOPs within ±10% of `budget`.
pub fn build_pilot<R: Rng + ?Sized>(kind: PilotKind, channels: usize, budget: u64, rng: &mut R) -> Result<PilotModel> {
    let cfg = solve_width(kind, channels, kind.default_depth(), budget)?;
    PilotModel::new(cfg, rng)
}

/// Smallest-error width for a fixed depth; rejects budgets no width reaches within ±10%.
pub fn solve_width(kind: PilotKind, channels: usize, depth: usize, budget: u64) -> Result<PilotConfig> {
    let at = |width| PilotConfig { kind, channels, width, depth };
    at(1).validate()?;
    ensure!(budget > 0, KtError::Config("FLOPs budget must be positive".into()));
    let (lo, hi) = (at(1).flops(), at(MAX_WIDTH).flops());
    let best = if budget <= lo {
        1
    } else if budget >= hi {
        MAX_WIDTH
    } else {
        // flops is strictly increasing in width
        let (mut a, mut b) = (1usize, MAX_WIDTH);
        while b - a > 1 {
            let m = (a + b) / 2;
            if at(m).flops() <= budget {
                a = m;
            } else {
                b = m;
            }
        }
        let err = |w: usize| (at(w).flops() as f64 - budget as f64).abs();
        if err(b) < err(a) { b } else { a }
    };
    let cfg = at(best);
    let got = cfg.flops();
    ensure!(
        (got as f64 - budget as f64).abs() <= 0.1 * budget as f64,
        KtError::Config(format!(
            "{kind} pilot cannot reach {budget} FLOPs within 10%; nearest achievable is {got} (width {best})"
        ))
    );
    Ok(cfg)
}

#[derive(Clone, Debug)]
struct Dense<T> {
    w: Param<T>,
    b: Param<T>,
    inp: usize,
    out: usize,
}

impl<T: Scalar> Dense<T> {
    fn new<R: Rng + ?Sized>(name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        Self {
            w: Param::new(format!("{name}.w"), dense_init(&[out, inp], inp, rng)),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[out])),
            inp,
            out,
        }
    }

    fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let mut y = vec![T::zero(); rows * self.out];
        dense_forward(x, rows, self.inp, self.w.value.data(), Some(self.b.value.data()), self.out, &mut y);
        y
    }

    fn backward(&mut self, x: &[T], dy: &[T], rows: usize, want_dx: bool) -> Option<Vec<T>> {
        let mut dx = want_dx.then(|| vec![T::zero(); rows * self.inp]);
        dense_backward(
            x,
            dy,
            rows,
            self.inp,
            self.out,
            self.w.value.data(),
            self.w.grad.data_mut(),
            Some(self.b.grad.data_mut()),
            dx.as_deref_mut(),
        );
        dx
    }

    /// Channel-mixing over a channel-major `[inp, cols]` map.
    fn forward_cm(&self, x: &[T], cols: usize) -> Vec<T> {
        let mut y = vec![T::zero(); self.out * cols];
        seq_dense_forward(x, self.inp, cols, self.w.value.data(), Some(self.b.value.data()), self.out, &mut y);
        y
    }

    fn backward_cm(&mut self, x: &[T], dy: &[T], cols: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); self.inp * cols];
        seq_dense_backward(
            x,
            dy,
            self.inp,
            cols,
            self.out,
            self.w.value.data(),
            self.w.grad.data_mut(),
            Some(self.b.grad.data_mut()),
            Some(&mut dx),
        );
        dx
    }

    fn params(&self) -> [&Param<T>; 2] {
        [&self.w, &self.b]
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.w, &mut self.b]
    }

    fn cast<U: Scalar>(&self) -> Dense<U> {
        Dense { w: self.w.cast(), b: self.b.cast(), inp: self.inp, out: self.out }
    }
}

#[derive(Clone, Debug)]
struct Norm<T> {
    g: Param<T>,
    b: Param<T>,
}

impl<T: Scalar> Norm<T> {
    fn new(name: &str, dim: usize) -> Self {
        Self {
            g: Param::new(format!("{name}.g"), Tensor::filled(&[dim], T::one())),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[dim])),
        }
    }

    fn dim(&self) -> usize {
        self.g.value.len()
    }

    fn forward(&self, x: &[T]) -> (Vec<T>, Vec<(T, T)>) {
        let mut y = vec![T::zero(); x.len()];
        let st = layer_norm_forward(x, self.dim(), self.g.value.data(), self.b.value.data(), &mut y);
        (y, st)
    }

    fn backward(&mut self, x: &[T], dy: &[T], st: &[(T, T)]) -> Vec<T> {
        let mut dx = vec![T::zero(); x.len()];
        let d = self.dim();
        layer_norm_backward(x, dy, d, st, self.g.value.data(), self.g.grad.data_mut(), self.b.grad.data_mut(), &mut dx);
        dx
    }

    fn params(&self) -> [&Param<T>; 2] {
        [&self.g, &self.b]
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.g, &mut self.b]
    }

    fn cast<U: Scalar>(&self) -> Norm<U> {
        Norm { g: self.g.cast(), b: self.b.cast() }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// `[a, b, w]` → `[b, a, w]`.
fn swap_leading<T: Scalar>(x: &[T], a: usize, b: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * w..(j * a + i + 1) * w].copy_from_slice(&x[(i * b + j) * w..(i * b + j + 1) * w]);
        }
    }
    out
}

// ---------------------------------------------------------------- mlp

#[derive(Clone, Debug)]
pub struct MlpPilot<T> {
    hidden: Vec<(Dense<T>, Norm<T>)>,
    out: Dense<T>,
}

pub struct MlpCache<T> {
    batch: usize,
    x: Vec<T>,
    /// Per hidden layer: pre-norm activation, norm stats, normed value, GELU output.
    layers: Vec<(Vec<T>, Vec<(T, T)>, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> MlpPilot<T> {
    fn new<R: Rng + ?Sized>(cfg: &PilotConfig, rng: &mut R) -> Self {
        let mut hidden = Vec::new();
        let mut inp = cfg.seq() * TOKEN;
        for l in 0..cfg.depth {
            hidden.push((Dense::new(&format!("mlp{l}"), inp, cfg.width, rng), Norm::new(&format!("ln{l}"), cfg.width)));
            inp = cfg.width;
        }
        Self { hidden, out: Dense::new("head", inp, cfg.out_seq() * TOKEN, rng) }
    }

    fn forward(&self, x: &[T], b: usize) -> (Vec<T>, MlpCache<T>) {
        let mut cur = x.to_vec();
        let mut layers = Vec::with_capacity(self.hidden.len());
        for (d, n) in &self.hidden {
            let h = d.forward(&cur, b);
            let (u, st) = n.forward(&h);
            let g: Vec<T> = u.iter().map(|&v| gelu(v)).collect();
            cur = g.clone();
            layers.push((h, st, u, g));
        }
        let y = self.out.forward(&cur, b);
        (y, MlpCache { batch: b, x: x.to_vec(), layers })
    }

    fn backward(&mut self, c: &MlpCache<T>, dy: &[T]) {
        let b = c.batch;
        let last = c.layers.last().map(|l| &l.3).unwrap_or(&c.x);
        let mut d = self.out.backward(last, dy, b, true).unwrap();
        for (i, ((dense, norm), (h, st, u, _))) in self.hidden.iter_mut().zip(&c.layers).enumerate().rev() {
            d.iter_mut().zip(u).for_each(|(g, &v)| *g *= gelu_grad(v));
            let dh = norm.backward(h, &d, st);
            let inp = if i == 0 { &c.x } else { &c.layers[i - 1].3 };
            if let Some(dx) = dense.backward(inp, &dh, b, i > 0) {
                d = dx;
            }
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for (d, n) in &self.hidden {
            v.extend(d.params());
            v.extend(n.params());
        }
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for (d, n) in &mut self.hidden {
            v.extend(d.params_mut());
            v.extend(n.params_mut());
        }
        v.extend(self.out.params_mut());
        v
    }

    fn cast<U: Scalar>(&self) -> MlpPilot<U> {
        MlpPilot {
            hidden: self.hidden.iter().map(|(d, n)| (d.cast(), n.cast())).collect(),
            out: self.out.cast(),
        }
    }
}

// ---------------------------------------------------------------- conv

#[derive(Clone, Debug)]
struct Bottleneck<T> {
    reduce: Dense<T>,
    spatial_w: Param<T>,
    spatial_b: Param<T>,
    expand: Dense<T>,
}

#[derive(Clone, Debug)]
pub struct ConvPilot<T> {
    width: usize,
    blocks: Vec<Bottleneck<T>>,
    proj: Dense<T>,
}

struct BottleneckCache<T> {
    x: Vec<T>,
    a: Vec<T>,
    cols: Vec<T>,
    c: Vec<T>,
}

pub struct ConvCache<T> {
    batch: usize,
    blocks: Vec<BottleneckCache<T>>,
    x_final: Vec<T>,
}

impl<T: Scalar> ConvPilot<T> {
    fn new<R: Rng + ?Sized>(cfg: &PilotConfig, rng: &mut R) -> Self {
        let (s, w) = (cfg.seq(), cfg.width);
        let blocks = (0..cfg.depth)
            .map(|l| Bottleneck {
                reduce: Dense::new(&format!("block{l}.reduce"), s, w, rng),
                spatial_w: Param::new(format!("block{l}.spatial.w"), dense_init(&[w, w, 3, 3], w * 9, rng)),
                spatial_b: Param::new(format!("block{l}.spatial.b"), Tensor::zeros(&[w])),
                expand: Dense::new(&format!("block{l}.expand"), w, s, rng),
            })
            .collect();
        Self { width: w, blocks, proj: Dense::new("proj", s, cfg.out_seq(), rng) }
    }

    fn geom(&self, n: usize) -> ConvGeom {
        ConvGeom { cin: self.width, cout: self.width, k: 3, stride: 1, pad: 1, n, h: 3, w: 3 }
    }

    fn forward(&self, x: &[T], b: usize) -> (Vec<T>, ConvCache<T>) {
        let s = self.proj.inp;
        let cols = b * TOKEN;
        let mut cur = swap_leading(x, b, s, TOKEN);
        let g = self.geom(b);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let mut a = blk.reduce.forward_cm(&cur, cols);
            relu_inplace(&mut a);
            let (mut c, im) = conv_forward_cnhw(&a, blk.spatial_w.value.data(), &g);
            for (row, &bb) in c.chunks_exact_mut(cols).zip(blk.spatial_b.value.data()) {
                row.iter_mut().for_each(|v| *v += bb);
            }
            relu_inplace(&mut c);
            let e = blk.expand.forward_cm(&c, cols);
            let mut next = cur.clone();
            add_into(&mut next, &e);
            caches.push(BottleneckCache { x: cur, a, cols: im, c });
            cur = next;
        }
        let yt = self.proj.forward_cm(&cur, cols);
        let y = swap_leading(&yt, self.proj.out, b, TOKEN);
        (y, ConvCache { batch: b, blocks: caches, x_final: cur })
    }

    fn backward(&mut self, cache: &ConvCache<T>, dy: &[T]) {
        let b = cache.batch;
        let cols = b * TOKEN;
        let g = self.geom(b);
        let dyt = swap_leading(dy, b, self.proj.out, TOKEN);
        let mut dx = self.proj.backward_cm(&cache.x_final, &dyt, cols);
        for (blk, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let mut dc = blk.expand.backward_cm(&c.c, &dx, cols);
            relu_backward_inplace(&c.c, &mut dc);
            for (row, gb) in dc.chunks_exact(cols).zip(blk.spatial_b.grad.data_mut()) {
                *gb += row.iter().copied().sum::<T>();
            }
            let mut da = conv_backward_cnhw(&c.cols, &dc, blk.spatial_w.value.data(), &g, blk.spatial_w.grad.data_mut(), true)
                .expect("input gradient requested");
            relu_backward_inplace(&c.a, &mut da);
            let dr = blk.reduce.backward_cm(&c.x, &da, cols);
            add_into(&mut dx, &dr);
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend(b.reduce.params());
            v.extend([&b.spatial_w, &b.spatial_b]);
            v.extend(b.expand.params());
        }
        v.extend(self.proj.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend(b.reduce.params_mut());
            v.extend([&mut b.spatial_w, &mut b.spatial_b]);
            v.extend(b.expand.params_mut());
        }
        v.extend(self.proj.params_mut());
        v
    }

    fn cast<U: Scalar>(&self) -> ConvPilot<U> {
        ConvPilot {
            width: self.width,
            blocks: self
                .blocks
                .iter()
                .map(|b| Bottleneck {
                    reduce: b.reduce.cast(),
                    spatial_w: b.spatial_w.cast(),
                    spatial_b: b.spatial_b.cast(),
                    expand: b.expand.cast(),
                })
                .collect(),
            proj: self.proj.cast(),
        }
    }
}

// ---------------------------------------------------------------- attention

#[derive(Clone, Debug)]
struct AttnParams<T> {
    q: Param<T>,
    k: Param<T>,
    v: Param<T>,
    o: Param<T>,
}

impl<T: Scalar> AttnParams<T> {
    fn new<R: Rng + ?Sized>(name: &str, d: usize, rng: &mut R) -> Self {
        let mut p = |x: &str| Param::new(format!("{name}.{x}"), dense_init(&[d, d], d, rng));
        Self { q: p("q"), k: p("k"), v: p("v"), o: p("o") }
    }

    fn weights(&self) -> AttnWeights<'_, T> {
        AttnWeights { wq: self.q.value.data(), wk: self.k.value.data(), wv: self.v.value.data(), wo: self.o.value.data() }
    }

    fn split(&mut self) -> (AttnWeights<'_, T>, AttnGrads<'_, T>) {
        (
            AttnWeights { wq: self.q.value.data(), wk: self.k.value.data(), wv: self.v.value.data(), wo: self.o.value.data() },
            AttnGrads {
                wq: self.q.grad.data_mut(),
                wk: self.k.grad.data_mut(),
                wv: self.v.grad.data_mut(),
                wo: self.o.grad.data_mut(),
            },
        )
    }

    fn params(&self) -> [&Param<T>; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    fn cast<U: Scalar>(&self) -> AttnParams<U> {
        AttnParams { q: self.q.cast(), k: self.k.cast(), v: self.v.cast(), o: self.o.cast() }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer<T> {
    ln1: Norm<T>,
    attn: AttnParams<T>,
    ln2: Norm<T>,
    fc1: Dense<T>,
    fc2: Dense<T>,
}

#[derive(Clone, Debug)]
pub struct AttnPilot<T> {
    seq: usize,
    d: usize,
    embed: Dense<T>,
    pos: Param<T>,
    layers: Vec<EncoderLayer<T>>,
    ln_kv: Norm<T>,
    queries: Param<T>,
    cross: AttnParams<T>,
    head: Dense<T>,
}

struct EncoderCache<T> {
    x: Vec<T>,
    st1: Vec<(T, T)>,
    u1: Vec<T>,
    attn: Vec<AttnCache<T>>,
    x1: Vec<T>,
    st2: Vec<(T, T)>,
    u2: Vec<T>,
    h: Vec<T>,
    g: Vec<T>,
}

pub struct AttnPilotCache<T> {
    batch: usize,
    x: Vec<T>,
    layers: Vec<EncoderCache<T>>,
    enc: Vec<T>,
    st_kv: Vec<(T, T)>,
    kv: Vec<T>,
    cross: Vec<AttnCache<T>>,
    o: Vec<T>,
}

impl<T: Scalar> AttnPilot<T> {
    fn new<R: Rng + ?Sized>(cfg: &PilotConfig, rng: &mut R) -> Self {
        let (s, d) = (cfg.seq(), cfg.width);
        let embed = Dense::new("embed", TOKEN, d, rng);
        let pos = Param::new("pos", dense_init(&[s, d], d, rng));
        let layers = (0..cfg.depth)
            .map(|l| EncoderLayer {
                ln1: Norm::new(&format!("enc{l}.ln1"), d),
                attn: AttnParams::new(&format!("enc{l}.attn"), d, rng),
                ln2: Norm::new(&format!("enc{l}.ln2"), d),
                fc1: Dense::new(&format!("enc{l}.fc1"), d, 2 * d, rng),
                fc2: Dense::new(&format!("enc{l}.fc2"), 2 * d, d, rng),
            })
            .collect();
        Self {
            seq: s,
            d,
            embed,
            pos,
            layers,
            ln_kv: Norm::new("ln_kv", d),
            queries: Param::new("queries", dense_init(&[cfg.out_seq(), d], d, rng)),
            cross: AttnParams::new("cross", d, rng),
            head: Dense::new("head", d, TOKEN, rng),
        }
    }

    fn out_seq(&self) -> usize {
        self.queries.value.shape()[0]
    }

    fn forward(&self, x: &[T], b: usize) -> (Vec<T>, AttnPilotCache<T>) {
        let (s, d, so) = (self.seq, self.d, self.out_seq());
        let mut cur = self.embed.forward(x, b * s);
        for row in cur.chunks_exact_mut(s * d) {
            add_into(row, self.pos.value.data());
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (u1, st1) = l.ln1.forward(&cur);
            let mut a = vec![T::zero(); b * s * d];
            let w = l.attn.weights();
            let attn = (0..b)
                .map(|i| {
                    let u = &u1[i * s * d..(i + 1) * s * d];
                    attention_forward(u, u, s, s, d, &w, &mut a[i * s * d..(i + 1) * s * d])
                })
                .collect();
            let mut x1 = cur.clone();
            add_into(&mut x1, &a);
            let (u2, st2) = l.ln2.forward(&x1);
            let h = l.fc1.forward(&u2, b * s);
            let g: Vec<T> = h.iter().map(|&v| gelu(v)).collect();
            let m = l.fc2.forward(&g, b * s);
            let mut x2 = x1.clone();
            add_into(&mut x2, &m);
            caches.push(EncoderCache { x: cur, st1, u1, attn, x1, st2, u2, h, g });
            cur = x2;
        }
        let (kv, st_kv) = self.ln_kv.forward(&cur);
        let mut o = vec![T::zero(); b * so * d];
        let w = self.cross.weights();
        let q = self.queries.value.data();
        let cross = (0..b)
            .map(|i| attention_forward(q, &kv[i * s * d..(i + 1) * s * d], so, s, d, &w, &mut o[i * so * d..(i + 1) * so * d]))
            .collect();
        let y = self.head.forward(&o, b * so);
        (y, AttnPilotCache { batch: b, x: x.to_vec(), layers: caches, enc: cur, st_kv, kv, cross, o })
    }

    fn backward(&mut self, c: &AttnPilotCache<T>, dy: &[T]) {
        let (s, d, so, b) = (self.seq, self.d, self.out_seq(), c.batch);
        let d_o = self.head.backward(&c.o, dy, b * so, true).unwrap();
        let mut dkv = vec![T::zero(); b * s * d];
        {
            let q = self.queries.value.data().to_vec();
            let (w, mut g) = self.cross.split();
            let dq_total = self.queries.grad.data_mut();
            for i in 0..b {
                let kv = &c.kv[i * s * d..(i + 1) * s * d];
                let (dq, dk) = attention_backward(&q, kv, so, s, d, &w, &c.cross[i], &d_o[i * so * d..(i + 1) * so * d], &mut g);
                add_into(dq_total, &dq);
                dkv[i * s * d..(i + 1) * s * d].copy_from_slice(&dk);
            }
        }
        let mut dx = self.ln_kv.backward(&c.enc, &dkv, &c.st_kv);
        for (l, lc) in self.layers.iter_mut().zip(&c.layers).rev() {
            let mut dg = l.fc2.backward(&lc.g, &dx, b * s, true).unwrap();
            dg.iter_mut().zip(&lc.h).for_each(|(v, &h)| *v *= gelu_grad(h));
            let du2 = l.fc1.backward(&lc.u2, &dg, b * s, true).unwrap();
            add_into(&mut dx, &l.ln2.backward(&lc.x1, &du2, &lc.st2));
            let mut du1 = vec![T::zero(); b * s * d];
            {
                let (w, mut g) = l.attn.split();
                for i in 0..b {
                    let r = i * s * d..(i + 1) * s * d;
                    let u = &lc.u1[r.clone()];
                    let (a, bb) = attention_backward(u, u, s, s, d, &w, &lc.attn[i], &dx[r.clone()], &mut g);
                    du1[r].iter_mut().zip(a.iter().zip(&bb)).for_each(|(o, (&p, &q))| *o = p + q);
                }
            }
            add_into(&mut dx, &l.ln1.backward(&lc.x, &du1, &lc.st1));
        }
        for row in dx.chunks_exact(s * d) {
            add_into(self.pos.grad.data_mut(), row);
        }
        self.embed.backward(&c.x, &dx, b * s, false);
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.embed.params().into();
        v.push(&self.pos);
        for l in &self.layers {
            v.extend(l.ln1.params());
            v.extend(l.attn.params());
            v.extend(l.ln2.params());
            v.extend(l.fc1.params());
            v.extend(l.fc2.params());
        }
        v.extend(self.ln_kv.params());
        v.push(&self.queries);
        v.extend(self.cross.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.embed.params_mut().into();
        v.push(&mut self.pos);
        for l in &mut self.layers {
            v.extend(l.ln1.params_mut());
            v.extend(l.attn.params_mut());
            v.extend(l.ln2.params_mut());
            v.extend(l.fc1.params_mut());
            v.extend(l.fc2.params_mut());
        }
        v.extend(self.ln_kv.params_mut());
        v.push(&mut self.queries);
        v.extend(self.cross.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    fn cast<U: Scalar>(&self) -> AttnPilot<U> {
        AttnPilot {
            seq: self.seq,
            d: self.d,
            embed: self.embed.cast(),
            pos: self.pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    ln1: l.ln1.cast(),
                    attn: l.attn.cast(),
                    ln2: l.ln2.cast(),
                    fc1: l.fc1.cast(),
                    fc2: l.fc2.cast(),
                })
                .collect(),
            ln_kv: self.ln_kv.cast(),
            queries: self.queries.cast(),
            cross: self.cross.cast(),
            head: self.head.cast(),
        }
    }
}

// ---------------------------------------------------------------- wrapper

#[derive(Clone, Debug)]
enum Net<T> {
    Mlp(MlpPilot<T>),
    Conv(ConvPilot<T>),
    Attention(AttnPilot<T>),
}

/// A pilot translator of any kind.
#[derive(Clone, Debug)]
pub struct PilotModel<T = f32> {
    cfg: PilotConfig,
    net: Net<T>,
}

pub enum PilotCache<T> {
    Mlp(MlpCache<T>),
    Conv(ConvCache<T>),
    Attention(AttnPilotCache<T>),
}

impl<T: Scalar> PilotModel<T> {
    pub fn new<R: Rng + ?Sized>(cfg: PilotConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let net = match cfg.kind {
            PilotKind::Mlp => Net::Mlp(MlpPilot::new(&cfg, rng)),
            PilotKind::Conv => Net::Conv(ConvPilot::new(&cfg, rng)),
            PilotKind::Attention => Net::Attention(AttnPilot::new(&cfg, rng)),
        };
        Ok(Self { cfg, net })
    }

    pub fn config(&self) -> &PilotConfig {
        &self.cfg
    }

    pub fn cast<U: Scalar>(&self) -> PilotModel<U> {
        let net = match &self.net {
            Net::Mlp(m) => Net::Mlp(m.cast()),
            Net::Conv(m) => Net::Conv(m.cast()),
            Net::Attention(m) => Net::Attention(m.cast()),
        };
        PilotModel { cfg: self.cfg.clone(), net }
    }
}

impl<T: Scalar> Parameterized<T> for PilotModel<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match &self.net {
            Net::Mlp(m) => m.params(),
            Net::Conv(m) => m.params(),
            Net::Attention(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match &mut self.net {
            Net::Mlp(m) => m.params_mut(),
            Net::Conv(m) => m.params_mut(),
            Net::Attention(m) => m.params_mut(),
        }
    }
}

impl<T: Scalar> Translate<T> for PilotModel<T> {
    type Cache = PilotCache<T>;

    fn in_len(&self) -> usize {
        self.cfg.seq() * TOKEN
    }

    fn out_len(&self) -> usize {
        self.cfg.out_seq() * TOKEN
    }

    /// Pilots carry no dropout; `_dropout_rng` is ignored.
    fn forward(&self, x: &[T], batch: usize, _dropout_rng: Option<&mut dyn RngCore>) -> (Vec<T>, PilotCache<T>) {
        assert_eq!(x.len(), batch * self.in_len(), "pilot input size");
        match &self.net {
            Net::Mlp(m) => {
                let (y, c) = m.forward(x, batch);
                (y, PilotCache::Mlp(c))
            }
            Net::Conv(m) => {
                let (y, c) = m.forward(x, batch);
                (y, PilotCache::Conv(c))
            }
            Net::Attention(m) => {
                let (y, c) = m.forward(x, batch);
                (y, PilotCache::Attention(c))
            }
        }
    }

    fn backward(&mut self, cache: &PilotCache<T>, dy: &[T]) {
        match (&mut self.net, cache) {
            (Net::Mlp(m), PilotCache::Mlp(c)) => m.backward(c, dy),
            (Net::Conv(m), PilotCache::Conv(c)) => m.backward(c, dy),
            (Net::Attention(m), PilotCache::Attention(c)) => m.backward(c, dy),
            _ => panic!("pilot cache does not match the model kind"),
        }
    }

    fn flops(&self) -> u64 {
        self.cfg.flops()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;
    use crate::nn::layers::mse;
    use crate::rng::stream_rng;

    const BUDGET: u64 = 20_000_000;

    #[test]
    fn all_kinds_hit_a_shared_budget() {
        let flops: Vec<u64> = PilotKind::ALL
            .iter()
            .map(|&k| {
                let m: PilotModel = build_pilot(k, 6, BUDGET, &mut stream_rng(0, &[])).unwrap();
                let f = flops_estimate(&m);
                assert!((f as f64 - BUDGET as f64).abs() <= 0.1 * BUDGET as f64, "{k}: {f}");
                f
            })
            .collect();
        let (lo, hi) = (*flops.iter().min().unwrap() as f64, *flops.iter().max().unwrap() as f64);
        assert!(hi / lo <= 1.2);
    }

    #[test]
    fn shapes_follow_the_token_contract() {
        for k in PilotKind::ALL {
            let m: PilotModel = build_pilot(k, 6, BUDGET, &mut stream_rng(1, &[])).unwrap();
            let x: Vec<f32> = (0..2 * 648).map(|i| (i as f32 * 0.01).sin()).collect();
            let y = m.predict(&x, 2);
            assert_eq!(y.len(), 2 * 36 * 9, "{k}");
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn flops_grow_with_width() {
        for kind in PilotKind::ALL {
            let f = |width| PilotConfig { kind, channels: 6, width, depth: 2 }.flops();
            for w in [1, 2, 8, 64, 300] {
                assert!(f(w + 1) > f(w), "{kind} at width {w}");
            }
        }
    }

    #[test]
    fn mlp_flops_are_per_dense_sums() {
        let c = PilotConfig { kind: PilotKind::Mlp, channels: 2, width: 5, depth: 2 };
        assert_eq!(c.flops(), 2 * (72 * 5 + 5 * 5 + 5 * 36));
    }

    #[test]
    fn unreachable_budget_names_nearest() {
        let err = solve_width(PilotKind::Mlp, 6, 3, 10).unwrap_err().to_string();
        assert!(err.contains("nearest achievable"), "{err}");
    }

    fn gradcheck(kind: PilotKind) {
        let cfg = PilotConfig { kind, channels: 2, width: 4, depth: 2 };
        let base: PilotModel<f64> = PilotModel::new(cfg, &mut stream_rng(5, &[])).unwrap();
        let b = 2;
        let x: Vec<f64> = (0..b * base.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let t: Vec<f64> = (0..b * base.out_len()).map(|i| (i as f64 * 0.13).cos() * 0.5).collect();
        let f = |w: &[f64]| {
            let mut m = base.clone();
            m.set_flat_values(w).unwrap();
            let (y, cache) = m.forward(&x, b, None);
            let n = y.len() as f64;
            let dy: Vec<f64> = y.iter().zip(&t).map(|(a, b)| 2.0 * (a - b) / n).collect();
            m.zero_grad();
            m.backward(&cache, &dy);
            (mse(&y, &t), m.flat_grads())
        };
        let r = finite_diff_check(f, &base.flat_values(), 150, 2).unwrap();
        assert!(r.checked >= 50);
        assert!(r.max_rel_error < 1e-3, "{kind}: {r:?}");
    }

    #[test]
    fn mlp_pilot_gradients() {
        gradcheck(PilotKind::Mlp);
    }

    #[test]
    fn conv_pilot_gradients() {
        gradcheck(PilotKind::Conv);
    }

    #[test]
    fn attention_pilot_gradients() {
        gradcheck(PilotKind::Attention);
    }
}
