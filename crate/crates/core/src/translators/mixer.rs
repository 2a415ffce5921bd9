//! MLP-Mixer translator.
//!
//! Activations live in a sequence-major `[S, B, H]` layout so that token mixing
//! (a dense over `S`) and channel mixing (a dense over `H`) are each one matrix product
//! for the whole batch.
//!
//! ```text
//! stem    dense 9→H per token, then dense S→S across tokens
//! block   x += drop(W2·gelu(W1·LN(x)))        token mixing, hidden D_S
//!         x += drop(gelu(LN(x)·W3ᵀ)·W4ᵀ)      channel mixing, hidden D_C
//! head    LN, then either dense S→S_out across tokens and H→9 per token (conv target)
//!         or one dense from the flattened S·H features (any other target)
//! ```

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{dense_flops, dense_init, Translate};
use crate::error::{ensure, KtError, Result};
use crate::host::TargetVariant;
use crate::nn::layers::{
    apply_mask, dense_backward, dense_forward, dropout_mask, gelu_with_grad, layer_norm_backward,
    layer_norm_forward, seq_dense_backward, seq_dense_forward,
};
use crate::nn::{Param, Parameterized, Scalar, Tensor};

const TOKEN: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Base,
    Large,
    Wide,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Small, Preset::Base, Preset::Large, Preset::Wide];

    /// Published trainable-parameter counts, in millions.
    pub fn reference_millions(self) -> f64 {
        match self {
            Preset::Small => 1.32,
            Preset::Base => 2.61,
            Preset::Large => 3.90,
            Preset::Wide => 4.11,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Small => "small",
            Preset::Base => "base",
            Preset::Large => "large",
            Preset::Wide => "wide",
        })
    }
}

impl FromStr for Preset {
    type Err = KtError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            "large" => Ok(Preset::Large),
            "wide" => Ok(Preset::Wide),
            _ => Err(KtError::Config(format!(
                "unknown model preset `{s}` (expected small, base, large or wide)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerConfig {
    pub num_layers: usize,
    /// Input tokens, `2·C²`.
    pub seq_len: usize,
    pub hidden: usize,
    /// Token-mixing MLP width (D_S).
    pub token_mlp_dim: usize,
    /// Channel-mixing MLP width (D_C).
    pub channel_mlp_dim: usize,
    pub dropout: f64,
    /// Block the translator produces parameters for.
    #[serde(default = "default_target")]
    pub target: TargetVariant,
}

fn default_target() -> TargetVariant {
    TargetVariant::SmallConv
}

impl MixerConfig {
    pub fn preset(p: Preset, channels: usize) -> Self {
        let (num_layers, hidden, channel_mlp_dim) = match p {
            Preset::Small => (8, 128, 512),
            Preset::Base => (16, 128, 512),
            Preset::Large => (24, 128, 512),
            Preset::Wide => (2, 512, 2048),
        };
        Self {
            num_layers,
            seq_len: 2 * channels * channels,
            hidden,
            token_mlp_dim: 256,
            channel_mlp_dim,
            dropout: 0.0,
            target: TargetVariant::SmallConv,
        }
    }

    /// Channel count implied by the sequence length.
    pub fn channels(&self) -> usize {
        (self.seq_len / 2).isqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        ensure!(
            2 * c * c == self.seq_len && c >= 2 && c % 2 == 0,
            KtError::Config(format!("seq_len {} is not 2·C² for an even C", self.seq_len))
        );
        ensure!(
            self.hidden >= 1 && self.token_mlp_dim >= 1 && self.channel_mlp_dim >= 1,
            KtError::Config("mixer widths must be >= 1".into())
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            KtError::Config(format!("dropout {} outside [0, 1)", self.dropout))
        );
        ensure!(
            self.target != TargetVariant::LargeConv,
            KtError::Config("translator target must be a compressed block".into())
        );
        Ok(())
    }

    /// Output tokens of the conv head (`C²`).
    pub fn out_seq(&self) -> usize {
        let c = self.channels();
        c * c
    }

    pub fn out_len(&self) -> usize {
        self.target.target_len(self.channels())
    }
}

/// Exact trainable-parameter count of a mixer built from `cfg`.
pub fn count_params(cfg: &MixerConfig) -> usize {
    let (s, h, ds, dc) = (cfg.seq_len, cfg.hidden, cfg.token_mlp_dim, cfg.channel_mlp_dim);
    let stem = TOKEN * h + h + s * s + s;
    let layer = 2 * h + (ds * s + ds + s * ds + s) + 2 * h + (dc * h + dc + h * dc + h);
    let head = match cfg.target {
        TargetVariant::SmallConv => {
            let so = cfg.out_seq();
            so * s + so + TOKEN * h + TOKEN
        }
        _ => cfg.out_len() * s * h + cfg.out_len(),
    };
    stem + cfg.num_layers * layer + 2 * h + head
}

#[derive(Clone, Debug)]
struct MixerLayer<T> {
    ln1_g: Param<T>,
    ln1_b: Param<T>,
    tok_w1: Param<T>,
    tok_b1: Param<T>,
    tok_w2: Param<T>,
    tok_b2: Param<T>,
    ln2_g: Param<T>,
    ln2_b: Param<T>,
    ch_w1: Param<T>,
    ch_b1: Param<T>,
    ch_w2: Param<T>,
    ch_b2: Param<T>,
}

#[derive(Clone, Debug)]
enum Head<T> {
    Tokens {
        seq_w: Param<T>,
        seq_b: Param<T>,
        ch_w: Param<T>,
        ch_b: Param<T>,
    },
    Flat {
        w: Param<T>,
        b: Param<T>,
    },
}

#[derive(Clone, Debug)]
pub struct Mixer<T = f32> {
    cfg: MixerConfig,
    stem_w: Param<T>,
    stem_b: Param<T>,
    seq_w: Param<T>,
    seq_b: Param<T>,
    layers: Vec<MixerLayer<T>>,
    final_g: Param<T>,
    final_b: Param<T>,
    head: Head<T>,
}

struct LayerCache<T> {
    x_in: Vec<T>,
    stats1: Vec<(T, T)>,
    u1: Vec<T>,
    g1: Vec<T>,
    d1: Vec<T>,
    m1: Option<Vec<T>>,
    x1: Vec<T>,
    stats2: Vec<(T, T)>,
    u2: Vec<T>,
    g2: Vec<T>,
    d2: Vec<T>,
    m2: Option<Vec<T>>,
}

pub struct MixerCache<T> {
    batch: usize,
    xt: Vec<T>,
    a0: Vec<T>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    stats_final: Vec<(T, T)>,
    u: Vec<T>,
    /// Conv head: sequence-dense output. Flat head: batch-major copy of `u`.
    z: Vec<T>,
}

fn ones<T: Scalar>(name: String, n: usize) -> Param<T> {
    Param::new(name, Tensor::filled(&[n], T::one()))
}

fn zeros<T: Scalar>(name: String, n: usize) -> Param<T> {
    Param::new(name, Tensor::zeros(&[n]))
}

fn gelu_pair<T: Scalar>(h: &[T]) -> (Vec<T>, Vec<T>) {
    h.iter().map(|&v| gelu_with_grad(v)).unzip()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Mixer<T> {
    pub fn new<R: Rng + ?Sized>(cfg: MixerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (s, h, ds, dc) = (cfg.seq_len, cfg.hidden, cfg.token_mlp_dim, cfg.channel_mlp_dim);
        let w = |name: &str, shape: &[usize], fan_in: usize, rng: &mut R| Param::new(name, dense_init(shape, fan_in, rng));
        let stem_w = w("stem.w", &[h, TOKEN], TOKEN, rng);
        let stem_b = zeros("stem.b".into(), h);
        let seq_w = w("stem.seq_w", &[s, s], s, rng);
        let seq_b = zeros("stem.seq_b".into(), s);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let n = |x: &str| format!("layer{l}.{x}");
            layers.push(MixerLayer {
                ln1_g: ones(n("ln1.g"), h),
                ln1_b: zeros(n("ln1.b"), h),
                tok_w1: w(&n("tok.w1"), &[ds, s], s, rng),
                tok_b1: zeros(n("tok.b1"), ds),
                tok_w2: w(&n("tok.w2"), &[s, ds], ds, rng),
                tok_b2: zeros(n("tok.b2"), s),
                ln2_g: ones(n("ln2.g"), h),
                ln2_b: zeros(n("ln2.b"), h),
                ch_w1: w(&n("ch.w1"), &[dc, h], h, rng),
                ch_b1: zeros(n("ch.b1"), dc),
                ch_w2: w(&n("ch.w2"), &[h, dc], dc, rng),
                ch_b2: zeros(n("ch.b2"), h),
            });
        }
        let head = match cfg.target {
            TargetVariant::SmallConv => {
                let so = cfg.out_seq();
                Head::Tokens {
                    seq_w: w("head.seq_w", &[so, s], s, rng),
                    seq_b: zeros("head.seq_b".into(), so),
                    ch_w: w("head.w", &[TOKEN, h], h, rng),
                    ch_b: zeros("head.b".into(), TOKEN),
                }
            }
            _ => {
                let out = cfg.out_len();
                Head::Flat {
                    w: w("head.w", &[out, s * h], s * h, rng),
                    b: zeros("head.b".into(), out),
                }
            }
        };
        Ok(Self {
            stem_w,
            stem_b,
            seq_w,
            seq_b,
            layers,
            final_g: ones("final_ln.g".into(), h),
            final_b: zeros("final_ln.b".into(), h),
            head,
            cfg,
        })
    }

    pub fn config(&self) -> &MixerConfig {
        &self.cfg
    }

    pub fn cast<U: Scalar>(&self) -> Mixer<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| MixerLayer {
                ln1_g: l.ln1_g.cast(),
                ln1_b: l.ln1_b.cast(),
                tok_w1: l.tok_w1.cast(),
                tok_b1: l.tok_b1.cast(),
                tok_w2: l.tok_w2.cast(),
                tok_b2: l.tok_b2.cast(),
                ln2_g: l.ln2_g.cast(),
                ln2_b: l.ln2_b.cast(),
                ch_w1: l.ch_w1.cast(),
                ch_b1: l.ch_b1.cast(),
                ch_w2: l.ch_w2.cast(),
                ch_b2: l.ch_b2.cast(),
            })
            .collect();
        Mixer {
            cfg: self.cfg.clone(),
            stem_w: self.stem_w.cast(),
            stem_b: self.stem_b.cast(),
            seq_w: self.seq_w.cast(),
            seq_b: self.seq_b.cast(),
            layers,
            final_g: self.final_g.cast(),
            final_b: self.final_b.cast(),
            head: match &self.head {
                Head::Tokens { seq_w, seq_b, ch_w, ch_b } => Head::Tokens {
                    seq_w: seq_w.cast(),
                    seq_b: seq_b.cast(),
                    ch_w: ch_w.cast(),
                    ch_b: ch_b.cast(),
                },
                Head::Flat { w, b } => Head::Flat { w: w.cast(), b: b.cast() },
            },
        }
    }

    fn forward_impl(&self, x: &[T], b: usize, mut rng: Option<&mut dyn RngCore>) -> (Vec<T>, MixerCache<T>) {
        let cfg = &self.cfg;
        let (s, h, ds, dc) = (cfg.seq_len, cfg.hidden, cfg.token_mlp_dim, cfg.channel_mlp_dim);
        assert_eq!(x.len(), b * s * TOKEN, "mixer input size");
        let rows = s * b;
        let p = cfg.dropout;

        // [B, S, 9] → [S, B, 9]
        let mut xt = vec![T::zero(); x.len()];
        for bi in 0..b {
            for si in 0..s {
                let src = &x[(bi * s + si) * TOKEN..(bi * s + si + 1) * TOKEN];
                xt[(si * b + bi) * TOKEN..(si * b + bi + 1) * TOKEN].copy_from_slice(src);
            }
        }
        let mut a0 = vec![T::zero(); rows * h];
        dense_forward(&xt, rows, TOKEN, self.stem_w.value.data(), Some(self.stem_b.value.data()), h, &mut a0);
        let mut xs = vec![T::zero(); rows * h];
        seq_dense_forward(&a0, s, b * h, self.seq_w.value.data(), Some(self.seq_b.value.data()), s, &mut xs);

        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let x_in = xs;
            let mut u1 = vec![T::zero(); rows * h];
            let stats1 = layer_norm_forward(&x_in, h, l.ln1_g.value.data(), l.ln1_b.value.data(), &mut u1);
            let mut h1 = vec![T::zero(); ds * b * h];
            seq_dense_forward(&u1, s, b * h, l.tok_w1.value.data(), Some(l.tok_b1.value.data()), ds, &mut h1);
            let (g1, d1) = gelu_pair(&h1);
            drop(h1);
            let mut v1 = vec![T::zero(); rows * h];
            seq_dense_forward(&g1, ds, b * h, l.tok_w2.value.data(), Some(l.tok_b2.value.data()), s, &mut v1);
            let m1 = match (rng.as_deref_mut(), p > 0.0) {
                (Some(r), true) => {
                    let m = dropout_mask(v1.len(), p, r);
                    apply_mask(&mut v1, &m);
                    Some(m)
                }
                _ => None,
            };
            let mut x1 = x_in.clone();
            add_into(&mut x1, &v1);

            let mut u2 = vec![T::zero(); rows * h];
            let stats2 = layer_norm_forward(&x1, h, l.ln2_g.value.data(), l.ln2_b.value.data(), &mut u2);
            let mut h2 = vec![T::zero(); rows * dc];
            dense_forward(&u2, rows, h, l.ch_w1.value.data(), Some(l.ch_b1.value.data()), dc, &mut h2);
            let (g2, d2) = gelu_pair(&h2);
            drop(h2);
            let mut v2 = vec![T::zero(); rows * h];
            dense_forward(&g2, rows, dc, l.ch_w2.value.data(), Some(l.ch_b2.value.data()), h, &mut v2);
            let m2 = match (rng.as_deref_mut(), p > 0.0) {
                (Some(r), true) => {
                    let m = dropout_mask(v2.len(), p, r);
                    apply_mask(&mut v2, &m);
                    Some(m)
                }
                _ => None,
            };
            let mut x2 = x1.clone();
            add_into(&mut x2, &v2);
            xs = x2;
            caches.push(LayerCache { x_in, stats1, u1, g1, d1, m1, x1, stats2, u2, g2, d2, m2 });
        }

        let mut u = vec![T::zero(); rows * h];
        let stats_final = layer_norm_forward(&xs, h, self.final_g.value.data(), self.final_b.value.data(), &mut u);
        let (y, z) = match &self.head {
            Head::Tokens { seq_w, seq_b, ch_w, ch_b } => {
                let so = cfg.out_seq();
                let mut z = vec![T::zero(); so * b * h];
                seq_dense_forward(&u, s, b * h, seq_w.value.data(), Some(seq_b.value.data()), so, &mut z);
                let mut yt = vec![T::zero(); so * b * TOKEN];
                dense_forward(&z, so * b, h, ch_w.value.data(), Some(ch_b.value.data()), TOKEN, &mut yt);
                // [S_out, B, 9] → [B, S_out, 9]
                let mut y = vec![T::zero(); yt.len()];
                for si in 0..so {
                    for bi in 0..b {
                        y[(bi * so + si) * TOKEN..(bi * so + si + 1) * TOKEN]
                            .copy_from_slice(&yt[(si * b + bi) * TOKEN..(si * b + bi + 1) * TOKEN]);
                    }
                }
                (y, z)
            }
            Head::Flat { w, b: bias } => {
                let out = cfg.out_len();
                let ub = seq_to_batch(&u, s, b, h);
                let mut y = vec![T::zero(); b * out];
                dense_forward(&ub, b, s * h, w.value.data(), Some(bias.value.data()), out, &mut y);
                (y, ub)
            }
        };
        let cache = MixerCache {
            batch: b,
            xt,
            a0,
            layers: caches,
            x_final: xs,
            stats_final,
            u,
            z,
        };
        (y, cache)
    }

    fn backward_impl(&mut self, cache: &MixerCache<T>, dy: &[T]) {
        let (s, h, ds, dc) = (
            self.cfg.seq_len,
            self.cfg.hidden,
            self.cfg.token_mlp_dim,
            self.cfg.channel_mlp_dim,
        );
        let b = cache.batch;
        let rows = s * b;
        let mut du = vec![T::zero(); rows * h];
        match &mut self.head {
            Head::Tokens { seq_w, seq_b, ch_w, ch_b } => {
                let so = self.cfg.out_seq();
                let mut dyt = vec![T::zero(); dy.len()];
                for si in 0..so {
                    for bi in 0..b {
                        dyt[(si * b + bi) * TOKEN..(si * b + bi + 1) * TOKEN]
                            .copy_from_slice(&dy[(bi * so + si) * TOKEN..(bi * so + si + 1) * TOKEN]);
                    }
                }
                let mut dz = vec![T::zero(); so * b * h];
                dense_backward(
                    &cache.z,
                    &dyt,
                    so * b,
                    h,
                    TOKEN,
                    ch_w.value.data(),
                    ch_w.grad.data_mut(),
                    Some(ch_b.grad.data_mut()),
                    Some(&mut dz),
                );
                seq_dense_backward(
                    &cache.u,
                    &dz,
                    s,
                    b * h,
                    so,
                    seq_w.value.data(),
                    seq_w.grad.data_mut(),
                    Some(seq_b.grad.data_mut()),
                    Some(&mut du),
                );
            }
            Head::Flat { w, b: bias } => {
                let out = self.cfg.out_len();
                let mut dub = vec![T::zero(); b * s * h];
                dense_backward(
                    &cache.z,
                    dy,
                    b,
                    s * h,
                    out,
                    w.value.data(),
                    w.grad.data_mut(),
                    Some(bias.grad.data_mut()),
                    Some(&mut dub),
                );
                du = batch_to_seq(&dub, s, b, h);
            }
        }
        let mut dx = vec![T::zero(); rows * h];
        layer_norm_backward(
            &cache.x_final,
            &du,
            h,
            &cache.stats_final,
            self.final_g.value.data(),
            self.final_g.grad.data_mut(),
            self.final_b.grad.data_mut(),
            &mut dx,
        );

        for (l, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            // channel mixing
            let mut dv2 = dx.clone();
            if let Some(m) = &c.m2 {
                apply_mask(&mut dv2, m);
            }
            let mut dg2 = vec![T::zero(); rows * dc];
            dense_backward(
                &c.g2,
                &dv2,
                rows,
                dc,
                h,
                l.ch_w2.value.data(),
                l.ch_w2.grad.data_mut(),
                Some(l.ch_b2.grad.data_mut()),
                Some(&mut dg2),
            );
            apply_mask(&mut dg2, &c.d2);
            let mut du2 = vec![T::zero(); rows * h];
            dense_backward(
                &c.u2,
                &dg2,
                rows,
                h,
                dc,
                l.ch_w1.value.data(),
                l.ch_w1.grad.data_mut(),
                Some(l.ch_b1.grad.data_mut()),
                Some(&mut du2),
            );
            drop(dg2);
            let mut dln = vec![T::zero(); rows * h];
            layer_norm_backward(
                &c.x1,
                &du2,
                h,
                &c.stats2,
                l.ln2_g.value.data(),
                l.ln2_g.grad.data_mut(),
                l.ln2_b.grad.data_mut(),
                &mut dln,
            );
            add_into(&mut dx, &dln);

            // token mixing
            let mut dv1 = dx.clone();
            if let Some(m) = &c.m1 {
                apply_mask(&mut dv1, m);
            }
            let mut dg1 = vec![T::zero(); ds * b * h];
            seq_dense_backward(
                &c.g1,
                &dv1,
                ds,
                b * h,
                s,
                l.tok_w2.value.data(),
                l.tok_w2.grad.data_mut(),
                Some(l.tok_b2.grad.data_mut()),
                Some(&mut dg1),
            );
            apply_mask(&mut dg1, &c.d1);
            let mut du1 = vec![T::zero(); rows * h];
            seq_dense_backward(
                &c.u1,
                &dg1,
                s,
                b * h,
                ds,
                l.tok_w1.value.data(),
                l.tok_w1.grad.data_mut(),
                Some(l.tok_b1.grad.data_mut()),
                Some(&mut du1),
            );
            layer_norm_backward(
                &c.x_in,
                &du1,
                h,
                &c.stats1,
                l.ln1_g.value.data(),
                l.ln1_g.grad.data_mut(),
                l.ln1_b.grad.data_mut(),
                &mut dln,
            );
            add_into(&mut dx, &dln);
        }

        let mut da0 = vec![T::zero(); rows * h];
        seq_dense_backward(
            &cache.a0,
            &dx,
            s,
            b * h,
            s,
            self.seq_w.value.data(),
            self.seq_w.grad.data_mut(),
            Some(self.seq_b.grad.data_mut()),
            Some(&mut da0),
        );
        dense_backward(
            &cache.xt,
            &da0,
            rows,
            TOKEN,
            h,
            self.stem_w.value.data(),
            self.stem_w.grad.data_mut(),
            Some(self.stem_b.grad.data_mut()),
            None,
        );
    }
}

/// `[S, B, H]` → `[B, S·H]`.
fn seq_to_batch<T: Scalar>(x: &[T], s: usize, b: usize, h: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for si in 0..s {
        for bi in 0..b {
            out[(bi * s + si) * h..(bi * s + si + 1) * h].copy_from_slice(&x[(si * b + bi) * h..(si * b + bi + 1) * h]);
        }
    }
    out
}

fn batch_to_seq<T: Scalar>(x: &[T], s: usize, b: usize, h: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for si in 0..s {
        for bi in 0..b {
            out[(si * b + bi) * h..(si * b + bi + 1) * h].copy_from_slice(&x[(bi * s + si) * h..(bi * s + si + 1) * h]);
        }
    }
    out
}

impl<T: Scalar> Parameterized<T> for Mixer<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.stem_w, &self.stem_b, &self.seq_w, &self.seq_b];
        for l in &self.layers {
            v.extend([
                &l.ln1_g, &l.ln1_b, &l.tok_w1, &l.tok_b1, &l.tok_w2, &l.tok_b2, &l.ln2_g, &l.ln2_b, &l.ch_w1,
                &l.ch_b1, &l.ch_w2, &l.ch_b2,
            ]);
        }
        v.extend([&self.final_g, &self.final_b]);
        match &self.head {
            Head::Tokens { seq_w, seq_b, ch_w, ch_b } => v.extend([seq_w, seq_b, ch_w, ch_b]),
            Head::Flat { w, b } => v.extend([w, b]),
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.stem_w, &mut self.stem_b, &mut self.seq_w, &mut self.seq_b];
        for l in &mut self.layers {
            v.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.tok_w1,
                &mut l.tok_b1,
                &mut l.tok_w2,
                &mut l.tok_b2,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.ch_w1,
                &mut l.ch_b1,
                &mut l.ch_w2,
                &mut l.ch_b2,
            ]);
        }
        v.extend([&mut self.final_g, &mut self.final_b]);
        match &mut self.head {
            Head::Tokens { seq_w, seq_b, ch_w, ch_b } => v.extend([seq_w, seq_b, ch_w, ch_b]),
            Head::Flat { w, b } => v.extend([w, b]),
        }
        v
    }
}

impl<T: Scalar> Translate<T> for Mixer<T> {
    type Cache = MixerCache<T>;

    fn in_len(&self) -> usize {
        self.cfg.seq_len * TOKEN
    }

    fn out_len(&self) -> usize {
        self.cfg.out_len()
    }

    fn forward(&self, x: &[T], batch: usize, dropout_rng: Option<&mut dyn RngCore>) -> (Vec<T>, MixerCache<T>) {
        self.forward_impl(x, batch, dropout_rng)
    }

    fn backward(&mut self, cache: &MixerCache<T>, dy: &[T]) {
        self.backward_impl(cache, dy)
    }

    /// Dense layers only; layer norm, GELU and residual additions are not counted.
    fn flops(&self) -> u64 {
        let c = &self.cfg;
        let (s, h) = (c.seq_len, c.hidden);
        let stem = dense_flops(s, TOKEN, h) + dense_flops(h, s, s);
        let layer = dense_flops(h, s, c.token_mlp_dim)
            + dense_flops(h, c.token_mlp_dim, s)
            + dense_flops(s, h, c.channel_mlp_dim)
            + dense_flops(s, c.channel_mlp_dim, h);
        let head = match c.target {
            TargetVariant::SmallConv => dense_flops(h, s, c.out_seq()) + dense_flops(c.out_seq(), h, TOKEN),
            _ => dense_flops(1, s * h, c.out_len()),
        };
        stem + c.num_layers as u64 * layer + head
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;
    use crate::nn::layers::mse;
    use crate::nn::OptimizerState;
    use crate::rng::stream_rng;

    fn tiny(target: TargetVariant) -> MixerConfig {
        MixerConfig {
            num_layers: 1,
            seq_len: 8,
            hidden: 8,
            token_mlp_dim: 6,
            channel_mlp_dim: 10,
            dropout: 0.0,
            target,
        }
    }

    #[test]
    fn presets_match_published_layout() {
        for p in Preset::ALL {
            let c = MixerConfig::preset(p, 6);
            assert_eq!(c.seq_len, 72);
            assert_eq!(c.token_mlp_dim, 256);
        }
        assert_eq!(count_params(&MixerConfig::preset(Preset::Small, 6)), 1_365_909);
    }

    #[test]
    fn preset_counts_within_ten_percent_of_published() {
        for p in Preset::ALL {
            let n = count_params(&MixerConfig::preset(p, 6)) as f64 / 1e6;
            let r = p.reference_millions();
            assert!((n - r).abs() <= 0.1 * r, "{p}: {n:.3}M vs {r}M");
        }
    }

    #[test]
    fn toy_count_is_closed_form() {
        let cfg = tiny(TargetVariant::SmallConv);
        // stem 9·8+8 + 8·8+8; layer 2·8 + (6·8+6+8·6+8) + 2·8 + (10·8+10+8·10+8); final 16; head 4·8+4 + 9·8+9
        let expect = (72 + 8 + 64 + 8) + (16 + 110 + 16 + 178) + 16 + (36 + 81);
        assert_eq!(count_params(&cfg), expect);
        let m: Mixer<f64> = Mixer::new(cfg, &mut stream_rng(0, &[])).unwrap();
        assert_eq!(m.param_count(), expect);
    }

    #[test]
    fn one_adam_step_touches_every_counted_value() {
        let cfg = tiny(TargetVariant::SmallConv);
        let mut m: Mixer<f64> = Mixer::new(cfg.clone(), &mut stream_rng(1, &[])).unwrap();
        let x: Vec<f64> = (0..2 * 72).map(|i| (i as f64 * 0.3).sin()).collect();
        let (y, cache) = m.forward(&x, 2, None);
        let dy: Vec<f64> = y.iter().map(|v| v - 0.5).collect();
        m.zero_grad();
        m.backward(&cache, &dy);
        let before = m.flat_values();
        let grads = m.flat_grads();
        let mut opt = OptimizerState::new(m.params(), 1e-3);
        assert_eq!(opt.m.iter().map(|t| t.len()).sum::<usize>(), count_params(&cfg));
        opt.adam_step(&mut m.params_mut()).unwrap();
        let after = m.flat_values();
        assert_eq!(after.len(), count_params(&cfg));
        for i in 0..after.len() {
            assert_eq!(grads[i] != 0.0, before[i] != after[i], "value {i}");
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = MixerConfig::preset(Preset::Small, 6);
        let m: Mixer = Mixer::new(cfg, &mut stream_rng(2, &[])).unwrap();
        let x: Vec<f32> = (0..4 * 648).map(|i| (i as f32 * 0.01).cos() * 0.3).collect();
        let a = m.predict(&x, 4);
        assert_eq!(a.len(), 4 * 36 * 9);
        assert_eq!(a, m.predict(&x, 4));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let m: Mixer<f64> = Mixer::new(tiny(TargetVariant::SmallConv), &mut stream_rng(3, &[])).unwrap();
        let x: Vec<f64> = (0..3 * 72).map(|i| (i as f64 * 0.7).sin()).collect();
        let y = m.predict(&x, 3);
        let mut xp = x[72..144].to_vec();
        xp.extend_from_slice(&x[..72]);
        xp.extend_from_slice(&x[144..]);
        let yp = m.predict(&xp, 3);
        let o = 36;
        for (a, b) in yp[..o].iter().zip(&y[o..2 * o]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Per-token biases that feed straight into a layer norm over the hidden axis are
    /// cancelled by it, so their gradient is identically zero; those are left out.
    fn live_coordinates(m: &Mixer<f64>) -> Vec<usize> {
        let mut idx = Vec::new();
        let mut off = 0;
        for p in m.params() {
            let n = p.value.len();
            if !(p.name == "stem.seq_b" || p.name.ends_with("tok.b2")) {
                idx.extend(off..off + n);
            }
            off += n;
        }
        idx
    }

    fn gradcheck(cfg: MixerConfig, dropout: bool) {
        let base: Mixer<f64> = Mixer::new(cfg, &mut stream_rng(4, &[])).unwrap();
        let b = 2;
        let x: Vec<f64> = (0..b * base.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let t: Vec<f64> = (0..b * base.out_len()).map(|i| (i as f64 * 0.11).cos() * 0.5).collect();
        let full = base.flat_values();
        let live = live_coordinates(&base);
        let f = |w: &[f64]| {
            let mut m = base.clone();
            let mut v = full.clone();
            live.iter().zip(w).for_each(|(&i, &x)| v[i] = x);
            m.set_flat_values(&v).unwrap();
            let mut rng = stream_rng(9, &[]);
            let r: Option<&mut dyn RngCore> = if dropout { Some(&mut rng) } else { None };
            let (y, cache) = m.forward(&x, b, r);
            let loss = mse(&y, &t);
            let n = y.len() as f64;
            let dy: Vec<f64> = y.iter().zip(&t).map(|(a, b)| 2.0 * (a - b) / n).collect();
            m.zero_grad();
            m.backward(&cache, &dy);
            let g = m.flat_grads();
            (loss, live.iter().map(|&i| g[i]).collect())
        };
        let point: Vec<f64> = live.iter().map(|&i| full[i]).collect();
        let r = finite_diff_check(f, &point, 200, 1).unwrap();
        assert!(r.checked >= 50);
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn cancelled_biases_have_zero_gradient() {
        let mut m: Mixer<f64> = Mixer::new(tiny(TargetVariant::SmallConv), &mut stream_rng(4, &[])).unwrap();
        let x: Vec<f64> = (0..2 * 72).map(|i| (i as f64 * 0.37).sin()).collect();
        let (y, cache) = m.forward(&x, 2, None);
        m.zero_grad();
        m.backward(&cache, &y);
        for p in m.params() {
            if p.name == "stem.seq_b" || p.name.ends_with("tok.b2") {
                assert!(p.grad.data().iter().all(|g| g.abs() < 1e-12), "{}", p.name);
            }
        }
    }

    #[test]
    fn tiny_mixer_gradients_match_central_differences() {
        gradcheck(tiny(TargetVariant::SmallConv), false);
        gradcheck(MixerConfig { dropout: 0.3, ..tiny(TargetVariant::SmallConv) }, true);
        gradcheck(tiny(TargetVariant::MlpBlock), false);
    }

    #[test]
    fn flops_of_tiny_block_are_hand_summed() {
        let m: Mixer<f64> = Mixer::new(tiny(TargetVariant::SmallConv), &mut stream_rng(0, &[])).unwrap();
        let expect = 2 * (8 * 9 * 8 + 8 * 8 * 8)
            + 2 * (8 * 8 * 6 + 8 * 6 * 8 + 8 * 8 * 10 + 8 * 10 * 8)
            + 2 * (8 * 8 * 4 + 4 * 8 * 9);
        assert_eq!(m.flops(), expect as u64);
    }
}
