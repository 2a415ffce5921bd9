//! The host classifier whose middle block is translated.
//!
//! ```text
//! stem:   conv 1→C (3×3, pad 1) → BN → ReLU → 2×2 max-pool          (C×14×14)
//! slot:   residual block chosen by TargetVariant                     (C×14×14)
//! head:   ReLU → global average pool → dense C→10
//! ```
//!
//! Activations are channel-major (`C×N×H×W`) throughout.

use sha2::{Digest, Sha256};

use super::params::{
    AttnBlockParams, ConvTensor4, HostSpec, LargeBlockParams, MlpBlockParams, SmallBlockParams,
    TargetBlockParams, TargetVariant, IMAGE_SIDE, NUM_CLASSES,
};
use crate::error::{ensure, KtError, Result};
use crate::nn::attention::{attention_backward, attention_forward, AttnCache, AttnGrads, AttnWeights};
use crate::nn::conv::{
    batch_norm_backward, batch_norm_forward, conv_backward_cnhw, conv_forward_cnhw,
    global_avg_pool, global_avg_pool_backward, max_pool2_backward, max_pool2_forward, BnCache,
    ConvGeom,
};
use crate::nn::layers::{dense_backward, dense_forward, relu_backward_inplace, relu_inplace};
use crate::nn::{gemm, Param, Parameterized, Scalar, Tensor};
use crate::rng::{fan_in_uniform, stream_rng, streams};

const POOLED: usize = IMAGE_SIDE / 2;
const POOLED_PIXELS: usize = POOLED * POOLED;

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn new(prefix: &str, c: usize) -> Self {
        Self {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::filled(&[c], T::one())),
            beta: Param::new(format!("{prefix}.beta"), Tensor::zeros(&[c])),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::filled(&[c], T::one()),
        }
    }

    fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }

    fn forward(&self, x: &[T], c: usize, train: bool, y: &mut [T]) -> (BnCache<T>, Option<(Vec<T>, Vec<T>)>) {
        let mut rm = self.running_mean.data().to_vec();
        let mut rv = self.running_var.data().to_vec();
        let cache = batch_norm_forward(
            x,
            c,
            self.gamma.value.data(),
            self.beta.value.data(),
            &mut rm,
            &mut rv,
            train,
            y,
        );
        (cache, train.then_some((rm, rv)))
    }

    fn backward(&mut self, dy: &[T], c: usize, cache: &BnCache<T>) -> Vec<T> {
        let mut dx = vec![T::zero(); dy.len()];
        let gamma = self.gamma.value.data().to_vec();
        batch_norm_backward(
            dy,
            c,
            cache,
            &gamma,
            Some((self.gamma.grad.data_mut(), self.beta.grad.data_mut())),
            &mut dx,
        );
        dx
    }
}

#[derive(Clone, Debug)]
pub enum Block<T> {
    Large {
        conv1: Param<T>,
        bn1: BatchNorm<T>,
        conv2: Param<T>,
        bn2: BatchNorm<T>,
    },
    Small {
        conv1: Param<T>,
        conv2: Param<T>,
    },
    Mlp {
        w1: Param<T>,
        w2: Param<T>,
    },
    Attn {
        wq: Param<T>,
        wk: Param<T>,
        wv: Param<T>,
        wo: Param<T>,
    },
}

/// Batch-norm behaviour for the two places batch norm can appear.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub stem_bn_train: bool,
    pub block_bn_train: bool,
}

impl ForwardMode {
    pub const EVAL: Self = Self {
        stem_bn_train: false,
        block_bn_train: false,
    };
    pub const TRAIN: Self = Self {
        stem_bn_train: true,
        block_bn_train: true,
    };
}

/// Which parameters a training run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    /// Only the target slot (the frozen-surroundings step).
    TargetOnly,
    /// Everything except the target slot (frozen block, retrained stem/head).
    AllButTarget,
}

enum BlockCache<T> {
    Large {
        cols1: Vec<T>,
        bn1: BnCache<T>,
        r1: Vec<T>,
        cols2: Vec<T>,
        bn2: BnCache<T>,
    },
    Small {
        cols1: Vec<T>,
        r1: Vec<T>,
        cols2: Vec<T>,
    },
    Mlp {
        r1: Vec<T>,
    },
    Attn {
        tokens: Vec<Vec<T>>,
        caches: Vec<AttnCache<T>>,
    },
}

/// Intermediates of one forward pass, plus updated batch-norm running statistics.
pub struct HostCache<T> {
    n: usize,
    stem_cols: Vec<T>,
    stem_bn: BnCache<T>,
    stem_act: Vec<T>,
    pool_idx: Vec<usize>,
    pooled: Vec<T>,
    block: BlockCache<T>,
    block_out: Vec<T>,
    gap: Vec<T>,
    /// `(stem, block bn1, block bn2)` running statistics produced by train-mode batch norm.
    bn_updates: [Option<(Vec<T>, Vec<T>)>; 3],
}

#[derive(Clone, Debug)]
pub struct HostModel<T = f32> {
    spec: HostSpec,
    pub stem_conv: Param<T>,
    pub stem_bn: BatchNorm<T>,
    pub block: Block<T>,
    pub head_w: Param<T>,
    pub head_b: Param<T>,
}

fn conv_param<T: Scalar>(name: &str, t: &Tensor<f32>) -> Param<T> {
    Param::new(name, t.cast())
}

impl<T: Scalar> HostModel<T> {
    /// Fresh host with fan-in uniform weights, deterministic in `(spec, seed)`.
    pub fn build(spec: HostSpec, seed: u64) -> Result<Self> {
        let spec = HostSpec::new(spec.channels, spec.variant)?;
        let c = spec.channels;
        let mut rng = stream_rng(seed, &[streams::HOST_INIT]);
        let stem_conv = Param::new("stem.conv", fan_in_uniform(&[c, 1, 3, 3], 9, &mut rng));
        let stem_bn = BatchNorm::new("stem.bn", c);
        let block = match spec.variant {
            TargetVariant::LargeConv => Block::Large {
                conv1: Param::new("block.conv1", fan_in_uniform(&[c, c, 3, 3], c * 9, &mut rng)),
                bn1: BatchNorm::new("block.bn1", c),
                conv2: Param::new("block.conv2", fan_in_uniform(&[c, c, 3, 3], c * 9, &mut rng)),
                bn2: BatchNorm::new("block.bn2", c),
            },
            v => Self::block_from_target(&TargetBlockParams::random_init(v, c, &mut rng)?),
        };
        let head_w = Param::new("head.w", fan_in_uniform(&[NUM_CLASSES, c], c, &mut rng));
        let head_b = Param::new("head.b", Tensor::zeros(&[NUM_CLASSES]));
        Ok(Self {
            spec,
            stem_conv,
            stem_bn,
            block,
            head_w,
            head_b,
        })
    }

    fn block_from_target(p: &TargetBlockParams) -> Block<T> {
        match p {
            TargetBlockParams::Small(s) => Block::Small {
                conv1: conv_param("block.conv1", s.conv1.tensor()),
                conv2: conv_param("block.conv2", s.conv2.tensor()),
            },
            TargetBlockParams::Mlp(m) => Block::Mlp {
                w1: conv_param("block.w1", &m.w1),
                w2: conv_param("block.w2", &m.w2),
            },
            TargetBlockParams::Attn(a) => Block::Attn {
                wq: conv_param("block.wq", &a.wq),
                wk: conv_param("block.wk", &a.wk),
                wv: conv_param("block.wv", &a.wv),
                wo: conv_param("block.wo", &a.wo),
            },
        }
    }

    pub fn spec(&self) -> HostSpec {
        self.spec
    }

    pub fn channels(&self) -> usize {
        self.spec.channels
    }

    /// A host with this model's stem and head (and their batch-norm state) around `target`.
    pub fn with_target(&self, target: &TargetBlockParams) -> Result<Self> {
        ensure!(
            target.channels() == self.channels(),
            KtError::Mismatch {
                expected: format!("C={}", self.channels()),
                found: format!("C={}", target.channels()),
            }
        );
        Ok(Self {
            spec: HostSpec::new(self.channels(), target.variant())?,
            stem_conv: self.stem_conv.clone(),
            stem_bn: self.stem_bn.clone(),
            block: Self::block_from_target(target),
            head_w: self.head_w.clone(),
            head_b: self.head_b.clone(),
        })
    }

    /// The two BasicBlock convolutions; batch-norm state is dropped.
    pub fn extract_large_block(&self) -> Result<LargeBlockParams> {
        match &self.block {
            Block::Large { conv1, conv2, .. } => LargeBlockParams::new(
                ConvTensor4::new(conv1.value.cast())?,
                ConvTensor4::new(conv2.value.cast())?,
            ),
            _ => Err(KtError::Invalid(format!(
                "extract_large_block on a {} host",
                self.spec.variant.name()
            ))),
        }
    }

    pub fn insert_large_block(&mut self, p: &LargeBlockParams) -> Result<()> {
        ensure!(
            p.channels() == self.channels(),
            KtError::Mismatch {
                expected: format!("C={}", self.channels()),
                found: format!("C={}", p.channels()),
            }
        );
        match &mut self.block {
            Block::Large { conv1, conv2, .. } => {
                conv1.value = p.conv1.tensor().cast();
                conv2.value = p.conv2.tensor().cast();
                Ok(())
            }
            _ => Err(KtError::Invalid("insert_large_block on a non-large host".into())),
        }
    }

    /// Current target-slot parameters of a compressed host.
    pub fn target_params(&self) -> Result<TargetBlockParams> {
        let c = self.channels();
        let ts: Vec<Tensor<f32>> = match &self.block {
            Block::Large { .. } => {
                return Err(KtError::Invalid("target_params on a large host".into()))
            }
            Block::Small { conv1, conv2 } => vec![conv1.value.cast(), conv2.value.cast()],
            Block::Mlp { w1, w2 } => vec![w1.value.cast(), w2.value.cast()],
            Block::Attn { wq, wk, wv, wo } => {
                vec![wq.value.cast(), wk.value.cast(), wv.value.cast(), wo.value.cast()]
            }
        };
        TargetBlockParams::from_tensors(self.spec.variant, c, ts)
    }

    pub fn cast<U: Scalar>(&self) -> HostModel<U> {
        HostModel {
            spec: self.spec,
            stem_conv: self.stem_conv.cast(),
            stem_bn: self.stem_bn.cast(),
            block: match &self.block {
                Block::Large { conv1, bn1, conv2, bn2 } => Block::Large {
                    conv1: conv1.cast(),
                    bn1: bn1.cast(),
                    conv2: conv2.cast(),
                    bn2: bn2.cast(),
                },
                Block::Small { conv1, conv2 } => Block::Small {
                    conv1: conv1.cast(),
                    conv2: conv2.cast(),
                },
                Block::Mlp { w1, w2 } => Block::Mlp {
                    w1: w1.cast(),
                    w2: w2.cast(),
                },
                Block::Attn { wq, wk, wv, wo } => Block::Attn {
                    wq: wq.cast(),
                    wk: wk.cast(),
                    wv: wv.cast(),
                    wo: wo.cast(),
                },
            },
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    fn block_params(&self) -> Vec<&Param<T>> {
        match &self.block {
            Block::Large { conv1, bn1, conv2, bn2 } => {
                vec![conv1, &bn1.gamma, &bn1.beta, conv2, &bn2.gamma, &bn2.beta]
            }
            Block::Small { conv1, conv2 } => vec![conv1, conv2],
            Block::Mlp { w1, w2 } => vec![w1, w2],
            Block::Attn { wq, wk, wv, wo } => vec![wq, wk, wv, wo],
        }
    }

    fn block_params_mut(&mut self) -> Vec<&mut Param<T>> {
        match &mut self.block {
            Block::Large { conv1, bn1, conv2, bn2 } => vec![
                conv1,
                &mut bn1.gamma,
                &mut bn1.beta,
                conv2,
                &mut bn2.gamma,
                &mut bn2.beta,
            ],
            Block::Small { conv1, conv2 } => vec![conv1, conv2],
            Block::Mlp { w1, w2 } => vec![w1, w2],
            Block::Attn { wq, wk, wv, wo } => vec![wq, wk, wv, wo],
        }
    }

    fn surround_params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.stem_conv,
            &mut self.stem_bn.gamma,
            &mut self.stem_bn.beta,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn scoped_params_mut(&mut self, scope: Scope) -> Vec<&mut Param<T>> {
        match scope {
            Scope::All => self.params_mut(),
            Scope::TargetOnly => self.block_params_mut(),
            Scope::AllButTarget => self.surround_params_mut(),
        }
    }

    /// All persistent tensors (weights and batch-norm running statistics) in checkpoint order:
    /// stem conv, stem BN (γ, β, mean, var), block tensors, head weight, head bias.
    /// For the large block the order is conv1, bn1 ×4, conv2, bn2 ×4.
    pub fn state_tensors(&self) -> Vec<&Tensor<T>> {
        fn bn<T>(b: &BatchNorm<T>) -> [&Tensor<T>; 4] {
            [&b.gamma.value, &b.beta.value, &b.running_mean, &b.running_var]
        }
        let mut v: Vec<&Tensor<T>> = vec![&self.stem_conv.value];
        v.extend(bn(&self.stem_bn));
        match &self.block {
            Block::Large { conv1, bn1, conv2, bn2 } => {
                v.push(&conv1.value);
                v.extend(bn(bn1));
                v.push(&conv2.value);
                v.extend(bn(bn2));
            }
            _ => v.extend(self.block_params().into_iter().map(|p| &p.value)),
        }
        v.push(&self.head_w.value);
        v.push(&self.head_b.value);
        v
    }

    fn state_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        fn bn<T>(b: &mut BatchNorm<T>) -> [&mut Tensor<T>; 4] {
            [
                &mut b.gamma.value,
                &mut b.beta.value,
                &mut b.running_mean,
                &mut b.running_var,
            ]
        }
        let mut v: Vec<&mut Tensor<T>> = vec![&mut self.stem_conv.value];
        v.extend(bn(&mut self.stem_bn));
        match &mut self.block {
            Block::Large { conv1, bn1, conv2, bn2 } => {
                v.push(&mut conv1.value);
                v.extend(bn(bn1));
                v.push(&mut conv2.value);
                v.extend(bn(bn2));
            }
            Block::Small { conv1, conv2 } => v.extend([&mut conv1.value, &mut conv2.value]),
            Block::Mlp { w1, w2 } => v.extend([&mut w1.value, &mut w2.value]),
            Block::Attn { wq, wk, wv, wo } => v.extend([
                &mut wq.value,
                &mut wk.value,
                &mut wv.value,
                &mut wo.value,
            ]),
        }
        v.push(&mut self.head_w.value);
        v.push(&mut self.head_b.value);
        v
    }

    /// Overwrites every state tensor from a flat buffer in `state_tensors` order.
    pub fn load_state_flat(&mut self, flat: &[T]) -> Result<()> {
        let total = self.state_len();
        ensure!(flat.len() == total, KtError::shape("load_state_flat", &[total], &[flat.len()]));
        let mut off = 0;
        for t in self.state_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn state_len(&self) -> usize {
        self.state_tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over the raw bytes of every stem and head tensor (including running statistics).
    pub fn surround_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let surround = [
            &self.stem_conv.value,
            &self.stem_bn.gamma.value,
            &self.stem_bn.beta.value,
            &self.stem_bn.running_mean,
            &self.stem_bn.running_var,
            &self.head_w.value,
            &self.head_b.value,
        ];
        for t in surround {
            for v in t.data() {
                h.update(v.f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Digest of the block's tensors, batch-norm statistics included.
    pub fn block_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let all = self.state_tensors();
        // skip stem conv + 4 stem BN tensors at the front and the two head tensors at the back
        for t in &all[5..all.len() - 2] {
            for v in t.data() {
                h.update(v.f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Forward pass over `n` images (`n×784`, standardized). Does not mutate the model;
    /// train-mode batch-norm statistics are returned in the cache for `apply_bn_updates`.
    pub fn forward(&self, images: &[T], n: usize, mode: ForwardMode) -> (Vec<T>, HostCache<T>) {
        let c = self.channels();
        let side = IMAGE_SIDE;
        assert_eq!(images.len(), n * side * side, "host forward: image buffer size");
        let g0 = ConvGeom { cin: 1, cout: c, k: 3, stride: 1, pad: 1, n, h: side, w: side };
        let (conv0, stem_cols) = conv_forward_cnhw(images, self.stem_conv.value.data(), &g0);
        let mut stem_act = vec![T::zero(); conv0.len()];
        let (stem_bn, stem_upd) = self.stem_bn.forward(&conv0, c, mode.stem_bn_train, &mut stem_act);
        relu_inplace(&mut stem_act);
        let (pooled, pool_idx) = max_pool2_forward(&stem_act, c, n, side, side);

        let (branch, block, upd1, upd2) = self.block_forward(&pooled, n, mode.block_bn_train);
        let mut block_out: Vec<T> = pooled.iter().zip(&branch).map(|(&a, &b)| a + b).collect();
        relu_inplace(&mut block_out);
        // head ReLU is a no-op on the block's rectified output
        let gap = global_avg_pool(&block_out, c, n, POOLED_PIXELS);
        let mut logits = vec![T::zero(); n * NUM_CLASSES];
        dense_forward(
            &gap,
            n,
            c,
            self.head_w.value.data(),
            Some(self.head_b.value.data()),
            NUM_CLASSES,
            &mut logits,
        );
        let cache = HostCache {
            n,
            stem_cols,
            stem_bn,
            stem_act,
            pool_idx,
            pooled,
            block,
            block_out,
            gap,
            bn_updates: [stem_upd, upd1, upd2],
        };
        (logits, cache)
    }

    #[allow(clippy::type_complexity)]
    fn block_forward(
        &self,
        x: &[T],
        n: usize,
        bn_train: bool,
    ) -> (Vec<T>, BlockCache<T>, Option<(Vec<T>, Vec<T>)>, Option<(Vec<T>, Vec<T>)>) {
        let c = self.channels();
        let m = n * POOLED_PIXELS;
        let geom = |cin, cout| ConvGeom { cin, cout, k: 3, stride: 1, pad: 1, n, h: POOLED, w: POOLED };
        match &self.block {
            Block::Large { conv1, bn1, conv2, bn2 } => {
                let (c1, cols1) = conv_forward_cnhw(x, conv1.value.data(), &geom(c, c));
                let mut r1 = vec![T::zero(); c1.len()];
                let (bn1c, u1) = bn1.forward(&c1, c, bn_train, &mut r1);
                relu_inplace(&mut r1);
                let (c2, cols2) = conv_forward_cnhw(&r1, conv2.value.data(), &geom(c, c));
                let mut out = vec![T::zero(); c2.len()];
                let (bn2c, u2) = bn2.forward(&c2, c, bn_train, &mut out);
                (out, BlockCache::Large { cols1, bn1: bn1c, r1, cols2, bn2: bn2c }, u1, u2)
            }
            Block::Small { conv1, conv2 } => {
                let h = c / 2;
                let (mut r1, cols1) = conv_forward_cnhw(x, conv1.value.data(), &geom(c, h));
                relu_inplace(&mut r1);
                let (out, cols2) = conv_forward_cnhw(&r1, conv2.value.data(), &geom(h, c));
                (out, BlockCache::Small { cols1, r1, cols2 }, None, None)
            }
            Block::Mlp { w1, w2 } => {
                let h = c / 2;
                let mut r1 = vec![T::zero(); h * m];
                gemm(false, false, h, m, c, T::one(), w1.value.data(), x, T::zero(), &mut r1);
                relu_inplace(&mut r1);
                let mut out = vec![T::zero(); c * m];
                gemm(false, false, c, m, h, T::one(), w2.value.data(), &r1, T::zero(), &mut out);
                (out, BlockCache::Mlp { r1 }, None, None)
            }
            Block::Attn { wq, wk, wv, wo } => {
                let w = AttnWeights {
                    wq: wq.value.data(),
                    wk: wk.value.data(),
                    wv: wv.value.data(),
                    wo: wo.value.data(),
                };
                let mut out = vec![T::zero(); c * m];
                let mut tokens = Vec::with_capacity(n);
                let mut caches = Vec::with_capacity(n);
                let mut y = vec![T::zero(); POOLED_PIXELS * c];
                for ni in 0..n {
                    let tok = gather_tokens(x, c, n, ni);
                    caches.push(attention_forward(&tok, &tok, POOLED_PIXELS, POOLED_PIXELS, c, &w, &mut y));
                    scatter_tokens(&y, &mut out, c, n, ni, false);
                    tokens.push(tok);
                }
                (out, BlockCache::Attn { tokens, caches }, None, None)
            }
        }
    }

    /// Commits train-mode batch-norm running statistics produced by `forward`.
    pub fn apply_bn_updates(&mut self, cache: &mut HostCache<T>) {
        if let Some((m, v)) = cache.bn_updates[0].take() {
            self.stem_bn.running_mean.data_mut().copy_from_slice(&m);
            self.stem_bn.running_var.data_mut().copy_from_slice(&v);
        }
        if let Block::Large { bn1, bn2, .. } = &mut self.block {
            for (bn, upd) in [(bn1, cache.bn_updates[1].take()), (bn2, cache.bn_updates[2].take())] {
                if let Some((m, v)) = upd {
                    bn.running_mean.data_mut().copy_from_slice(&m);
                    bn.running_var.data_mut().copy_from_slice(&v);
                }
            }
        }
    }

    /// Accumulates parameter gradients of `scope` from `dlogits` (`n×10`).
    pub fn backward(&mut self, cache: &HostCache<T>, dlogits: &[T], scope: Scope) {
        let c = self.channels();
        let n = cache.n;
        let need_stem = scope != Scope::TargetOnly;
        let mut dgap = vec![T::zero(); n * c];
        dense_backward(
            &cache.gap,
            dlogits,
            n,
            c,
            NUM_CLASSES,
            self.head_w.value.data(),
            self.head_w.grad.data_mut(),
            Some(self.head_b.grad.data_mut()),
            Some(&mut dgap),
        );
        let mut ds = global_avg_pool_backward(&dgap, c, n, POOLED_PIXELS);
        relu_backward_inplace(&cache.block_out, &mut ds);

        let dbranch_in = self.block_backward(&cache.pooled, n, &cache.block, &ds, need_stem);
        if !need_stem {
            return;
        }
        let dpooled: Vec<T> = match dbranch_in {
            Some(d) => ds.iter().zip(&d).map(|(&a, &b)| a + b).collect(),
            None => ds,
        };
        let mut dact = max_pool2_backward(&dpooled, &cache.pool_idx, cache.stem_act.len());
        relu_backward_inplace(&cache.stem_act, &mut dact);
        let dconv0 = self.stem_bn.backward(&dact, c, &cache.stem_bn);
        let g0 = ConvGeom { cin: 1, cout: c, k: 3, stride: 1, pad: 1, n, h: IMAGE_SIDE, w: IMAGE_SIDE };
        let w0 = self.stem_conv.value.data().to_vec();
        conv_backward_cnhw(&cache.stem_cols, &dconv0, &w0, &g0, self.stem_conv.grad.data_mut(), false);
    }

    fn block_backward(
        &mut self,
        x: &[T],
        n: usize,
        cache: &BlockCache<T>,
        dy: &[T],
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let c = self.channels();
        let m = n * POOLED_PIXELS;
        let geom = |cin, cout| ConvGeom { cin, cout, k: 3, stride: 1, pad: 1, n, h: POOLED, w: POOLED };
        match (&mut self.block, cache) {
            (Block::Large { conv1, bn1, conv2, bn2 }, BlockCache::Large { cols1, bn1: b1, r1, cols2, bn2: b2 }) => {
                let dc2 = bn2.backward(dy, c, b2);
                let w2 = conv2.value.data().to_vec();
                let mut dr1 = conv_backward_cnhw(cols2, &dc2, &w2, &geom(c, c), conv2.grad.data_mut(), true)
                    .expect("requested");
                relu_backward_inplace(r1, &mut dr1);
                let dc1 = bn1.backward(&dr1, c, b1);
                let w1 = conv1.value.data().to_vec();
                conv_backward_cnhw(cols1, &dc1, &w1, &geom(c, c), conv1.grad.data_mut(), want_dx)
            }
            (Block::Small { conv1, conv2 }, BlockCache::Small { cols1, r1, cols2 }) => {
                let h = c / 2;
                let w2 = conv2.value.data().to_vec();
                let mut dr1 = conv_backward_cnhw(cols2, dy, &w2, &geom(h, c), conv2.grad.data_mut(), true)
                    .expect("requested");
                relu_backward_inplace(r1, &mut dr1);
                let w1 = conv1.value.data().to_vec();
                conv_backward_cnhw(cols1, &dr1, &w1, &geom(c, h), conv1.grad.data_mut(), want_dx)
            }
            (Block::Mlp { w1, w2 }, BlockCache::Mlp { r1 }) => {
                let h = c / 2;
                gemm(false, true, c, h, m, T::one(), dy, r1, T::one(), w2.grad.data_mut());
                let mut dr1 = vec![T::zero(); h * m];
                gemm(true, false, h, m, c, T::one(), w2.value.data(), dy, T::zero(), &mut dr1);
                relu_backward_inplace(r1, &mut dr1);
                gemm(false, true, h, c, m, T::one(), &dr1, x, T::one(), w1.grad.data_mut());
                want_dx.then(|| {
                    let mut dx = vec![T::zero(); c * m];
                    gemm(true, false, c, m, h, T::one(), w1.value.data(), &dr1, T::zero(), &mut dx);
                    dx
                })
            }
            (Block::Attn { wq, wk, wv, wo }, BlockCache::Attn { tokens, caches }) => {
                let w = OwnedAttn {
                    wq: wq.value.data().to_vec(),
                    wk: wk.value.data().to_vec(),
                    wv: wv.value.data().to_vec(),
                    wo: wo.value.data().to_vec(),
                };
                let mut g = AttnGrads {
                    wq: wq.grad.data_mut(),
                    wk: wk.grad.data_mut(),
                    wv: wv.grad.data_mut(),
                    wo: wo.grad.data_mut(),
                };
                let mut dx = want_dx.then(|| vec![T::zero(); c * m]);
                for ni in 0..n {
                    let dtok = gather_tokens(dy, c, n, ni);
                    let weights = w.view();
                    let (dq, dkv) = attention_backward(
                        &tokens[ni],
                        &tokens[ni],
                        POOLED_PIXELS,
                        POOLED_PIXELS,
                        c,
                        &weights,
                        &caches[ni],
                        &dtok,
                        &mut g,
                    );
                    if let Some(dx) = dx.as_mut() {
                        let sum: Vec<T> = dq.iter().zip(&dkv).map(|(&a, &b)| a + b).collect();
                        scatter_tokens(&sum, dx, c, n, ni, false);
                    }
                }
                dx
            }
            _ => unreachable!("block cache does not match block variant"),
        }
    }

    /// Test-mode logits, evaluated in chunks of `batch` images.
    pub fn logits(&self, images: &[T], n: usize, batch: usize) -> Vec<T> {
        let d = IMAGE_SIDE * IMAGE_SIDE;
        let mut out = Vec::with_capacity(n * NUM_CLASSES);
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let (l, _) = self.forward(&images[start * d..end * d], end - start, ForwardMode::EVAL);
            out.extend(l);
            start = end;
        }
        out
    }
}

/// Owned copy of attention projections (borrowing a `Param` value while its grad is
/// mutably borrowed is not possible).
struct OwnedAttn<T> {
    wq: Vec<T>,
    wk: Vec<T>,
    wv: Vec<T>,
    wo: Vec<T>,
}

impl<T> OwnedAttn<T> {
    fn view(&self) -> AttnWeights<'_, T> {
        AttnWeights {
            wq: &self.wq,
            wk: &self.wk,
            wv: &self.wv,
            wo: &self.wo,
        }
    }
}

/// Sample `ni` of a `[c, n, 196]` map as a `[196, c]` token matrix.
fn gather_tokens<T: Scalar>(x: &[T], c: usize, n: usize, ni: usize) -> Vec<T> {
    let mut tok = vec![T::zero(); POOLED_PIXELS * c];
    for ch in 0..c {
        let src = &x[(ch * n + ni) * POOLED_PIXELS..(ch * n + ni + 1) * POOLED_PIXELS];
        for (t, &v) in src.iter().enumerate() {
            tok[t * c + ch] = v;
        }
    }
    tok
}

fn scatter_tokens<T: Scalar>(tok: &[T], x: &mut [T], c: usize, n: usize, ni: usize, add: bool) {
    for ch in 0..c {
        let dst = &mut x[(ch * n + ni) * POOLED_PIXELS..(ch * n + ni + 1) * POOLED_PIXELS];
        for (t, d) in dst.iter_mut().enumerate() {
            if add {
                *d += tok[t * c + ch];
            } else {
                *d = tok[t * c + ch];
            }
        }
    }
}

impl<T: Scalar> Parameterized<T> for HostModel<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.stem_conv, &self.stem_bn.gamma, &self.stem_bn.beta];
        v.extend(self.block_params());
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = Vec::new();
        v.push(&mut self.stem_conv);
        v.push(&mut self.stem_bn.gamma);
        v.push(&mut self.stem_bn.beta);
        match &mut self.block {
            Block::Large { conv1, bn1, conv2, bn2 } => v.extend([
                conv1,
                &mut bn1.gamma,
                &mut bn1.beta,
                conv2,
                &mut bn2.gamma,
                &mut bn2.beta,
            ]),
            Block::Small { conv1, conv2 } => v.extend([conv1, conv2]),
            Block::Mlp { w1, w2 } => v.extend([w1, w2]),
            Block::Attn { wq, wk, wv, wo } => v.extend([wq, wk, wv, wo]),
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }
}

/// Accessors kept for the small-block parameter records.
impl HostModel<f32> {
    pub fn small_block(&self) -> Result<SmallBlockParams> {
        match self.target_params()? {
            TargetBlockParams::Small(s) => Ok(s),
            other => Err(KtError::Mismatch {
                expected: TargetVariant::SmallConv.name().into(),
                found: other.variant().name().into(),
            }),
        }
    }

    pub fn mlp_block(&self) -> Option<MlpBlockParams> {
        match self.target_params().ok()? {
            TargetBlockParams::Mlp(m) => Some(m),
            _ => None,
        }
    }

    pub fn attn_block(&self) -> Option<AttnBlockParams> {
        match self.target_params().ok()? {
            TargetBlockParams::Attn(a) => Some(a),
            _ => None,
        }
    }
}
