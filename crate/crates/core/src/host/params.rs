//! Parameter records for the translated block and its replacements.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, KtError, Result};
use crate::nn::Tensor;
use crate::rng::fan_in_uniform;

/// Which block occupies the host's target slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetVariant {
    /// BasicBlock: conv–BN–ReLU–conv–BN + identity, C→C.
    LargeConv,
    /// conv(C→C/2)–ReLU–conv(C/2→C) + identity, no batch norm.
    SmallConv,
    /// Per-location channel MLP C→C/2→C + identity.
    MlpBlock,
    /// Single-head self-attention over spatial positions + identity.
    AttnBlock,
}

impl TargetVariant {
    /// Variant tag in the pair shard header. The large block has no pair tag.
    pub fn pair_tag(self) -> Option<u8> {
        match self {
            TargetVariant::SmallConv => Some(0),
            TargetVariant::MlpBlock => Some(1),
            TargetVariant::AttnBlock => Some(2),
            TargetVariant::LargeConv => None,
        }
    }

    pub fn from_pair_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(TargetVariant::SmallConv),
            1 => Some(TargetVariant::MlpBlock),
            2 => Some(TargetVariant::AttnBlock),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetVariant::LargeConv => "large-conv",
            TargetVariant::SmallConv => "small-conv",
            TargetVariant::MlpBlock => "mlp-block",
            TargetVariant::AttnBlock => "attn-block",
        }
    }

    /// Shapes of the translated tensors, in declaration order.
    pub fn target_shapes(self, c: usize) -> Vec<Vec<usize>> {
        let h = c / 2;
        match self {
            TargetVariant::LargeConv => vec![vec![c, c, 3, 3], vec![c, c, 3, 3]],
            TargetVariant::SmallConv => vec![vec![h, c, 3, 3], vec![c, h, 3, 3]],
            TargetVariant::MlpBlock => vec![vec![h, c], vec![c, h]],
            TargetVariant::AttnBlock => vec![vec![c, c]; 4],
        }
    }

    pub fn target_len(self, c: usize) -> usize {
        self.target_shapes(c)
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Host architecture: channel count and target-slot variant. 1×28×28 input, 10 classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostSpec {
    pub channels: usize,
    pub variant: TargetVariant,
}

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIDE: usize = 28;

impl HostSpec {
    pub fn new(channels: usize, variant: TargetVariant) -> Result<Self> {
        ensure!(
            channels >= 2 && channels % 2 == 0,
            KtError::Invalid(format!("channel count must be even and >= 2, got {channels}"))
        );
        Ok(Self { channels, variant })
    }
}

/// A `(out, in, 3, 3)` convolution weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTensor4(Tensor<f32>);

impl ConvTensor4 {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        ensure!(
            s.len() == 4 && s[2] == 3 && s[3] == 3,
            KtError::shape("ConvTensor4", s, &[0, 0, 3, 3])
        );
        ensure!(t.all_finite(), KtError::NonFinite("ConvTensor4 values".into()));
        Ok(Self(t))
    }

    pub fn out_channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }
}

/// Input of one translation sample: the BasicBlock's two convolutions, batch norm excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct LargeBlockParams {
    pub conv1: ConvTensor4,
    pub conv2: ConvTensor4,
}

impl LargeBlockParams {
    pub fn new(conv1: ConvTensor4, conv2: ConvTensor4) -> Result<Self> {
        let c = conv1.out_channels();
        for t in [&conv1, &conv2] {
            ensure!(
                t.out_channels() == c && t.in_channels() == c,
                KtError::shape("LargeBlockParams", &[c, c, 3, 3], t.tensor().shape())
            );
        }
        Ok(Self { conv1, conv2 })
    }

    pub fn channels(&self) -> usize {
        self.conv1.out_channels()
    }

    /// Both tensors concatenated in declaration order.
    pub fn flat(&self) -> Vec<f32> {
        let mut v = self.conv1.data().to_vec();
        v.extend_from_slice(self.conv2.data());
        v
    }

    pub fn from_flat(c: usize, flat: &[f32]) -> Result<Self> {
        let n = c * c * 9;
        ensure!(flat.len() == 2 * n, KtError::shape("LargeBlockParams::from_flat", &[2 * n], &[flat.len()]));
        Self::new(
            ConvTensor4::new(Tensor::new(&[c, c, 3, 3], flat[..n].to_vec())?)?,
            ConvTensor4::new(Tensor::new(&[c, c, 3, 3], flat[n..].to_vec())?)?,
        )
    }
}

/// The compressed block: conv1 `(C/2, C, 3, 3)`, conv2 `(C, C/2, 3, 3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmallBlockParams {
    pub conv1: ConvTensor4,
    pub conv2: ConvTensor4,
}

impl SmallBlockParams {
    pub fn new(conv1: ConvTensor4, conv2: ConvTensor4) -> Result<Self> {
        let c = conv1.in_channels();
        ensure!(
            c % 2 == 0
                && conv1.out_channels() == c / 2
                && conv2.in_channels() == c / 2
                && conv2.out_channels() == c,
            KtError::shape(
                "SmallBlockParams",
                conv1.tensor().shape(),
                conv2.tensor().shape()
            )
        );
        Ok(Self { conv1, conv2 })
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpBlockParams {
    /// `(C/2, C)`
    pub w1: Tensor<f32>,
    /// `(C, C/2)`
    pub w2: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnBlockParams {
    pub wq: Tensor<f32>,
    pub wk: Tensor<f32>,
    pub wv: Tensor<f32>,
    pub wo: Tensor<f32>,
}

/// Parameters for whichever block fills the slot of a compressed host.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetBlockParams {
    Small(SmallBlockParams),
    Mlp(MlpBlockParams),
    Attn(AttnBlockParams),
}

impl TargetBlockParams {
    pub fn variant(&self) -> TargetVariant {
        match self {
            TargetBlockParams::Small(_) => TargetVariant::SmallConv,
            TargetBlockParams::Mlp(_) => TargetVariant::MlpBlock,
            TargetBlockParams::Attn(_) => TargetVariant::AttnBlock,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            TargetBlockParams::Small(p) => p.channels(),
            TargetBlockParams::Mlp(p) => p.w1.shape()[1],
            TargetBlockParams::Attn(p) => p.wq.shape()[0],
        }
    }

    /// Tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor<f32>> {
        match self {
            TargetBlockParams::Small(p) => vec![p.conv1.tensor(), p.conv2.tensor()],
            TargetBlockParams::Mlp(p) => vec![&p.w1, &p.w2],
            TargetBlockParams::Attn(p) => vec![&p.wq, &p.wk, &p.wv, &p.wo],
        }
    }

    pub fn flat(&self) -> Vec<f32> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Rebuilds from tensors in declaration order, checking every shape.
    pub fn from_tensors(variant: TargetVariant, c: usize, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        let shapes = variant.target_shapes(c);
        ensure!(
            variant != TargetVariant::LargeConv,
            KtError::Invalid("large block is not a target variant".into())
        );
        ensure!(
            tensors.len() == shapes.len(),
            KtError::shape("TargetBlockParams", &[shapes.len()], &[tensors.len()])
        );
        for (t, s) in tensors.iter().zip(&shapes) {
            ensure!(t.shape() == &s[..], KtError::shape("TargetBlockParams", s, t.shape()));
            ensure!(t.all_finite(), KtError::NonFinite("target block values".into()));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(match variant {
            TargetVariant::SmallConv => TargetBlockParams::Small(SmallBlockParams::new(
                ConvTensor4::new(next())?,
                ConvTensor4::new(next())?,
            )?),
            TargetVariant::MlpBlock => TargetBlockParams::Mlp(MlpBlockParams { w1: next(), w2: next() }),
            TargetVariant::AttnBlock => TargetBlockParams::Attn(AttnBlockParams {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
            }),
            TargetVariant::LargeConv => unreachable!(),
        })
    }

    pub fn from_flat(variant: TargetVariant, c: usize, flat: &[f32]) -> Result<Self> {
        ensure!(
            flat.len() == variant.target_len(c),
            KtError::shape("TargetBlockParams::from_flat", &[variant.target_len(c)], &[flat.len()])
        );
        let mut off = 0;
        let mut tensors = Vec::new();
        for s in variant.target_shapes(c) {
            let n: usize = s.iter().product();
            tensors.push(Tensor::new(&s, flat[off..off + n].to_vec())?);
            off += n;
        }
        Self::from_tensors(variant, c, tensors)
    }

    /// Fan-in uniform initialization, the same rule the host uses for fresh weights.
    pub fn random_init<R: Rng + ?Sized>(variant: TargetVariant, c: usize, rng: &mut R) -> Result<Self> {
        HostSpec::new(c, variant)?;
        let tensors = variant
            .target_shapes(c)
            .iter()
            .map(|s| fan_in_uniform(s, s[1..].iter().product(), rng))
            .collect();
        Self::from_tensors(variant, c, tensors)
    }

    pub fn zeros(variant: TargetVariant, c: usize) -> Result<Self> {
        let tensors = variant
            .target_shapes(c)
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        Self::from_tensors(variant, c, tensors)
    }
}
