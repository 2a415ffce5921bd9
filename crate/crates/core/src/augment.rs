//! Weight-space augmentation of translator inputs: random masking and additive Gaussian noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, KtError, Result};
use crate::host::LargeBlockParams;
use crate::nn::Tensor;
use crate::pairs::ParamPair;

/// Which augmentations run, and how strongly. Fresh randomness is drawn for every
/// sample of every batch of every epoch; masking runs before noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub mask: bool,
    /// Probability that an element is zeroed.
    pub mask_prob: f64,
    pub noise: bool,
    /// Standard deviation of the added noise.
    pub noise_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mask: false,
            mask_prob: 0.1,
            noise: false,
            noise_scale: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        check_prob(self.mask_prob)?;
        check_scale(self.noise_scale)
    }

    pub fn is_identity(&self) -> bool {
        !self.mask && !self.noise
    }
}

fn check_prob(m: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&m),
        KtError::Config(format!("mask probability {m} outside [0, 1]"))
    );
    Ok(())
}

fn check_scale(n: f64) -> Result<()> {
    ensure!(
        n.is_finite() && n >= 0.0,
        KtError::Config(format!("noise scale {n} must be finite and >= 0"))
    );
    Ok(())
}

fn mask_in_place<R: Rng + ?Sized>(x: &mut [f32], m: f64, rng: &mut R) {
    for v in x {
        if rng.gen::<f64>() < m {
            *v = 0.0;
        }
    }
}

fn noise_in_place<R: Rng + ?Sized>(x: &mut [f32], n: f64, rng: &mut R) {
    for v in x {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v as f64 + n * z) as f32;
    }
}

/// Copy of `t` with each element independently zeroed with probability `m`.
pub fn random_mask<R: Rng + ?Sized>(t: &Tensor<f32>, m: f64, rng: &mut R) -> Result<Tensor<f32>> {
    check_prob(m)?;
    let mut out = t.clone();
    mask_in_place(out.data_mut(), m, rng);
    Ok(out)
}

/// Copy of `t` plus `n · z`, `z ~ N(0, 1)` per element.
pub fn add_noise<R: Rng + ?Sized>(t: &Tensor<f32>, n: f64, rng: &mut R) -> Result<Tensor<f32>> {
    check_scale(n)?;
    let mut out = t.clone();
    noise_in_place(out.data_mut(), n, rng);
    Ok(out)
}

/// Augments one flattened input sample in place.
pub fn augment_flat<R: Rng + ?Sized>(x: &mut [f32], cfg: &AugmentConfig, rng: &mut R) {
    if cfg.mask {
        mask_in_place(x, cfg.mask_prob, rng);
    }
    if cfg.noise {
        noise_in_place(x, cfg.noise_scale, rng);
    }
}

/// Augments the large-block inputs of a batch; targets are returned untouched.
pub fn augment_batch<R: Rng + ?Sized>(batch: &[ParamPair], cfg: &AugmentConfig, rng: &mut R) -> Result<Vec<ParamPair>> {
    cfg.validate()?;
    batch
        .iter()
        .map(|p| {
            if cfg.is_identity() {
                return Ok(p.clone());
            }
            let mut flat = p.large.flat();
            augment_flat(&mut flat, cfg, rng);
            Ok(ParamPair {
                large: LargeBlockParams::from_flat(p.channels(), &flat)?,
                ..p.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::{TargetBlockParams, TargetVariant};
    use crate::rng::stream_rng;

    fn big(n: usize) -> Tensor<f32> {
        Tensor::new(&[n], (0..n).map(|i| 1.0 + (i % 7) as f32).collect()).unwrap()
    }

    #[test]
    fn mask_extremes() {
        let t = big(1000);
        let mut rng = stream_rng(0, &[]);
        assert_eq!(random_mask(&t, 0.0, &mut rng).unwrap(), t);
        assert!(random_mask(&t, 1.0, &mut rng).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(random_mask(&t, 1.5, &mut rng).is_err());
        assert!(random_mask(&t, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mask_rate_concentrates() {
        let t = big(1_000_000);
        let out = random_mask(&t, 0.1, &mut stream_rng(1, &[])).unwrap();
        let zeroed = out.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((0.098..=0.102).contains(&zeroed), "{zeroed}");
        // kept elements are unchanged
        assert!(out.data().iter().zip(t.data()).all(|(&o, &i)| o == 0.0 || o == i));
    }

    #[test]
    fn noise_moments() {
        let t = Tensor::zeros(&[1_000_000]);
        assert_eq!(add_noise(&t, 0.0, &mut stream_rng(2, &[])).unwrap(), t);
        let out = add_noise(&t, 0.01, &mut stream_rng(2, &[])).unwrap();
        let n = out.len() as f64;
        let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = out.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 1e-4).abs() <= 0.05 * 1e-4, "{var}");
        assert!(mean.abs() <= 3.0 * 0.01 / n.sqrt(), "{mean}");
        assert!(add_noise(&t, -1.0, &mut stream_rng(2, &[])).is_err());
    }

    fn pairs() -> Vec<ParamPair> {
        (0..2)
            .map(|s| {
                let mut rng = stream_rng(s, &[]);
                ParamPair {
                    seed: s,
                    large: LargeBlockParams::from_flat(6, &(0..648).map(|i| 0.01 * i as f32 + 1.0).collect::<Vec<_>>()).unwrap(),
                    target: TargetBlockParams::random_init(TargetVariant::SmallConv, 6, &mut rng).unwrap(),
                    host_acc: 0.5,
                    distilled_acc: 0.4,
                }
            })
            .collect()
    }

    #[test]
    fn batch_augmentation_touches_inputs_only() {
        let b = pairs();
        let mut rng = stream_rng(3, &[]);
        assert_eq!(augment_batch(&b, &AugmentConfig::default(), &mut rng).unwrap(), b);
        let cfg = AugmentConfig { mask: true, noise: true, ..Default::default() };
        let out = augment_batch(&b, &cfg, &mut rng).unwrap();
        for (o, i) in out.iter().zip(&b) {
            assert_eq!(o.target, i.target);
            assert_ne!(o.large, i.large);
            assert_eq!(o.large.conv1.tensor().shape(), i.large.conv1.tensor().shape());
        }
    }

    #[test]
    fn samples_get_independent_masks() {
        let b = pairs();
        let cfg = AugmentConfig { mask: true, ..Default::default() };
        let out = augment_batch(&b, &cfg, &mut stream_rng(4, &[])).unwrap();
        let zeros = |p: &ParamPair| -> Vec<bool> { p.large.flat().iter().map(|&v| v == 0.0).collect() };
        assert_ne!(zeros(&out[0]), zeros(&out[1]));
    }
}
