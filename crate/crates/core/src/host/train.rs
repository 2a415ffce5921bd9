use rand::seq::{index::sample, SliceRandom};
use serde::{Deserialize, Serialize};

use super::idx::ImageSet;
use super::model::{ForwardMode, HostModel, Scope};
use super::params::{TargetBlockParams, TargetVariant, NUM_CLASSES};
use crate::error::{ensure, KtError, Result};
use crate::nn::layers::softmax_cross_entropy;
use crate::nn::{cosine_lr, OptimizerState, Parameterized};
use crate::rng::{stream_rng, streams};

/// Optimization recipe for one host training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HostTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Number of training images drawn (per seed, without replacement) from the train split.
    pub subset_size: usize,
}

impl Default for HostTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 16,
            lr: 1e-2,
            subset_size: 5000,
        }
    }
}

impl HostTrainConfig {
    pub fn validate(&self, train_len: usize) -> Result<()> {
        ensure!(self.batch_size >= 1, KtError::Config("batch_size must be >= 1".into()));
        ensure!(
            self.subset_size >= 1 && self.subset_size <= train_len,
            KtError::Config(format!(
                "subset_size {} outside 1..={train_len}",
                self.subset_size
            ))
        );
        ensure!(
            self.lr.is_finite() && self.lr >= 0.0,
            KtError::Config(format!("learning rate {} must be finite and >= 0", self.lr))
        );
        Ok(())
    }

    /// Indices of this seed's training subset, sorted.
    pub fn subset(&self, seed: u64, train_len: usize) -> Vec<usize> {
        let mut rng = stream_rng(seed, &[streams::HOST_SUBSET]);
        let mut idx = sample(&mut rng, train_len, self.subset_size).into_vec();
        idx.sort_unstable();
        idx
    }
}

fn run_epochs(
    host: &mut HostModel,
    train: &ImageSet,
    cfg: &HostTrainConfig,
    seed: u64,
    shuffle_stream: u64,
    mode: ForwardMode,
    scope: Scope,
) -> Result<()> {
    let mut order = cfg.subset(seed, train.len());
    let mut opt = OptimizerState::new(host.scoped_params_mut(scope).into_iter().map(|p| &*p), cfg.lr);
    for epoch in 0..cfg.epochs {
        opt.lr = cosine_lr(epoch, cfg.epochs, cfg.lr)?;
        order.shuffle(&mut stream_rng(seed, &[shuffle_stream, epoch as u64]));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (px, labels) = train.gather(chunk);
            let (logits, mut cache) = host.forward(&px, chunk.len(), mode);
            let (loss, dlogits) = softmax_cross_entropy(&logits, NUM_CLASSES, &labels);
            if !loss.is_finite() {
                return Err(KtError::NonFinite(format!(
                    "host loss at seed {seed}, epoch {epoch}, batch {b}"
                )));
            }
            host.zero_grad();
            host.backward(&cache, &dlogits, scope);
            host.apply_bn_updates(&mut cache);
            opt.adam_step(&mut host.scoped_params_mut(scope))?;
        }
    }
    Ok(())
}

/// Trains every host parameter, then returns test accuracy.
pub fn train_full(
    host: &mut HostModel,
    train: &ImageSet,
    test: &ImageSet,
    cfg: &HostTrainConfig,
    seed: u64,
) -> Result<f32> {
    cfg.validate(train.len())?;
    run_epochs(host, train, cfg, seed, streams::HOST_SHUFFLE, ForwardMode::TRAIN, Scope::All)?;
    Ok(evaluate(host, test, 256))
}

/// Trains a fresh `variant` block inside a copy of `step1`'s frozen surroundings.
///
/// The stem's batch norm runs on its stored statistics, so the surroundings stay
/// byte-identical; this is checked and reported as an invariant violation otherwise.
pub fn train_target_frozen(
    step1: &HostModel,
    variant: TargetVariant,
    train: &ImageSet,
    test: &ImageSet,
    cfg: &HostTrainConfig,
    seed: u64,
) -> Result<(TargetBlockParams, f32, HostModel)> {
    cfg.validate(train.len())?;
    ensure!(
        variant != TargetVariant::LargeConv,
        KtError::Invalid("the frozen step trains a compressed block".into())
    );
    let c = step1.channels();
    let init = TargetBlockParams::random_init(variant, c, &mut stream_rng(seed, &[streams::TARGET_INIT]))?;
    let mut host = step1.with_target(&init)?;
    let before = host.surround_digest();
    run_epochs(&mut host, train, cfg, seed, streams::TARGET_SHUFFLE, ForwardMode::EVAL, Scope::TargetOnly)?;
    ensure!(
        host.surround_digest() == before,
        KtError::Invariant("frozen stem/head parameters changed during target training".into())
    );
    let acc = evaluate(&host, test, 256);
    Ok((host.target_params()?, acc, host))
}

/// Retrains stem and head around a frozen block (batch norm inside the block in eval mode).
pub fn train_surroundings(
    host: &mut HostModel,
    train: &ImageSet,
    test: &ImageSet,
    cfg: &HostTrainConfig,
    seed: u64,
) -> Result<f32> {
    cfg.validate(train.len())?;
    let before = host.block_digest();
    let mode = ForwardMode {
        stem_bn_train: true,
        block_bn_train: false,
    };
    run_epochs(host, train, cfg, seed, streams::HOST_SHUFFLE, mode, Scope::AllButTarget)?;
    ensure!(
        host.block_digest() == before,
        KtError::Invariant("frozen block parameters changed while retraining surroundings".into())
    );
    Ok(evaluate(host, test, 256))
}

/// Predicted class per image.
pub fn predict(host: &HostModel, set: &ImageSet, batch: usize) -> Vec<u8> {
    host.logits(&set.pixels, set.len(), batch)
        .chunks_exact(NUM_CLASSES)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Fraction of `set` classified correctly in test mode.
pub fn evaluate(host: &HostModel, set: &ImageSet, batch: usize) -> f32 {
    if set.is_empty() {
        return 0.0;
    }
    let correct = predict(host, set, batch)
        .iter()
        .zip(&set.labels)
        .filter(|(p, l)| p == l)
        .count();
    correct as f32 / set.len() as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::params::HostSpec;
    use crate::host::idx::DigitData;
    use crate::host::data_root;

    fn digits() -> Option<DigitData> {
        DigitData::load(&data_root().join("mnist")).ok()
    }

    fn large(seed: u64) -> HostModel {
        HostModel::build(HostSpec::new(6, TargetVariant::LargeConv).unwrap(), seed).unwrap()
    }

    #[test]
    fn zero_epochs_leave_host_unchanged() {
        let Some(d) = digits() else { return };
        let mut h = large(1);
        let before = h.flat_values();
        let cfg = HostTrainConfig { epochs: 0, subset_size: 100, ..Default::default() };
        let acc = train_full(&mut h, &d.train, &d.test, &cfg, 1).unwrap();
        assert_eq!(h.flat_values(), before);
        assert_eq!(acc, evaluate(&large(1), &d.test, 256));
    }

    #[test]
    fn one_epoch_beats_chance_and_is_deterministic() {
        let Some(d) = digits() else { return };
        let cfg = HostTrainConfig::default();
        let run = || {
            let mut h = large(3);
            train_full(&mut h, &d.train, &d.test, &cfg, 3).unwrap()
        };
        let a = run();
        assert!(a > 0.3, "accuracy {a}");
        assert_eq!(a.to_bits(), run().to_bits());
    }

    #[test]
    fn frozen_step_keeps_surroundings_and_zero_lr_keeps_init() {
        let Some(d) = digits() else { return };
        let cfg = HostTrainConfig { subset_size: 512, ..Default::default() };
        let mut h = large(4);
        train_full(&mut h, &d.train, &d.test, &cfg, 4).unwrap();
        let frozen = HostTrainConfig { lr: 0.0, ..cfg.clone() };
        let (p, _, trained) = train_target_frozen(&h, TargetVariant::SmallConv, &d.train, &d.test, &frozen, 4).unwrap();
        let init = TargetBlockParams::random_init(
            TargetVariant::SmallConv,
            6,
            &mut stream_rng(4, &[streams::TARGET_INIT]),
        )
        .unwrap();
        assert_eq!(p, init);
        assert_eq!(trained.surround_digest(), h.surround_digest());
        let (p2, acc, _) = train_target_frozen(&h, TargetVariant::MlpBlock, &d.train, &d.test, &cfg, 4).unwrap();
        assert_eq!(p2.variant(), TargetVariant::MlpBlock);
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn evaluation_is_batch_size_independent() {
        let Some(d) = digits() else { return };
        let test = d.test.subset(&(0..300).collect::<Vec<_>>());
        let h = large(5);
        assert_eq!(evaluate(&h, &test, 1), evaluate(&h, &test, 256));
        let untrained = evaluate(&h, &test, 128);
        assert!((0.0..=1.0).contains(&untrained));
    }

    #[test]
    fn accuracy_is_one_on_own_predictions() {
        let Some(d) = digits() else { return };
        let mut test = d.test.subset(&(0..200).collect::<Vec<_>>());
        let h = large(6);
        test.labels = predict(&h, &test, 64);
        assert_eq!(evaluate(&h, &test, 64), 1.0);
    }

    #[test]
    fn surroundings_training_keeps_block() {
        let Some(d) = digits() else { return };
        let cfg = HostTrainConfig { subset_size: 256, ..Default::default() };
        let mut h = large(8);
        let block = h.extract_large_block().unwrap();
        train_surroundings(&mut h, &d.train, &d.test, &cfg, 8).unwrap();
        assert_eq!(h.extract_large_block().unwrap(), block);
    }
}
