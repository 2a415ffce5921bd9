//! Transfer studies: hosts trained on less data, hosts retrained on another digit
//! dataset around a frozen block, and translators for non-convolutional targets.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{baseline_random_init, mean, plug_and_score, translate};
use crate::error::{ensure, KtError, Result};
use crate::host::train::train_surroundings;
use crate::host::{train_full, DigitData, HostModel, ImageSet, TargetVariant};
use crate::pairs::{split_train_eval, EvalHost, GenConfig, HostCheckpoint, PairDataset};
use crate::trainer::{train_translator, RunHistory, RunOptions, TrainConfig, TrainInputs};
use crate::translators::{AnyTranslator, MixerConfig, TranslatorSpec};

/// Seeds of study hosts start here so they never collide with dataset seeds.
pub const STUDY_SEED_BASE: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    /// Hosts per study point.
    pub hosts: usize,
    pub seed: u64,
    /// Fractions of the standard host training subset, in percent.
    pub percents: Vec<f64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { hosts: 20, seed: 0, percents: vec![20.0, 40.0, 60.0, 80.0, 100.0] }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.hosts >= 1, KtError::Config("study needs at least one host".into()));
        for &p in &self.percents {
            ensure!(
                p > 0.0 && p <= 100.0,
                KtError::Config(format!("percent {p} outside (0, 100]"))
            );
        }
        Ok(())
    }

    fn host_seed(&self, point: usize, i: usize) -> u64 {
        STUDY_SEED_BASE + ((self.seed & 0xffff) << 24) + ((point as u64) << 12) + i as u64
    }
}

/// Accuracy of translated versus randomly initialized blocks over one set of hosts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentPoint {
    pub percent: f64,
    pub hosts: usize,
    pub host_mean: f64,
    pub translated_mean: f64,
    pub random_init_mean: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncompleteDataReport {
    pub points: Vec<PercentPoint>,
}

impl IncompleteDataReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("percent,hosts,host_mean,translated_mean,random_init_mean,delta\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                p.percent, p.hosts, p.host_mean, p.translated_mean, p.random_init_mean, p.delta
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetReport {
    pub hosts: usize,
    pub host_mean: f64,
    pub translated_mean: f64,
    pub random_init_mean: f64,
    pub improvement: f64,
    /// True when the images were the resampled stand-in rather than a supplied dataset.
    pub stand_in: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossArchReport {
    pub variant: TargetVariant,
    pub translation_best: f64,
    pub random_init_mean: f64,
    pub history: RunHistory,
}

fn score_pair(
    ck: &HostCheckpoint,
    translator: &AnyTranslator,
    variant: TargetVariant,
    seed: u64,
    test: &ImageSet,
) -> Result<(f32, f32)> {
    let large = ck.host.extract_large_block()?;
    let translated = translate(translator, &[&large], variant)?.remove(0);
    let random = baseline_random_init(variant, ck.host.channels(), seed)?;
    Ok((plug_and_score(ck, &translated, test)?, plug_and_score(ck, &random, test)?))
}

fn summarize(percent: f64, rows: &[(f32, f32, f32)]) -> PercentPoint {
    let col = |f: fn(&(f32, f32, f32)) -> f32| mean(&rows.iter().map(f).collect::<Vec<_>>());
    let (h, t, r) = (col(|x| x.0), col(|x| x.1), col(|x| x.2));
    PercentPoint { percent, hosts: rows.len(), host_mean: h, translated_mean: t, random_init_mean: r, delta: t - r }
}

pub fn check_translator(translator: &AnyTranslator, c: usize, variant: TargetVariant) -> Result<()> {
    let spec = translator.spec();
    let tv = match &spec {
        TranslatorSpec::Mixer(m) => m.target,
        TranslatorSpec::Pilot(_) => TargetVariant::SmallConv,
    };
    ensure!(
        spec.channels() == c && tv == variant,
        KtError::Mismatch {
            expected: format!("C={c} {}", variant.name()),
            found: format!("translator C={} {}", spec.channels(), tv.name()),
        }
    );
    Ok(())
}

/// Trains fresh hosts on a fraction of the usual subset, then translates their blocks.
///
/// At 100% the hosts follow exactly the dataset's full-host recipe.
pub fn study_incomplete_data(
    translator: &AnyTranslator,
    data: &DigitData,
    gen: &GenConfig,
    cfg: &StudyConfig,
) -> Result<IncompleteDataReport> {
    cfg.validate()?;
    check_translator(translator, gen.channels, gen.variant)?;
    let spec = gen.spec();
    let mut points = Vec::new();
    for (pi, &pct) in cfg.percents.iter().enumerate() {
        let subset = ((gen.step1.subset_size as f64 * pct / 100.0).round() as usize).max(gen.step1.batch_size);
        let step1 = crate::host::HostTrainConfig { subset_size: subset, ..gen.step1.clone() };
        step1.validate(data.train.len())?;
        let rows: Vec<(f32, f32, f32)> = (0..cfg.hosts)
            .into_par_iter()
            .map(|i| {
                let seed = cfg.host_seed(pi, i);
                let mut host = HostModel::build(spec, seed)?;
                let acc = train_full(&mut host, &data.train, &data.test, &step1, seed)?;
                let ck = HostCheckpoint { seed, host_acc: acc, distilled_acc: f32::NAN, host };
                let (t, r) = score_pair(&ck, translator, gen.variant, seed ^ cfg.seed, &data.test)?;
                Ok((acc, t, r))
            })
            .collect::<Result<_>>()?;
        let p = summarize(pct, &rows);
        log::info!("{pct}% data: translated {:.4} random {:.4} delta {:+.4}", p.translated_mean, p.random_init_mean, p.delta);
        points.push(p);
    }
    Ok(IncompleteDataReport { points })
}

/// Retrains stem and head on `other` around each evaluation host's frozen large block,
/// then compares translated against random small blocks on `other`'s test split.
pub fn study_cross_dataset(
    translator: &AnyTranslator,
    eval: &[EvalHost],
    other: &DigitData,
    gen: &GenConfig,
    cfg: &StudyConfig,
    stand_in: bool,
) -> Result<CrossDatasetReport> {
    ensure!(!eval.is_empty(), KtError::Config("cross-dataset study needs at least one host".into()));
    cfg.validate()?;
    check_translator(translator, gen.channels, gen.variant)?;
    let hosts = &eval[..cfg.hosts.min(eval.len())];
    let rows: Vec<(f32, f32, f32)> = hosts
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let seed = cfg.host_seed(0, i);
            let large = &h.pair.large;
            let mut host = HostModel::build(gen.spec(), seed)?;
            host.insert_large_block(large)?;
            let acc = train_surroundings(&mut host, &other.train, &other.test, &gen.step1, seed)?;
            ensure!(
                &host.extract_large_block()? == large,
                KtError::Invariant(format!("large block of host {} changed during retraining", h.pair.seed))
            );
            let ck = HostCheckpoint { seed, host_acc: acc, distilled_acc: f32::NAN, host };
            let (t, r) = score_pair(&ck, translator, gen.variant, seed ^ cfg.seed, &other.test)?;
            Ok((acc, t, r))
        })
        .collect::<Result<_>>()?;
    let p = summarize(100.0, &rows);
    Ok(CrossDatasetReport {
        hosts: p.hosts,
        host_mean: p.host_mean,
        translated_mean: p.translated_mean,
        random_init_mean: p.random_init_mean,
        improvement: p.delta,
        stand_in,
    })
}

/// Trains a flat-head translator on a dataset of MLP or attention targets and reports
/// its best evaluation accuracy beside the random-init mean on the same hosts.
pub fn study_cross_architecture(
    ds: &PairDataset,
    model: &MixerConfig,
    train: &TrainConfig,
    eval_hosts: usize,
    test: &ImageSet,
    out: Option<&Path>,
) -> Result<CrossArchReport> {
    let variant = ds.variant();
    ensure!(
        matches!(variant, TargetVariant::MlpBlock | TargetVariant::AttnBlock),
        KtError::Config(format!("cross-architecture study needs mlp or attn targets, dataset has {}", variant.name()))
    );
    ensure!(
        model.target == variant && model.channels() == ds.channels(),
        KtError::Mismatch {
            expected: format!("C={} {}", ds.channels(), variant.name()),
            found: format!("translator C={} {}", model.channels(), model.target.name()),
        }
    );
    let (pairs, eval) = split_train_eval(ds, eval_hosts)?;
    let inputs = TrainInputs { train: &pairs, eval: &eval, test };
    let run = train_translator(&inputs, &TranslatorSpec::Mixer(model.clone()), train, out, RunOptions::default())?;
    let random: Vec<f32> = eval
        .par_iter()
        .map(|h| {
            let p = baseline_random_init(variant, ds.channels(), train.seed ^ h.pair.seed.rotate_left(17))?;
            plug_and_score(&h.checkpoint, &p, test)
        })
        .collect::<Result<_>>()?;
    Ok(CrossArchReport {
        variant,
        translation_best: run.history.best_acc.unwrap_or(0.0),
        random_init_mean: mean(&random),
        history: run.history,
    })
}

fn area_down(src: &[f32], side: usize, to: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; to * to];
    let scale = side as f64 / to as f64;
    for oy in 0..to {
        let (y0, y1) = (oy as f64 * scale, (oy + 1) as f64 * scale);
        for ox in 0..to {
            let (x0, x1) = (ox as f64 * scale, (ox + 1) as f64 * scale);
            let mut acc = 0.0f64;
            for iy in y0.floor() as usize..(y1.ceil() as usize).min(side) {
                let wy = (y1.min(iy as f64 + 1.0) - y0.max(iy as f64)).max(0.0);
                for ix in x0.floor() as usize..(x1.ceil() as usize).min(side) {
                    let wx = (x1.min(ix as f64 + 1.0) - x0.max(ix as f64)).max(0.0);
                    acc += wy * wx * src[iy * side + ix] as f64;
                }
            }
            out[oy * to + ox] = (acc / (scale * scale)) as f32;
        }
    }
    out
}

fn bilinear_up(src: &[f32], side: usize, to: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; to * to];
    let scale = side as f32 / to as f32;
    let coord = |o: usize| {
        let c = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f32);
        let i = (c.floor() as usize).min(side - 2);
        (i, c - i as f32)
    };
    for oy in 0..to {
        let (iy, fy) = coord(oy);
        for ox in 0..to {
            let (ix, fx) = coord(ox);
            let p = |y: usize, x: usize| src[y * side + x];
            let top = p(iy, ix) * (1.0 - fx) + p(iy, ix + 1) * fx;
            let bot = p(iy + 1, ix) * (1.0 - fx) + p(iy + 1, ix + 1) * fx;
            out[oy * to + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Downsamples each square image to `side`×`side` by area averaging and upsamples it
/// back bilinearly. Applied to MNIST with side 16 this stands in for USPS when no
/// converted USPS files are present.
pub fn resample_through(set: &ImageSet, side: usize) -> Result<ImageSet> {
    ensure!(
        set.rows == set.cols && side >= 2 && side <= set.rows,
        KtError::Invalid(format!("cannot resample {}x{} images through {side}", set.rows, set.cols))
    );
    let n = set.rows;
    let pixels = set
        .pixels
        .par_chunks_exact(n * n)
        .flat_map_iter(|img| bilinear_up(&area_down(img, n, side), side, n))
        .collect();
    Ok(ImageSet { rows: n, cols: n, pixels, labels: set.labels.clone() })
}
