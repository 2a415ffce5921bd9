//! Plug-in evaluation, the three baselines, accuracy histograms and reports.

mod studies;

use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, KtError, Result};
use crate::host::{evaluate, ImageSet, LargeBlockParams, TargetBlockParams, TargetVariant};
use crate::pairs::{EvalHost, HostCheckpoint, ParamPair};
use crate::rng::{stream_rng, streams};
use crate::translators::{AnyTranslator, Translate};

pub use studies::{
    check_translator, resample_through, study_cross_architecture, study_cross_dataset, study_incomplete_data, CrossArchReport,
    CrossDatasetReport, IncompleteDataReport, PercentPoint, StudyConfig,
};

/// Images per forward chunk during scoring.
const SCORE_BATCH: usize = 256;

/// Test accuracy of the checkpoint's host with `small` in the target slot.
///
/// Stem, head and their batch-norm state come from the checkpoint unchanged.
pub fn plug_and_score(ck: &HostCheckpoint, small: &TargetBlockParams, test: &ImageSet) -> Result<f32> {
    ensure!(
        small.channels() == ck.host.channels(),
        KtError::Mismatch {
            expected: format!("C={}", ck.host.channels()),
            found: format!("C={}", small.channels()),
        }
    );
    let host = ck.host.with_target(small)?;
    Ok(evaluate(&host, test, SCORE_BATCH))
}

/// Runs `model` on a list of large blocks, producing `variant` target parameters.
pub fn translate(model: &AnyTranslator, larges: &[&LargeBlockParams], variant: TargetVariant) -> Result<Vec<TargetBlockParams>> {
    if larges.is_empty() {
        return Ok(Vec::new());
    }
    let c = larges[0].channels();
    ensure!(
        model.in_len() == 18 * c * c && model.out_len() == variant.target_len(c),
        KtError::Mismatch {
            expected: format!("translator for C={c} {} ({} -> {} values)", variant.name(), 18 * c * c, variant.target_len(c)),
            found: format!("translator with {} -> {} values", model.in_len(), model.out_len()),
        }
    );
    let mut out = Vec::with_capacity(larges.len());
    for chunk in larges.chunks(64) {
        let x: Vec<f32> = chunk.iter().flat_map(|l| l.flat()).collect();
        let y = model.predict(&x, chunk.len());
        for row in y.chunks_exact(model.out_len()) {
            out.push(TargetBlockParams::from_flat(variant, c, row)?);
        }
    }
    Ok(out)
}

/// Fresh fan-in uniform target parameters, deterministic per seed.
pub fn baseline_random_init(variant: TargetVariant, c: usize, seed: u64) -> Result<TargetBlockParams> {
    TargetBlockParams::random_init(variant, c, &mut stream_rng(seed, &[streams::BASELINE, 0]))
}

/// `count` training records' target parameters, sampled without replacement.
pub fn baseline_random_replacement(train: &[ParamPair], count: usize, seed: u64) -> Result<Vec<TargetBlockParams>> {
    ensure!(
        count <= train.len(),
        KtError::Config(format!("cannot draw {count} records from {} without replacement", train.len()))
    );
    let mut rng = stream_rng(seed, &[streams::BASELINE, 1]);
    Ok(sample(&mut rng, train.len(), count)
        .into_iter()
        .map(|i| train[i].target.clone())
        .collect())
}

/// Mean squared distance between two large blocks, both convolutions concatenated.
pub fn large_block_distance(a: &LargeBlockParams, b: &LargeBlockParams) -> f64 {
    let (x, y) = (a.flat(), b.flat());
    let s: f64 = x.iter().zip(&y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
    s / x.len() as f64
}

/// Index of the training record whose large block is nearest to `query`; ties go to the lowest seed.
pub fn greedy_index(query: &LargeBlockParams, train: &[ParamPair]) -> Result<usize> {
    ensure!(!train.is_empty(), KtError::Invalid("greedy replacement needs a nonempty training set".into()));
    ensure!(
        train[0].channels() == query.channels(),
        KtError::Mismatch {
            expected: format!("C={}", train[0].channels()),
            found: format!("C={}", query.channels()),
        }
    );
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in train.iter().enumerate() {
        let d = large_block_distance(query, &p.large);
        if d < best_d || (d == best_d && p.seed < train[best].seed) {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

pub fn baseline_greedy_replacement(query: &LargeBlockParams, train: &[ParamPair]) -> Result<TargetBlockParams> {
    Ok(train[greedy_index(query, train)?].target.clone())
}

/// Counts per 5-point bin. Bin `k` is labeled `5(k+1)` and holds `[5k, 5k+5)` percent;
/// 100% falls into the last bin, so the bins partition `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub labels: Vec<u32>,
    pub counts: Vec<usize>,
}

pub const HIST_BINS: usize = 20;

/// Bin index of an accuracy in `[0, 1]`.
///
/// The `1e-5` guard absorbs `f32` representation error so that, for example, `0.35f32`
/// (stored as 0.34999999) lands in the bin starting at 35%.
pub fn hist_bin(acc: f32) -> usize {
    let k = (acc.clamp(0.0, 1.0) as f64 * 20.0 + 1e-5).floor() as usize;
    k.min(HIST_BINS - 1)
}

pub fn accuracy_histogram(accs: &[f32]) -> Histogram {
    let mut counts = vec![0; HIST_BINS];
    for &a in accs {
        counts[hist_bin(a)] += 1;
    }
    Histogram {
        labels: (1..=HIST_BINS as u32).map(|k| 5 * k).collect(),
        counts,
    }
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_label,lower_pct,upper_pct,count\n");
        for (l, c) in self.labels.iter().zip(&self.counts) {
            s.push_str(&format!("{l},{},{l},{c}\n", l - 5));
        }
        s
    }
}

/// How the target-block parameters of each evaluation host are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Translation,
    RandomInit,
    RandomReplacement,
    Greedy,
    /// The record's own distilled parameters (upper reference).
    Distilled,
}

impl Method {
    pub const BASELINES: [Method; 3] = [Method::RandomInit, Method::RandomReplacement, Method::Greedy];

    pub fn name(self) -> &'static str {
        match self {
            Method::Translation => "translation",
            Method::RandomInit => "random-init",
            Method::RandomReplacement => "random-replacement",
            Method::Greedy => "greedy",
            Method::Distilled => "distilled",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = KtError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "translation" => Method::Translation,
            "random-init" | "random" => Method::RandomInit,
            "random-replacement" => Method::RandomReplacement,
            "greedy" => Method::Greedy,
            "distilled" => Method::Distilled,
            _ => {
                return Err(KtError::Config(format!(
                    "unknown method `{s}` (expected translation, random-init, random-replacement, greedy, distilled or all)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostScore {
    pub seed: u64,
    pub accuracy: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub hosts: Vec<HostScore>,
    pub mean: f64,
    pub best: f32,
    pub histogram: Histogram,
    /// Digest of the inputs (dataset, translator, seed) the report was computed from.
    pub config_digest: String,
}

impl EvalReport {
    pub fn new(method: Method, hosts: Vec<HostScore>, config_digest: String) -> Self {
        let accs: Vec<f32> = hosts.iter().map(|h| h.accuracy).collect();
        Self {
            method,
            mean: mean(&accs),
            best: accs.iter().copied().fold(0.0, f32::max),
            histogram: accuracy_histogram(&accs),
            hosts,
            config_digest,
        }
    }

    /// Writes `<stem>.json` and `<stem>-histogram.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| KtError::io(&json, e))?;
        let csv = dir.join(format!("{stem}-histogram.csv"));
        std::fs::write(&csv, self.histogram.to_csv()).map_err(|e| KtError::io(&csv, e))
    }
}

/// Arithmetic mean in `f64`; 0 for an empty list.
pub fn mean(accs: &[f32]) -> f64 {
    if accs.is_empty() {
        0.0
    } else {
        accs.iter().map(|&a| a as f64).sum::<f64>() / accs.len() as f64
    }
}

/// Inputs shared by every evaluation method.
pub struct EvalContext<'a> {
    pub hosts: &'a [EvalHost],
    pub train: &'a [ParamPair],
    pub test: &'a ImageSet,
    pub translator: Option<&'a AnyTranslator>,
    pub seed: u64,
}

/// Per-host target parameters chosen by `method`, in host order.
pub fn choose_params(method: Method, ctx: &EvalContext<'_>) -> Result<Vec<TargetBlockParams>> {
    let hosts = ctx.hosts;
    let Some(first) = hosts.first() else { return Ok(Vec::new()) };
    let c = first.pair.channels();
    let variant = first.pair.variant();
    match method {
        Method::Translation => {
            let model = ctx
                .translator
                .ok_or_else(|| KtError::Config("translation method needs a translator checkpoint".into()))?;
            let larges: Vec<&LargeBlockParams> = hosts.iter().map(|h| &h.pair.large).collect();
            translate(model, &larges, variant)
        }
        Method::RandomInit => hosts
            .iter()
            .map(|h| baseline_random_init(variant, c, ctx.seed ^ h.pair.seed.rotate_left(17)))
            .collect(),
        Method::RandomReplacement => baseline_random_replacement(ctx.train, hosts.len(), ctx.seed),
        Method::Greedy => hosts
            .iter()
            .map(|h| baseline_greedy_replacement(&h.pair.large, ctx.train))
            .collect(),
        Method::Distilled => Ok(hosts.iter().map(|h| h.pair.target.clone()).collect()),
    }
}

/// Scores `params[i]` inside `hosts[i]`, in parallel across hosts.
pub fn score_hosts(hosts: &[EvalHost], params: &[TargetBlockParams], test: &ImageSet) -> Result<Vec<HostScore>> {
    ensure!(
        hosts.len() == params.len(),
        KtError::shape("score_hosts", &[hosts.len()], &[params.len()])
    );
    hosts
        .par_iter()
        .zip(params)
        .map(|(h, p)| {
            Ok(HostScore {
                seed: h.pair.seed,
                accuracy: plug_and_score(&h.checkpoint, p, test)?,
            })
        })
        .collect()
}

pub fn run_method(method: Method, ctx: &EvalContext<'_>, config_digest: &str) -> Result<EvalReport> {
    let params = choose_params(method, ctx)?;
    let scores = score_hosts(ctx.hosts, &params, ctx.test)?;
    Ok(EvalReport::new(method, scores, config_digest.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::{HostModel, HostSpec};
    use crate::rng::stream_rng;

    fn large(seed: u64, offset: f32) -> LargeBlockParams {
        let flat: Vec<f32> = (0..648).map(|i| ((i as f32 + seed as f32) * 0.37).sin() + offset).collect();
        LargeBlockParams::from_flat(6, &flat).unwrap()
    }

    fn record(seed: u64, l: LargeBlockParams) -> ParamPair {
        ParamPair {
            seed,
            large: l,
            target: TargetBlockParams::random_init(TargetVariant::SmallConv, 6, &mut stream_rng(seed, &[7])).unwrap(),
            host_acc: 0.5,
            distilled_acc: 0.4,
        }
    }

    #[test]
    fn histogram_boundaries() {
        let h = accuracy_histogram(&[0.30; 4]);
        assert_eq!(h.counts[hist_bin(0.30)], 4);
        assert_eq!(h.labels[hist_bin(0.30)], 35);
        assert_eq!(h.labels[hist_bin(0.35)], 40);
        assert_eq!(h.labels[hist_bin(0.3499)], 35);
        assert_eq!(h.labels[hist_bin(1.0)], 100);
        assert_eq!(h.labels[hist_bin(0.0)], 5);
        assert_eq!(accuracy_histogram(&[]).counts, vec![0; 20]);
        let many: Vec<f32> = (0..=2000).map(|i| i as f32 / 2000.0).collect();
        assert_eq!(accuracy_histogram(&many).counts.iter().sum::<usize>(), 2001);
        // every 0.05% step lands in the bin its exact percentage belongs to
        for i in 0..2000 {
            assert_eq!(hist_bin(i as f32 / 2000.0), i / 100, "{i}");
        }
    }

    #[test]
    fn random_init_is_seeded_and_bounded() {
        let a = baseline_random_init(TargetVariant::SmallConv, 6, 1).unwrap();
        let b = baseline_random_init(TargetVariant::SmallConv, 6, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, baseline_random_init(TargetVariant::SmallConv, 6, 1).unwrap());
        let TargetBlockParams::Small(s) = &a else { unreachable!() };
        let bound = (6.0f32 / 54.0).sqrt();
        assert!(s.conv1.data().iter().all(|v| v.abs() <= bound));
        // mean concentration over many draws
        let vals: Vec<f64> = (0..200)
            .flat_map(|k| baseline_random_init(TargetVariant::SmallConv, 6, k).unwrap().flat())
            .map(|v| v as f64)
            .collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 3.0 * sd / n.sqrt());
    }

    #[test]
    fn random_replacement_samples_members_without_replacement() {
        let train: Vec<ParamPair> = (0..10).map(|s| record(s, large(s, 0.0))).collect();
        let all = baseline_random_replacement(&train, 10, 3).unwrap();
        for t in &train {
            assert_eq!(all.iter().filter(|p| **p == t.target).count(), 1);
        }
        assert!(baseline_random_replacement(&train, 11, 3).is_err());
        let big: Vec<ParamPair> = (0..40).map(|s| record(s, large(s, 0.0))).collect();
        assert_ne!(
            baseline_random_replacement(&big, 10, 1).unwrap(),
            baseline_random_replacement(&big, 10, 2).unwrap()
        );
    }

    #[test]
    fn greedy_picks_the_nearest_and_breaks_ties_low() {
        let base = large(0, 0.0);
        let train = vec![
            record(5, large(0, 0.3)),
            record(9, large(0, 0.1)),
            record(2, large(0, 0.1)),
            record(4, large(0, -0.2)),
        ];
        // distances ≈ 0.09, 0.01, 0.01, 0.04: exact tie between seeds 9 and 2
        assert_eq!(greedy_index(&base, &train).unwrap(), 2);
        assert_eq!(baseline_greedy_replacement(&train[0].large, &train).unwrap(), train[0].target);
    }

    #[test]
    fn zero_target_is_scorable_and_c_mismatch_is_rejected() {
        let test = ImageSet::from_raw(28, 28, &vec![10u8; 3 * 784], vec![1, 2, 3]).unwrap();
        let host: HostModel = HostModel::build(HostSpec::new(6, TargetVariant::LargeConv).unwrap(), 0).unwrap();
        let ck = HostCheckpoint { seed: 0, host_acc: 0.0, distilled_acc: 0.0, host };
        let z = TargetBlockParams::zeros(TargetVariant::SmallConv, 6).unwrap();
        let acc = plug_and_score(&ck, &z, &test).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let wrong = TargetBlockParams::zeros(TargetVariant::SmallConv, 4).unwrap();
        assert!(matches!(plug_and_score(&ck, &wrong, &test), Err(KtError::Mismatch { .. })));
    }
}
