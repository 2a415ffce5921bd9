//! Experiment orchestration behind the `kt` binary: configuration files, run
//! directories, reports and plots for every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, KtError, Result};
use crate::eval::{
    check_translator, resample_through, run_method, study_cross_architecture, study_cross_dataset,
    study_incomplete_data, CrossArchReport, CrossDatasetReport, EvalContext, EvalReport, IncompleteDataReport, Method,
    StudyConfig,
};
use crate::host::{data_root, DigitData, ImageSet, TargetVariant};
use crate::pairs::{generate_dataset, split_train_eval, GenConfig, GenOptions, PairDataset};
use crate::plots::{bar_chart, histogram_chart, line_chart, Series};
use crate::trainer::{pilot_benchmark, train_translator, PilotBenchConfig, PilotCurve, RunHistory, RunOptions, TrainConfig, TrainInputs};
use crate::translators::{load_translator, MixerConfig, PilotKind, Preset, TranslatorSpec};
use crate::nn::Parameterized;

/// Translator architecture: a preset, or an explicit mixer configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslatorSection {
    pub preset: Preset,
    /// Overrides `preset` when present.
    pub model: Option<MixerConfig>,
}

impl Default for TranslatorSection {
    fn default() -> Self {
        Self { preset: Preset::Small, model: None }
    }
}

impl TranslatorSection {
    /// The mixer for a dataset with `c` channels and `variant` targets.
    pub fn resolve(&self, c: usize, variant: TargetVariant) -> Result<MixerConfig> {
        let m = match &self.model {
            Some(m) => m.clone(),
            None => MixerConfig { target: variant, ..MixerConfig::preset(self.preset, c) },
        };
        ensure!(
            m.channels() == c && m.target == variant,
            KtError::Mismatch {
                expected: format!("dataset C={c} {}", variant.name()),
                found: format!("translator C={} {}", m.channels(), m.target.name()),
            }
        );
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Held-out evaluation hosts: the largest seeds of the dataset.
    pub hosts: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { hosts: 20 }
    }
}

/// Complete configuration of a run. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Copied into every section's seed by [`RunConfig::resolved`].
    pub seed: u64,
    pub generation: GenConfig,
    pub translator: TranslatorSection,
    pub training: TrainConfig,
    pub evaluation: EvalSection,
    pub studies: StudyConfig,
    pub pilot: PilotBenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generation: GenConfig::default(),
            translator: TranslatorSection::default(),
            training: TrainConfig::default(),
            evaluation: EvalSection::default(),
            studies: StudyConfig::default(),
            pilot: PilotBenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON config; errors carry the file name, line and column.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => KtError::Missing(path.to_path_buf()),
            _ => KtError::io(path, e),
        })?;
        Self::parse(&text).map_err(|e| KtError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Copy with the global seed propagated into the sections.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.training.seed = self.seed;
        c.studies.seed = self.seed;
        c.pilot.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.studies.validate()?;
        ensure!(self.evaluation.hosts >= 1, KtError::Config("evaluation.hosts must be >= 1".into()));
        Ok(())
    }

    /// SHA-256 of the canonical JSON, excluding the generator's output path and parallelism.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(g) = v.get_mut("generation").and_then(|g| g.as_object_mut()) {
            g.remove("output");
            g.remove("jobs");
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| KtError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => KtError::Missing(path.to_path_buf()),
        _ => KtError::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| KtError::Corrupt { path: path.to_path_buf(), reason: e.to_string() })
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| KtError::io(dir, e))
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => KtError::Missing(path.to_path_buf()),
        _ => KtError::io(path, e),
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn load_mnist() -> Result<DigitData> {
    DigitData::load(&data_root().join("mnist"))
}

/// USPS from `<data root>/usps` in 28×28 IDX form, or the resampled-MNIST stand-in.
/// The flag is true for the stand-in.
pub fn load_usps(mnist: &DigitData) -> Result<(DigitData, bool)> {
    let dir = data_root().join("usps");
    if dir.is_dir() {
        return Ok((DigitData::load(&dir)?, false));
    }
    log::warn!("{} not found; using MNIST resampled through 16x16 as a stand-in", dir.display());
    let train = resample_through(&mnist.train, 16)?;
    let test = resample_through(&mnist.test, 16)?;
    Ok((DigitData { train, test }, true))
}

/// Writes the resolved config into `dir/config.json`; with `must_match`, an existing
/// different config is an error instead of being replaced.
fn snapshot_config(dir: &Path, cfg: &RunConfig, must_match: bool) -> Result<()> {
    let path = dir.join("config.json");
    if must_match && path.exists() {
        let stored: RunConfig = read_json(&path)?;
        ensure!(
            stored == *cfg,
            KtError::Config(format!("{} holds a different configuration; refusing to resume", path.display()))
        );
    }
    write_json(&path, cfg)
}

pub fn cmd_generate(cfg: &RunConfig, data: &DigitData, opts: &GenOptions) -> Result<PairDataset> {
    let cfg = cfg.resolved();
    let ds = generate_dataset(&cfg.generation, data, opts)?;
    write_json(&ds.dir.join("run-config.json"), &cfg)?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub dataset: PathBuf,
    pub dataset_digest: String,
    pub config_digest: String,
    pub translator: TranslatorSpec,
    pub param_count: usize,
    pub train_pairs: usize,
    pub eval_hosts: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub best_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub final_train_loss: Option<f64>,
    pub history: RunHistory,
}

fn history_plots(dir: &Path, h: &RunHistory) -> Result<()> {
    let loss = Series { name: "train".into(), points: h.train_loss.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect() };
    line_chart(&dir.join("loss.svg"), "translator training loss", "epoch", "loss", &[loss], true)?;
    if !h.evals.is_empty() {
        let acc = Series { name: "eval".into(), points: h.evals.iter().map(|p| (p.epoch as f64, 100.0 * p.mean_acc)).collect() };
        line_chart(&dir.join("eval.svg"), "mean plug-in accuracy", "epoch", "accuracy (%)", &[acc], false)?;
    }
    Ok(())
}

/// Trains a translator on `dataset`, writing config, metrics, checkpoints and report into `out`.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path, test: &ImageSet, opts: RunOptions) -> Result<TrainReport> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let ds = PairDataset::open(dataset)?;
    let (train, eval) = split_train_eval(&ds, cfg.evaluation.hosts)?;
    let mixer = cfg.translator.resolve(ds.channels(), ds.variant())?;
    let spec = TranslatorSpec::Mixer(mixer);
    make_dir(out)?;
    snapshot_config(out, &cfg, opts.resume)?;
    let inputs = TrainInputs { train: &train, eval: &eval, test };
    let run = train_translator(&inputs, &spec, &cfg.training, Some(out), opts)?;
    let report = TrainReport {
        dataset: ds.dir.clone(),
        dataset_digest: ds.index.content_digest(),
        config_digest: cfg.digest(),
        translator: run.last.spec(),
        param_count: run.last.param_count(),
        train_pairs: train.len(),
        eval_hosts: eval.iter().map(|h| h.pair.seed).collect(),
        epochs: run.history.epochs,
        batch_size: run.history.batch_size,
        best_acc: run.history.best_acc,
        best_epoch: run.history.best_epoch,
        final_train_loss: run.history.train_loss.last().copied(),
        history: run.history,
    };
    write_json(&out.join("report.json"), &report)?;
    history_plots(out, &report.history)?;
    Ok(report)
}

/// Expands `all` into translation plus the three baselines.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item == "all" {
            out.push(Method::Translation);
            out.extend(Method::BASELINES);
        } else {
            out.push(item.parse()?);
        }
    }
    out.dedup();
    ensure!(!out.is_empty(), KtError::Config("no evaluation method given".into()));
    Ok(out)
}

#[derive(Serialize)]
struct EvalInputs<'a> {
    dataset: &'a str,
    translator: Option<&'a str>,
    seed: u64,
    hosts: usize,
}

/// Scores each method on the evaluation hosts; writes `<method>.json`, its histogram
/// CSV and SVG, and `summary.csv` into `out`.
pub fn cmd_eval(
    cfg: &RunConfig,
    dataset: &Path,
    translator: Option<&Path>,
    methods: &[Method],
    out: &Path,
    test: &ImageSet,
) -> Result<Vec<EvalReport>> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let ds = PairDataset::open(dataset)?;
    let (train, eval) = split_train_eval(&ds, cfg.evaluation.hosts)?;
    let model = translator.map(load_translator).transpose()?;
    let translator_digest = translator.map(file_digest).transpose()?;
    if let Some(m) = &model {
        check_translator(m, ds.channels(), ds.variant())?;
    }
    let ds_digest = ds.index.content_digest();
    let digest = hex::encode(Sha256::digest(serde_json::to_vec(&EvalInputs {
        dataset: &ds_digest,
        translator: translator_digest.as_deref(),
        seed: cfg.seed,
        hosts: eval.len(),
    })?));
    make_dir(out)?;
    snapshot_config(out, &cfg, false)?;
    let ctx = EvalContext { hosts: &eval, train: &train, test, translator: model.as_ref(), seed: cfg.seed };
    let mut reports = Vec::new();
    let mut summary = String::from("method,hosts,mean,best\n");
    for &m in methods {
        let r = run_method(m, &ctx, &digest)?;
        r.write(out, m.name())?;
        histogram_chart(&out.join(format!("{}-histogram.svg", m.name())), &format!("{} accuracy", m.name()), &r.histogram)?;
        log::info!("{}: mean {:.4} best {:.4}", m.name(), r.mean, r.best);
        summary.push_str(&format!("{},{},{:.6},{:.6}\n", m.name(), r.hosts.len(), r.mean, r.best));
        reports.push(r);
    }
    write_text(&out.join("summary.csv"), &summary)?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotSeedRun {
    pub seed: u64,
    pub curves: Vec<PilotCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub dataset_digest: String,
    pub runs: Vec<PilotSeedRun>,
    /// Seeds in which the MLP pilot ended with a lower training loss than the attention pilot.
    pub mlp_below_attention: usize,
}

fn final_loss(curves: &[PilotCurve], kind: PilotKind) -> Option<f64> {
    curves.iter().find(|c| c.kind == kind).and_then(|c| c.losses.last().copied())
}

pub fn cmd_study_pilot(cfg: &RunConfig, dataset: &Path, seeds: usize, out: &Path) -> Result<PilotReport> {
    let cfg = cfg.resolved();
    let ds = PairDataset::open(dataset)?;
    make_dir(out)?;
    snapshot_config(out, &cfg, false)?;
    let mut runs = Vec::new();
    for s in 0..seeds as u64 {
        let bench = PilotBenchConfig { seed: cfg.pilot.seed + s, ..cfg.pilot.clone() };
        let curves = pilot_benchmark(&ds.pairs, &PilotKind::ALL, &bench)?;
        let mut csv = String::from("epoch");
        for c in &curves {
            csv.push_str(&format!(",{}", c.kind));
        }
        csv.push('\n');
        for e in 0..bench.epochs {
            csv.push_str(&(e + 1).to_string());
            for c in &curves {
                csv.push_str(&format!(",{:.9e}", c.losses[e]));
            }
            csv.push('\n');
        }
        write_text(&out.join(format!("pilot-seed{}.csv", bench.seed)), &csv)?;
        let series: Vec<Series> = curves
            .iter()
            .map(|c| Series {
                name: format!("{} ({:.1} MFLOPs)", c.kind, c.flops as f64 / 1e6),
                points: c.losses.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect(),
            })
            .collect();
        line_chart(&out.join(format!("pilot-seed{}.svg", bench.seed)), "pilot training loss", "epoch", "loss", &series, true)?;
        runs.push(PilotSeedRun { seed: bench.seed, curves });
    }
    let mlp_below_attention = runs
        .iter()
        .filter(|r| match (final_loss(&r.curves, PilotKind::Mlp), final_loss(&r.curves, PilotKind::Attention)) {
            (Some(m), Some(a)) => m < a,
            _ => false,
        })
        .count();
    let report = PilotReport { dataset_digest: ds.index.content_digest(), runs, mlp_below_attention };
    write_json(&out.join("pilot.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyEnvelope<R> {
    pub translator_digest: String,
    pub config_digest: String,
    pub result: R,
}

pub fn cmd_study_incomplete(cfg: &RunConfig, translator: &Path, data: &DigitData, out: &Path) -> Result<IncompleteDataReport> {
    let cfg = cfg.resolved();
    let model = load_translator(translator)?;
    make_dir(out)?;
    snapshot_config(out, &cfg, false)?;
    let report = study_incomplete_data(&model, data, &cfg.generation, &cfg.studies)?;
    write_text(&out.join("incomplete-data.csv"), &report.to_csv())?;
    let labels: Vec<String> = report.points.iter().map(|p| format!("{}%", p.percent)).collect();
    let deltas: Vec<f64> = report.points.iter().map(|p| 100.0 * p.delta).collect();
    bar_chart(&out.join("incomplete-data.svg"), "translation minus random init", "accuracy difference (points)", &labels, &deltas)?;
    let env = StudyEnvelope { translator_digest: file_digest(translator)?, config_digest: cfg.digest(), result: report };
    write_json(&out.join("incomplete-data.json"), &env)?;
    Ok(env.result)
}

pub fn cmd_study_usps(cfg: &RunConfig, dataset: &Path, translator: &Path, mnist: &DigitData, out: &Path) -> Result<CrossDatasetReport> {
    let cfg = cfg.resolved();
    let model = load_translator(translator)?;
    let ds = PairDataset::open(dataset)?;
    let (_, eval) = split_train_eval(&ds, cfg.evaluation.hosts)?;
    let (usps, stand_in) = load_usps(mnist)?;
    make_dir(out)?;
    snapshot_config(out, &cfg, false)?;
    let gen = GenConfig { channels: ds.channels(), variant: ds.variant(), ..cfg.generation.clone() };
    let report = study_cross_dataset(&model, &eval, &usps, &gen, &cfg.studies, stand_in)?;
    let env = StudyEnvelope { translator_digest: file_digest(translator)?, config_digest: cfg.digest(), result: report };
    write_json(&out.join("usps.json"), &env)?;
    Ok(env.result)
}

pub fn cmd_study_cross_arch(cfg: &RunConfig, dataset: &Path, test: &ImageSet, out: &Path) -> Result<CrossArchReport> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let ds = PairDataset::open(dataset)?;
    let mixer = cfg.translator.resolve(ds.channels(), ds.variant())?;
    make_dir(out)?;
    snapshot_config(out, &cfg, false)?;
    let report = study_cross_architecture(&ds, &mixer, &cfg.training, cfg.evaluation.hosts, test, Some(out))?;
    write_json(&out.join("cross-arch.json"), &report)?;
    history_plots(out, &report.history)?;
    Ok(report)
}

/// Re-renders the plots of a run directory and summarizes its reports as text.
pub fn cmd_report(dir: &Path) -> Result<String> {
    ensure!(dir.is_dir(), KtError::Missing(dir.to_path_buf()));
    let mut lines = vec![format!("# {}", dir.display())];
    let report = dir.join("report.json");
    if report.exists() {
        let r: TrainReport = read_json(&report)?;
        history_plots(dir, &r.history)?;
        lines.push(format!(
            "training: {} params, {} pairs, {} epochs, batch {}, final loss {:.4e}",
            r.param_count,
            r.train_pairs,
            r.epochs,
            r.batch_size,
            r.final_train_loss.unwrap_or(f64::NAN)
        ));
        if let (Some(a), Some(e)) = (r.best_acc, r.best_epoch) {
            lines.push(format!("best eval accuracy {:.2}% at epoch {e}", 100.0 * a));
        }
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| KtError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    for p in entries {
        let Ok(text) = std::fs::read_to_string(&p) else { continue };
        if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
            let name = r.method.name();
            histogram_chart(&dir.join(format!("{name}-histogram.svg")), &format!("{name} accuracy"), &r.histogram)?;
            lines.push(format!("{name}: mean {:.2}% best {:.2}% over {} hosts", 100.0 * r.mean, 100.0 * r.best, r.hosts.len()));
        } else if let Ok(r) = serde_json::from_str::<PilotReport>(&text) {
            lines.push(format!("pilot: mlp below attention in {} of {} seeds", r.mlp_below_attention, r.runs.len()));
        } else if let Ok(r) = serde_json::from_str::<StudyEnvelope<IncompleteDataReport>>(&text) {
            for q in &r.result.points {
                lines.push(format!("{}% data: delta {:+.2} points", q.percent, 100.0 * q.delta));
            }
        } else if let Ok(r) = serde_json::from_str::<StudyEnvelope<CrossDatasetReport>>(&text) {
            lines.push(format!("cross-dataset: improvement {:+.2} points", 100.0 * r.result.improvement));
        } else if let Ok(r) = serde_json::from_str::<CrossArchReport>(&text) {
            lines.push(format!(
                "cross-architecture {}: translation {:.2}% vs random init {:.2}%",
                r.variant.name(),
                100.0 * r.translation_best,
                100.0 * r.random_init_mean
            ));
        }
    }
    let text = lines.join("\n") + "\n";
    write_text(&dir.join("summary.md"), &text)?;
    Ok(text)
}
