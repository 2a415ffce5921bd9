//! Translator training: the per-matrix MSE objective, Adam with cosine annealing,
//! on-the-fly augmentation, periodic plug-in evaluation and resumable run directories.
//!
//! Run directory layout (when an output directory is given):
//!
//! ```text
//! metrics.csv               epoch,lr,train_loss,eval_mean_acc
//! history.json              RunHistory
//! checkpoints/best.ktpr     best-by-eval translator
//! checkpoints/last.ktpr     translator after the latest completed epoch block
//! checkpoints/state.ktpr    weights + Adam moments + history, for --resume
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_flat, AugmentConfig};
use crate::error::{ensure, KtError, Result};
use crate::eval::{mean, score_hosts, translate};
use crate::host::{ImageSet, LargeBlockParams, TargetBlockParams, TargetVariant};
use crate::nn::{cosine_lr, OptimizerState, Parameterized, Scalar, Tensor};
use crate::pairs::format::{write_f32s, Header, HEADER_LEN};
use crate::pairs::{EvalHost, ParamPair};
use crate::rng::{stream_rng, streams};
use crate::translators::pilot::solve_width;
use crate::translators::{save_translator, AnyTranslator, PilotConfig, PilotKind, Translate, TranslatorSpec};

/// Container tag of a resumable training state.
pub const STATE_TAG: u8 = 253;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Requested batch size; clamped to the number of training pairs.
    pub batch_size: usize,
    pub lr: f64,
    /// Dropout of mixer translators; overrides the value in the model config.
    pub dropout: f64,
    pub augment: AugmentConfig,
    pub eval_period: usize,
    pub seed: u64,
    /// Samples per forward/backward chunk. Gradients of all chunks of a batch are
    /// accumulated before the single optimizer step, so this bounds memory only.
    pub micro_batch: usize,
    /// Dataset size the epoch count refers to. With fewer training pairs, epochs grow by
    /// the same factor so the number of sample visits stays fixed.
    pub reference_pairs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 4096,
            lr: 1e-3,
            dropout: 0.0,
            augment: AugmentConfig::default(),
            eval_period: 25,
            seed: 0,
            micro_batch: 64,
            reference_pairs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, KtError::Config("epochs must be >= 1".into()));
        ensure!(self.batch_size >= 1, KtError::Config("batch_size must be >= 1".into()));
        ensure!(self.micro_batch >= 1, KtError::Config("micro_batch must be >= 1".into()));
        ensure!(self.eval_period >= 1, KtError::Config("eval_period must be >= 1".into()));
        ensure!(
            self.lr.is_finite() && self.lr >= 0.0,
            KtError::Config(format!("learning rate {} must be finite and >= 0", self.lr))
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            KtError::Config(format!("dropout {} outside [0, 1)", self.dropout))
        );
        ensure!(
            self.reference_pairs != Some(0),
            KtError::Config("reference_pairs must be >= 1".into())
        );
        self.augment.validate()
    }

    pub fn effective_batch(&self, n_train: usize) -> usize {
        self.batch_size.min(n_train).max(1)
    }

    pub fn effective_epochs(&self, n_train: usize) -> usize {
        match self.reference_pairs {
            Some(r) if n_train > 0 && n_train < r => {
                ((self.epochs as f64 * r as f64 / n_train as f64).round() as usize).max(self.epochs)
            }
            _ => self.epochs,
        }
    }
}

/// Mean over matrices of each matrix's elementwise MSE, for one flattened sample.
fn sample_loss<T: Scalar>(pred: &[T], target: &[T], segments: &[usize]) -> T {
    let mut off = 0;
    let mut total = T::zero();
    for &n in segments {
        let s: T = pred[off..off + n]
            .iter()
            .zip(&target[off..off + n])
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        total += s / T::of(n as f64);
        off += n;
    }
    total / T::of(segments.len() as f64)
}

/// Loss summed over the rows of `pred`, divided by `batch_total`, and its gradient.
///
/// Splitting one batch into chunks and summing the chunk results gives the batch mean.
pub fn loss_and_grad<T: Scalar>(pred: &[T], target: &[T], segments: &[usize], batch_total: usize) -> (T, Vec<T>) {
    let per: usize = segments.iter().sum();
    assert_eq!(pred.len(), target.len(), "prediction/target length");
    assert_eq!(pred.len() % per, 0, "prediction length is not a whole number of samples");
    let nmat = T::of(segments.len() as f64);
    let bt = T::of(batch_total as f64);
    let mut grad = vec![T::zero(); pred.len()];
    let mut loss = T::zero();
    for (r, (p, t)) in pred.chunks_exact(per).zip(target.chunks_exact(per)).enumerate() {
        loss += sample_loss(p, t, segments);
        let g = &mut grad[r * per..(r + 1) * per];
        let mut off = 0;
        for &n in segments {
            let scale = T::of(2.0) / (T::of(n as f64) * nmat * bt);
            for i in off..off + n {
                g[i] = scale * (p[i] - t[i]);
            }
            off += n;
        }
    }
    (loss / bt, grad)
}

/// Batch-mean translation loss between predicted and reference target blocks.
pub fn translation_loss(pred: &[TargetBlockParams], target: &[TargetBlockParams]) -> Result<f64> {
    ensure!(
        pred.len() == target.len() && !pred.is_empty(),
        KtError::shape("translation_loss", &[pred.len()], &[target.len()])
    );
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let (pt, tt) = (p.tensors(), t.tensors());
        ensure!(
            pt.len() == tt.len(),
            KtError::Mismatch { expected: t.variant().name().into(), found: p.variant().name().into() }
        );
        for (a, b) in pt.iter().zip(&tt) {
            ensure!(a.shape() == b.shape(), KtError::shape("translation_loss", b.shape(), a.shape()));
        }
        let pf: Vec<f64> = p.flat().iter().map(|&v| v as f64).collect();
        let tf: Vec<f64> = t.flat().iter().map(|&v| v as f64).collect();
        let segs: Vec<usize> = pt.iter().map(|t| t.len()).collect();
        total += sample_loss(&pf, &tf, &segs);
    }
    Ok(total / pred.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub mean_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub train_loss: Vec<f64>,
    pub lr: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
}

impl RunHistory {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,eval_mean_acc\n");
        for (i, (l, lr)) in self.train_loss.iter().zip(&self.lr).enumerate() {
            let e = i + 1;
            let acc = self
                .evals
                .iter()
                .find(|p| p.epoch == e)
                .map(|p| format!("{:.6}", p.mean_acc))
                .unwrap_or_default();
            s.push_str(&format!("{e},{lr:.9e},{l:.9e},{acc}\n"));
        }
        s
    }

    /// Final eval-point accuracy, if any.
    pub fn final_acc(&self) -> Option<f64> {
        self.evals.last().map(|p| p.mean_acc)
    }
}

pub struct TrainInputs<'a> {
    pub train: &'a [ParamPair],
    pub eval: &'a [EvalHost],
    pub test: &'a ImageSet,
}

/// Run control that never changes the produced trace.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Continue from `checkpoints/state.ktpr` when present.
    pub resume: bool,
    /// Stop (as if interrupted) once this many epochs are complete.
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome {
    pub last: AnyTranslator,
    pub best: Option<AnyTranslator>,
    pub history: RunHistory,
}

fn check_compat(spec: &TranslatorSpec, pairs: &[ParamPair]) -> Result<(usize, TargetVariant)> {
    let first = pairs
        .first()
        .ok_or_else(|| KtError::Config("no training pairs".into()))?;
    let (c, v) = (first.channels(), first.variant());
    let (sc, sv) = match spec {
        TranslatorSpec::Mixer(m) => (m.channels(), m.target),
        TranslatorSpec::Pilot(p) => (p.channels, TargetVariant::SmallConv),
    };
    ensure!(
        sc == c && sv == v,
        KtError::Mismatch {
            expected: format!("dataset C={c} {}", v.name()),
            found: format!("translator C={sc} {}", sv.name()),
        }
    );
    Ok((c, v))
}

/// Mean plug-in accuracy of `model`'s translations over the evaluation hosts.
pub fn eval_mean(model: &AnyTranslator, eval: &[EvalHost], test: &ImageSet) -> Result<f64> {
    let Some(first) = eval.first() else { return Ok(0.0) };
    let larges: Vec<&LargeBlockParams> = eval.iter().map(|h| &h.pair.large).collect();
    let params = translate(model, &larges, first.pair.variant())?;
    let scores = score_hosts(eval, &params, test)?;
    Ok(mean(&scores.iter().map(|s| s.accuracy).collect::<Vec<_>>()))
}

struct RunFiles {
    dir: PathBuf,
}

impl RunFiles {
    fn new(dir: &Path) -> Result<Self> {
        let ck = dir.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(|e| KtError::io(&ck, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn best(&self) -> PathBuf {
        self.dir.join("checkpoints/best.ktpr")
    }

    fn last(&self) -> PathBuf {
        self.dir.join("checkpoints/last.ktpr")
    }

    fn state(&self) -> PathBuf {
        self.dir.join("checkpoints/state.ktpr")
    }

    fn write_text(&self, name: &str, body: &str) -> Result<()> {
        let p = self.dir.join(name);
        std::fs::write(&p, body).map_err(|e| KtError::io(&p, e))
    }
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    spec: TranslatorSpec,
    config: TrainConfig,
    epochs_done: usize,
    adam_step: u64,
    history: RunHistory,
}

fn save_state(path: &Path, meta: &StateMeta, model: &AnyTranslator, opt: &OptimizerState) -> Result<()> {
    let json = serde_json::to_vec(meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(
        &Header { channels: meta.spec.channels() as u32, tag: STATE_TAG, count: 1 }.encode(),
    );
    buf.write_u32::<LittleEndian>(json.len() as u32).expect("vec write");
    buf.extend_from_slice(&json);
    let values = model.flat_values();
    buf.write_u64::<LittleEndian>(values.len() as u64).expect("vec write");
    write_f32s(&mut buf, &values);
    for t in opt.m.iter().chain(&opt.v) {
        write_f32s(&mut buf, t.data());
    }
    let tmp = path.with_extension("part");
    let io = |e| KtError::io(&tmp, e);
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(|e| KtError::io(path, e))
}

fn load_state(path: &Path) -> Result<(StateMeta, Vec<f32>, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => KtError::Missing(path.to_path_buf()),
        _ => KtError::io(path, e),
    })?;
    let corrupt = |r: &str| KtError::Corrupt { path: path.to_path_buf(), reason: r.to_string() };
    let h = Header::decode(&bytes, path)?;
    ensure!(h.tag == STATE_TAG, corrupt("not a training state"));
    let mut r = &bytes[HEADER_LEN..];
    let n = r.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated"))? as usize;
    ensure!(r.len() >= n, corrupt("truncated metadata"));
    let meta: StateMeta = serde_json::from_slice(&r[..n]).map_err(|e| corrupt(&e.to_string()))?;
    r = &r[n..];
    let count = r.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated"))? as usize;
    ensure!(r.len() == 12 * count, corrupt("weight and moment sizes disagree"));
    let vals: Vec<f32> = r.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let (w, mv) = vals.split_at(count);
    Ok((meta, w.to_vec(), mv.to_vec()))
}

fn restore_moments(opt: &mut OptimizerState, flat: &[f32]) {
    let mut off = 0;
    for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Trains a translator built from `spec`.
///
/// Shuffling, augmentation and dropout draw from generators keyed by `(seed, epoch)`,
/// so a resumed run continues with exactly the trace an uninterrupted run would have.
pub fn train_translator(
    inputs: &TrainInputs<'_>,
    spec: &TranslatorSpec,
    cfg: &TrainConfig,
    out: Option<&Path>,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (c, variant) = check_compat(spec, inputs.train)?;
    let spec = match spec {
        TranslatorSpec::Mixer(m) => TranslatorSpec::Mixer(crate::translators::MixerConfig { dropout: cfg.dropout, ..m.clone() }),
        other => other.clone(),
    };
    let n = inputs.train.len();
    let epochs = cfg.effective_epochs(n);
    let batch = cfg.effective_batch(n);
    let segments: Vec<usize> = variant.target_shapes(c).iter().map(|s| s.iter().product()).collect();

    let mut model: AnyTranslator = AnyTranslator::build(&spec, &mut stream_rng(cfg.seed, &[streams::TRANSLATOR_INIT]))?;
    let mut opt = OptimizerState::new(model.params(), cfg.lr);
    let mut history = RunHistory { epochs, batch_size: batch, ..Default::default() };
    let mut best: Option<AnyTranslator> = None;
    let mut start = 0;

    let files = out.map(RunFiles::new).transpose()?;
    if let (Some(f), true) = (&files, opts.resume) {
        if f.state().exists() {
            let (meta, w, mv) = load_state(&f.state())?;
            ensure!(
                meta.spec == spec && meta.config == *cfg,
                KtError::Config(format!("{} was written by a different configuration", f.state().display()))
            );
            model.set_flat_values(&w)?;
            restore_moments(&mut opt, &mv);
            opt.step = meta.adam_step;
            history = meta.history;
            start = meta.epochs_done;
            if f.best().exists() {
                best = Some(crate::translators::load_translator(&f.best())?);
            }
            log::info!("resuming at epoch {start} of {epochs}");
        }
    }

    let in_len = model.in_len();
    let out_len = model.out_len();
    for epoch in start..epochs {
        let lr = cosine_lr(epoch, epochs, cfg.lr)?;
        opt.lr = lr;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, &[streams::EPOCH_SHUFFLE, epoch as u64]));
        let mut aug_rng = stream_rng(cfg.seed, &[streams::AUGMENT, epoch as u64]);
        let mut drop_rng = stream_rng(cfg.seed, &[streams::DROPOUT, epoch as u64]);
        let mut epoch_loss = 0.0f64;
        for (bi, idx) in order.chunks(batch).enumerate() {
            model.zero_grad();
            let mut batch_loss = 0.0f64;
            for chunk in idx.chunks(cfg.micro_batch) {
                let mut x = Vec::with_capacity(chunk.len() * in_len);
                let mut t = Vec::with_capacity(chunk.len() * out_len);
                for &i in chunk {
                    let p = &inputs.train[i];
                    let mut flat = p.large.flat();
                    augment_flat(&mut flat, &cfg.augment, &mut aug_rng);
                    x.extend_from_slice(&flat);
                    t.extend(p.target.flat());
                }
                let rng: Option<&mut dyn RngCore> = if cfg.dropout > 0.0 { Some(&mut drop_rng) } else { None };
                let (y, cache) = model.forward(&x, chunk.len(), rng);
                let (l, dy) = loss_and_grad(&y, &t, &segments, idx.len());
                batch_loss += l as f64;
                model.backward(&cache, &dy);
            }
            ensure!(
                batch_loss.is_finite(),
                KtError::NonFinite(format!("translator loss at epoch {} batch {bi}", epoch + 1))
            );
            opt.adam_step(&mut model.params_mut())
                .map_err(|e| KtError::NonFinite(format!("{e} at epoch {} batch {bi}", epoch + 1)))?;
            epoch_loss += batch_loss * idx.len() as f64;
        }
        let e = epoch + 1;
        history.train_loss.push(epoch_loss / n as f64);
        history.lr.push(lr);
        log::info!("epoch {e}/{epochs} lr {lr:.3e} loss {:.6e}", epoch_loss / n as f64);

        let eval_now = e % cfg.eval_period == 0 && !inputs.eval.is_empty();
        if eval_now {
            let acc = eval_mean(&model, inputs.eval, inputs.test)?;
            history.evals.push(EvalPoint { epoch: e, mean_acc: acc });
            log::info!("epoch {e}: eval mean accuracy {acc:.4}");
            if history.best_acc.is_none_or(|b| acc > b) {
                history.best_acc = Some(acc);
                history.best_epoch = Some(e);
                if let Some(f) = &files {
                    save_translator(&f.best(), &model)?;
                }
                best = Some(model.clone());
            }
        }
        if let Some(f) = &files {
            if eval_now || e == epochs {
                save_translator(&f.last(), &model)?;
                history.checkpoints = [f.best(), f.last()].into_iter().filter(|p| p.exists()).collect();
                let meta = StateMeta {
                    spec: spec.clone(),
                    config: cfg.clone(),
                    epochs_done: e,
                    adam_step: opt.step,
                    history: history.clone(),
                };
                save_state(&f.state(), &meta, &model, &opt)?;
                f.write_text("history.json", &serde_json::to_string_pretty(&history)?)?;
            }
            f.write_text("metrics.csv", &history.metrics_csv())?;
        }
        if opts.stop_after == Some(e) && e < epochs {
            if let Some(f) = &files {
                save_translator(&f.last(), &model)?;
                let meta = StateMeta {
                    spec: spec.clone(),
                    config: cfg.clone(),
                    epochs_done: e,
                    adam_step: opt.step,
                    history: history.clone(),
                };
                save_state(&f.state(), &meta, &model, &opt)?;
            }
            return Err(KtError::Interrupted(e));
        }
    }
    Ok(TrainOutcome { last: model, best, history })
}

/// Training-loss curve of one FLOPs-matched pilot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotCurve {
    pub kind: PilotKind,
    pub config: PilotConfig,
    pub flops: u64,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PilotBenchConfig {
    pub budget: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub pairs: usize,
    pub seed: u64,
}

impl Default for PilotBenchConfig {
    fn default() -> Self {
        Self { budget: 20_000_000, epochs: 100, batch_size: 128, lr: 1e-3, pairs: 1024, seed: 0 }
    }
}

/// Trains each pilot kind on the same pairs with the same batch order and optimizer.
pub fn pilot_benchmark(pairs: &[ParamPair], kinds: &[PilotKind], cfg: &PilotBenchConfig) -> Result<Vec<PilotCurve>> {
    ensure!(
        pairs.len() >= cfg.pairs,
        KtError::Config(format!("pilot benchmark needs {} pairs, dataset has {}", cfg.pairs, pairs.len()))
    );
    let pairs = &pairs[..cfg.pairs];
    let c = pairs.first().map(|p| p.channels()).unwrap_or(6);
    let test = ImageSet { rows: 28, cols: 28, pixels: Vec::new(), labels: Vec::new() };
    let inputs = TrainInputs { train: pairs, eval: &[], test: &test };
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: cfg.seed,
        micro_batch: cfg.batch_size,
        ..Default::default()
    };
    kinds
        .iter()
        .map(|&kind| {
            let pc = solve_width(kind, c, kind.default_depth(), cfg.budget)?;
            log::info!("pilot {kind}: width {} depth {} flops {}", pc.width, pc.depth, pc.flops());
            let run = train_translator(&inputs, &TranslatorSpec::Pilot(pc.clone()), &tc, None, RunOptions::default())?;
            Ok(PilotCurve { kind, flops: pc.flops(), config: pc, losses: run.history.train_loss })
        })
        .collect()
}

/// Flattened `f32` tensors of a target block, for tests and tools.
pub fn target_tensors(p: &TargetBlockParams) -> Vec<Tensor<f32>> {
    p.tensors().into_iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;
    use crate::translators::MixerConfig;

    fn small(fill1: f32, fill2: f32) -> TargetBlockParams {
        TargetBlockParams::from_tensors(
            TargetVariant::SmallConv,
            6,
            vec![Tensor::filled(&[3, 6, 3, 3], fill1), Tensor::filled(&[6, 3, 3, 3], fill2)],
        )
        .unwrap()
    }

    #[test]
    fn loss_fixtures() {
        let a = small(0.5, -0.25);
        assert_eq!(translation_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        // constant offset c in every element → c²
        let b = small(0.5 + 0.3, -0.25 + 0.3);
        assert!((translation_loss(&[b], &[a.clone()]).unwrap() - 0.09).abs() < 1e-6);
        // matrix MSEs 0.02 and 0.04 → 0.03
        let c = small(0.5 + 0.02f32.sqrt(), -0.25 - 0.04f32.sqrt());
        assert!((translation_loss(&[c], &[a]).unwrap() - 0.03).abs() < 1e-6);
    }

    #[test]
    fn duplicate_sample_gives_identical_gradient() {
        let segs = [3, 5];
        let p: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let t: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let (l1, g1) = loss_and_grad(&p, &t, &segs, 1);
        let p2 = [p.clone(), p.clone()].concat();
        let t2 = [t.clone(), t.clone()].concat();
        let (l2, g2) = loss_and_grad(&p2, &t2, &segs, 2);
        assert!((l1 - l2).abs() < 1e-15);
        for i in 0..8 {
            assert!((2.0 * g2[i] - g1[i]).abs() < 1e-15);
            assert_eq!(g2[i], g2[i + 8]);
        }
        let f = |x: &[f64]| loss_and_grad(x, &t2, &segs, 2);
        assert!(finite_diff_check(f, &p2, 16, 0).unwrap().max_rel_error < 1e-6);
    }

    #[test]
    fn epoch_and_batch_rules() {
        let cfg = TrainConfig { reference_pairs: Some(2000), ..Default::default() };
        assert_eq!(cfg.effective_epochs(512), 1172);
        assert_eq!(cfg.effective_epochs(4000), 300);
        assert_eq!(cfg.effective_batch(512), 512);
        assert_eq!(TrainConfig { batch_size: 128, ..Default::default() }.effective_batch(1024), 128);
        assert!(TrainConfig { eval_period: 0, ..Default::default() }.validate().is_err());
    }

    pub(crate) fn synthetic_pairs(n: usize) -> Vec<ParamPair> {
        (0..n as u64)
            .map(|s| {
                let mut rng = stream_rng(s, &[99]);
                let large: Vec<f32> = (0..648).map(|i| ((i as f32 + s as f32 * 3.1) * 0.13).sin() * 0.3).collect();
                let target = TargetBlockParams::from_flat(
                    TargetVariant::SmallConv,
                    6,
                    &large[..324].iter().map(|v| v * 0.5).collect::<Vec<_>>(),
                )
                .unwrap();
                let _ = &mut rng;
                ParamPair { seed: s, large: LargeBlockParams::from_flat(6, &large).unwrap(), target, host_acc: 0.5, distilled_acc: 0.4 }
            })
            .collect()
    }

    fn tiny_spec() -> TranslatorSpec {
        TranslatorSpec::Mixer(MixerConfig {
            num_layers: 1,
            seq_len: 72,
            hidden: 16,
            token_mlp_dim: 16,
            channel_mlp_dim: 32,
            dropout: 0.0,
            target: TargetVariant::SmallConv,
        })
    }

    #[test]
    fn smoke_descends_and_is_deterministic() {
        let pairs = synthetic_pairs(64);
        let test = ImageSet { rows: 28, cols: 28, pixels: vec![], labels: vec![] };
        let inputs = TrainInputs { train: &pairs, eval: &[], test: &test };
        let cfg = TrainConfig { epochs: 5, batch_size: 16, micro_batch: 5, ..Default::default() };
        let a = train_translator(&inputs, &tiny_spec(), &cfg, None, RunOptions::default()).unwrap();
        let h = &a.history;
        assert!(h.train_loss.last().unwrap() < &h.train_loss[0], "{:?}", h.train_loss);
        let b = train_translator(&inputs, &tiny_spec(), &cfg, None, RunOptions::default()).unwrap();
        assert_eq!(h.train_loss, b.history.train_loss);
        for (e, lr) in h.lr.iter().enumerate() {
            assert_eq!(*lr, cosine_lr(e, 5, 1e-3).unwrap());
        }
        // micro-batch size only changes summation order
        let c = train_translator(&inputs, &tiny_spec(), &TrainConfig { micro_batch: 16, ..cfg.clone() }, None, RunOptions::default()).unwrap();
        for (x, y) in h.train_loss.iter().zip(&c.history.train_loss) {
            assert!((x - y).abs() <= 1e-4 * x.abs());
        }
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trace() {
        let pairs = synthetic_pairs(40);
        let test = ImageSet { rows: 28, cols: 28, pixels: vec![], labels: vec![] };
        let inputs = TrainInputs { train: &pairs, eval: &[], test: &test };
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 8,
            eval_period: 2,
            augment: AugmentConfig { mask: true, noise: true, ..Default::default() },
            dropout: 0.1,
            ..Default::default()
        };
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let full = train_translator(&inputs, &tiny_spec(), &cfg, Some(&a), RunOptions::default()).unwrap();
        let stop = RunOptions { resume: false, stop_after: Some(3) };
        let err = train_translator(&inputs, &tiny_spec(), &cfg, Some(&b), stop).err().unwrap();
        assert!(matches!(err, KtError::Interrupted(3)));
        let resumed =
            train_translator(&inputs, &tiny_spec(), &cfg, Some(&b), RunOptions { resume: true, stop_after: None }).unwrap();
        assert_eq!(full.history.train_loss, resumed.history.train_loss);
        assert_eq!(full.last.flat_values(), resumed.last.flat_values());
        let read = |d: &Path| std::fs::read_to_string(d.join("metrics.csv")).unwrap();
        assert_eq!(read(&a), read(&b));
        let other = TrainConfig { lr: 2e-3, ..cfg };
        let r = train_translator(&inputs, &tiny_spec(), &other, Some(&b), RunOptions { resume: true, stop_after: None });
        assert!(matches!(r, Err(KtError::Config(_))));
    }
}
