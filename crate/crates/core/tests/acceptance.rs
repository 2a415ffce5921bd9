//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4 and 8-10 always run. Criteria 5, 6, 7 and 11 take minutes to hours and
//! run only with `KT_ACCEPTANCE=full`; `KT_ACCEPTANCE_ONLY=6,11` restricts the set.
//! Generated datasets and training runs are cached under `KT_ACCEPTANCE_DIR`
//! (default `target/tmp/acceptance`) and resumed on the next invocation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;

use kt::augment::AugmentConfig;
use kt::eval::{
    accuracy_histogram, baseline_greedy_replacement, hist_bin, large_block_distance, mean, plug_and_score, run_method,
    translate, EvalContext, Method, HIST_BINS,
};
use kt::host::{LargeBlockParams, TargetBlockParams, TargetVariant};
use kt::nn::{finite_diff_check, Parameterized};
use kt::pairs::{generate_dataset, split_train_eval, GenConfig, GenOptions, ParamPair, PairDataset, SeedRange};
use kt::rng::stream_rng;
use kt::runner::{self, RunConfig, TrainReport, TranslatorSection};
use kt::trainer::{loss_and_grad, pilot_benchmark, train_translator, translation_loss, PilotBenchConfig, RunOptions, TrainConfig, TrainInputs};
use kt::translators::{count_params, load_translator, Mixer, MixerConfig, PilotConfig, PilotKind, PilotModel, Preset, Translate, TranslatorSpec};

/// Relative tolerance on published preset sizes.
const PRESET_TOLERANCE: f64 = 0.10;
/// Absolute tolerance of the loss fixtures.
const LOSS_TOLERANCE: f64 = 1e-6;
/// Gradient check: maximum relative error and minimum sampled coordinates.
const GRAD_TOLERANCE: f64 = 1e-3;
const GRAD_SAMPLES: usize = 50;
/// Required margin of translation over random init, in accuracy points.
const E2E_MARGIN: f64 = 5.0;

enum Verdict {
    Pass(String),
    Fail(String),
    /// Soft gate missed: reported, never fatal.
    Warn(String),
    Skip(String),
}

type Check = fn(&Ctx) -> Verdict;

struct Ctx {
    work: PathBuf,
}

fn fail_on<T>(r: kt::Result<T>) -> std::result::Result<T, Verdict> {
    r.map_err(|e| Verdict::Fail(format!("error: {e}")))
}

macro_rules! tri {
    ($e:expr) => {
        match fail_on($e) {
            Ok(v) => v,
            Err(v) => return v,
        }
    };
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let full = std::env::var("KT_ACCEPTANCE").is_ok_and(|v| v == "full");
    let only: Option<Vec<u32>> = std::env::var("KT_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let work = std::env::var_os("KT_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    std::fs::create_dir_all(&work).expect("acceptance work directory");
    let ctx = Ctx { work };

    let criteria: [(u32, &str, bool, Check); 11] = [
        (1, "preset parameter counts", false, c1_preset_counts),
        (2, "translation loss fixtures", false, c2_loss_fixtures),
        (3, "gradient integrity", false, c3_gradients),
        (4, "greedy oracle equivalence", false, c4_greedy_oracle),
        (5, "generation determinism", true, c5_determinism),
        (6, "end-to-end direction", true, c6_end_to_end),
        (7, "augmentation direction", true, c7_augmentation),
        (8, "evaluation cadence and report", false, c8_cadence),
        (9, "plug-in round trip", false, c9_round_trip),
        (10, "histogram convention", false, c10_histogram),
        (11, "pilot direction (soft)", true, c11_pilot),
    ];
    let mut failed = 0;
    for (id, name, heavy, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let verdict = if heavy && !full {
            Verdict::Skip("heavy; run with KT_ACCEPTANCE=full".into())
        } else {
            check(&ctx)
        };
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Warn(d) => ("WARN", d),
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {id:>2} {tag} {name} ({secs:.1}s): {detail}");
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn c1_preset_counts(_: &Ctx) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for p in Preset::ALL {
        let n = count_params(&MixerConfig::preset(p, 6)) as f64 / 1e6;
        let reference = p.reference_millions();
        let rel = (n - reference).abs() / reference;
        ok &= rel <= PRESET_TOLERANCE;
        parts.push(format!("{p} {n:.3}M vs {reference:.2}M ({:+.1}%)", 100.0 * (n - reference) / reference));
    }
    verdict(ok, parts.join(", "))
}

fn small(c1: impl Fn(usize) -> f32, c2: impl Fn(usize) -> f32) -> TargetBlockParams {
    let mut flat: Vec<f32> = (0..162).map(c1).collect();
    flat.extend((0..162).map(c2));
    TargetBlockParams::from_flat(TargetVariant::SmallConv, 6, &flat).expect("fixture shape")
}

fn c2_loss_fixtures(_: &Ctx) -> Verdict {
    let base = small(|i| (i as f32 * 0.1).sin(), |i| (i as f32 * 0.2).cos());
    // A: identical parameters give zero loss.
    let a = tri!(translation_loss(&[base.clone()], &[base.clone()]));
    // B: offset 0.5 on the first tensor only: per-matrix MSEs 0.25 and 0 → 0.125.
    let shifted = small(|i| (i as f32 * 0.1).sin() + 0.5, |i| (i as f32 * 0.2).cos());
    let b = tri!(translation_loss(&[shifted], &[base.clone()]));
    // C: batch of two; sample 1 has MSEs 0.04 and 0.16 (mean 0.1), sample 2 is exact → 0.05.
    let two = small(|i| (i as f32 * 0.1).sin() - 0.2, |i| (i as f32 * 0.2).cos() + 0.4);
    let c = tri!(translation_loss(&[two, base.clone()], &[base.clone(), base.clone()]));
    // zero only for equal inputs: one element moved by 1e-3 is already positive
    let nudged = small(|i| (i as f32 * 0.1).sin() + if i == 7 { 1e-3 } else { 0.0 }, |i| (i as f32 * 0.2).cos());
    let d = tri!(translation_loss(&[nudged], &[base]));
    let ok = a == 0.0 && (b - 0.125).abs() < LOSS_TOLERANCE && (c - 0.05).abs() < LOSS_TOLERANCE && d > 0.0;
    verdict(ok, format!("equal {a:e}, offset {b:.7} (0.125), batch {c:.7} (0.05), one-element {d:.3e} > 0"))
}

fn mixer_check(cfg: MixerConfig) -> kt::Result<f64> {
    let base: Mixer<f64> = Mixer::new(cfg.clone(), &mut stream_rng(11, &[]))?;
    let segs: Vec<usize> = cfg.target.target_shapes(cfg.channels()).iter().map(|s| s.iter().product()).collect();
    let b = 3;
    let x: Vec<f64> = (0..b * base.in_len()).map(|i| (i as f64 * 0.29).sin() * 0.4).collect();
    let t: Vec<f64> = (0..b * base.out_len()).map(|i| (i as f64 * 0.17).cos() * 0.3).collect();
    let full = base.flat_values();
    // Per-token biases directly followed by a normalization over the hidden axis cancel
    // exactly; their gradient is structurally zero and checked separately below.
    let mut live = Vec::new();
    let mut off = 0;
    for p in base.params() {
        if !(p.name == "stem.seq_b" || p.name.ends_with("tok.b2")) {
            live.extend(off..off + p.value.len());
        }
        off += p.value.len();
    }
    let eval = |w: &[f64], grads: bool| {
        let mut m = base.clone();
        let mut v = full.clone();
        live.iter().zip(w).for_each(|(&i, &x)| v[i] = x);
        m.set_flat_values(&v).expect("values");
        let (y, cache) = m.forward(&x, b, None);
        let (loss, dy) = loss_and_grad(&y, &t, &segs, b);
        m.zero_grad();
        m.backward(&cache, &dy);
        let g = m.flat_grads();
        (loss, if grads { g } else { live.iter().map(|&i| g[i]).collect() })
    };
    let point: Vec<f64> = live.iter().map(|&i| full[i]).collect();
    let all = eval(&point, true).1;
    let mut off = 0;
    for p in base.params() {
        if p.name == "stem.seq_b" || p.name.ends_with("tok.b2") {
            let worst = all[off..off + p.value.len()].iter().fold(0.0f64, |a, g| a.max(g.abs()));
            if worst > 1e-12 {
                return Err(kt::KtError::Invariant(format!("{} gradient {worst:e} should vanish", p.name)));
            }
        }
        off += p.value.len();
    }
    let r = finite_diff_check(|w| eval(w, false), &point, 4 * GRAD_SAMPLES, 3)?;
    assert!(r.checked >= GRAD_SAMPLES);
    Ok(r.max_rel_error)
}

fn pilot_check(kind: PilotKind) -> kt::Result<f64> {
    let cfg = PilotConfig { kind, channels: 2, width: 6, depth: 2 };
    let base: PilotModel<f64> = PilotModel::new(cfg, &mut stream_rng(12, &[]))?;
    let segs = [18usize, 18];
    let b = 2;
    let x: Vec<f64> = (0..b * base.in_len()).map(|i| (i as f64 * 0.31).sin() * 0.5).collect();
    let t: Vec<f64> = (0..b * base.out_len()).map(|i| (i as f64 * 0.23).cos() * 0.3).collect();
    let f = |w: &[f64]| {
        let mut m = base.clone();
        m.set_flat_values(w).expect("values");
        let (y, cache) = m.forward(&x, b, None);
        let (loss, dy) = loss_and_grad(&y, &t, &segs, b);
        m.zero_grad();
        m.backward(&cache, &dy);
        (loss, m.flat_grads())
    };
    let r = finite_diff_check(f, &base.flat_values(), 4 * GRAD_SAMPLES, 4)?;
    assert!(r.checked >= GRAD_SAMPLES);
    Ok(r.max_rel_error)
}

fn c3_gradients(_: &Ctx) -> Verdict {
    let tiny = MixerConfig {
        num_layers: 1,
        seq_len: 8,
        hidden: 8,
        token_mlp_dim: 8,
        channel_mlp_dim: 16,
        dropout: 0.0,
        target: TargetVariant::SmallConv,
    };
    let mut errs = vec![("mixer".to_string(), tri!(mixer_check(tiny)))];
    for kind in PilotKind::ALL {
        errs.push((kind.to_string(), tri!(pilot_check(kind))));
    }
    let ok = errs.iter().all(|(_, e)| *e < GRAD_TOLERANCE);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", ");
    verdict(ok, format!("max relative error (< {GRAD_TOLERANCE:e}): {detail}"))
}

fn synthetic_record(seed: u64) -> ParamPair {
    // seeds congruent mod 200 share a large block, so exact distance ties occur
    let mut rng = stream_rng(seed % 200, &[77]);
    let large: Vec<f32> = (0..648).map(|_| (rng.next_u32() % 5) as f32 * 0.25 - 0.5).collect();
    let small: Vec<f32> = (0..324).map(|i| seed as f32 + i as f32 * 1e-3).collect();
    ParamPair {
        seed,
        large: LargeBlockParams::from_flat(6, &large).expect("large"),
        target: TargetBlockParams::from_flat(TargetVariant::SmallConv, 6, &small).expect("small"),
        host_acc: 0.0,
        distilled_acc: 0.0,
    }
}

fn c4_greedy_oracle(_: &Ctx) -> Verdict {
    let train: Vec<ParamPair> = (0..256u64).map(|s| synthetic_record(1000 - s)).collect();
    let mut mismatches = 0;
    for q in 0..32u64 {
        let query = if q % 4 == 0 {
            train[(q * 7) as usize].large.clone()
        } else {
            synthetic_record(5000 + q).large
        };
        // independent scan: squared differences summed in f64, lowest seed wins ties
        let mut best: Option<(f64, u64, usize)> = None;
        let qf = query.flat();
        for (i, r) in train.iter().enumerate() {
            let d: f64 = qf.iter().zip(r.large.flat()).map(|(a, b)| ((*a as f64) - (b as f64)).powi(2)).sum::<f64>() / qf.len() as f64;
            let better = match best {
                None => true,
                Some((bd, bs, _)) => d < bd || (d == bd && r.seed < bs),
            };
            if better {
                best = Some((d, r.seed, i));
            }
        }
        let (bd, _, bi) = best.expect("nonempty");
        let got = tri!(baseline_greedy_replacement(&query, &train));
        let same_distance = (large_block_distance(&query, &train[bi].large) - bd).abs() == 0.0;
        if got != train[bi].target || !same_distance {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} of 32 queries differ from the brute-force scan over 256 records"))
}

fn small_gen(work: &Path, seeds: SeedRange, name: &str) -> GenConfig {
    GenConfig { seeds, output: work.join(name), ..GenConfig::default() }
}

fn dataset_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).expect("dataset dir").flatten() {
        let name = e.file_name().to_string_lossy().to_string();
        if name != "config.json" && e.path().is_file() {
            out.insert(name, std::fs::read(e.path()).expect("read"));
        }
    }
    out
}

fn c5_determinism(ctx: &Ctx) -> Verdict {
    let data = tri!(runner::load_mnist());
    let seeds = SeedRange { start: 0, end: 64 };
    let mut dirs = Vec::new();
    for (name, jobs, stop) in [("det-j1", 1, None), ("det-j8", 8, None), ("det-resumed", 2, Some(23))] {
        let dir = ctx.work.join(name);
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = GenConfig { jobs, ..small_gen(&ctx.work, seeds, name) };
        if let Some(n) = stop {
            match generate_dataset(&cfg, &data, &GenOptions { stop_after: Some(n) }) {
                Err(kt::KtError::Interrupted(_)) => {}
                other => return Verdict::Fail(format!("interrupted run did not stop: {:?}", other.map(|d| d.len()))),
            }
        }
        tri!(generate_dataset(&cfg, &data, &GenOptions::default()));
        dirs.push(dir);
    }
    let a = dataset_bytes(&dirs[0]);
    let same = dirs[1..].iter().all(|d| dataset_bytes(d) == a);
    let bytes: usize = a.values().map(Vec::len).sum();
    verdict(same, format!("jobs 1, jobs 8 and interrupted+resumed: {} files, {bytes} bytes, identical={same}", a.len()))
}

/// 2,000 training pairs plus 20 evaluation hosts, shared by criteria 6, 7 and 11.
fn main_dataset(ctx: &Ctx) -> kt::Result<PairDataset> {
    let data = runner::load_mnist()?;
    let cfg = small_gen(&ctx.work, SeedRange { start: 0, end: 2020 }, "pairs-main");
    generate_dataset(&cfg, &data, &GenOptions::default())
}

fn baselines(ctx: &EvalContext<'_>) -> kt::Result<Vec<(Method, f64)>> {
    Method::BASELINES
        .iter()
        .map(|&m| Ok((m, run_method(m, ctx, "acceptance")?.mean)))
        .collect()
}

fn c6_end_to_end(ctx: &Ctx) -> Verdict {
    let ds = tri!(main_dataset(ctx));
    let (train, eval) = tri!(split_train_eval(&ds, 20));
    let mnist = tri!(runner::load_mnist());
    let spec = TranslatorSpec::Mixer(MixerConfig::preset(Preset::Small, 6));
    let cfg = TrainConfig { epochs: 300, dropout: 0.0, ..TrainConfig::default() };
    let inputs = TrainInputs { train: &train, eval: &eval, test: &mnist.test };
    let out = ctx.work.join("c6-small");
    let run = tri!(train_translator(&inputs, &spec, &cfg, Some(&out), RunOptions { resume: true, stop_after: None }));
    let translated = run.history.best_acc.unwrap_or(0.0) * 100.0;
    let ectx = EvalContext { hosts: &eval, train: &train, test: &mnist.test, translator: None, seed: 0 };
    let base = tri!(baselines(&ectx));
    let get = |m: Method| base.iter().find(|(k, _)| *k == m).map(|(_, v)| v * 100.0).unwrap_or(f64::NAN);
    let (ri, rr, gr) = (get(Method::RandomInit), get(Method::RandomReplacement), get(Method::Greedy));
    let ok = translated >= ri + E2E_MARGIN && translated >= rr && translated >= gr;
    verdict(
        ok,
        format!(
            "translation best mean {translated:.2}% (epoch {:?}, batch {}, {} steps) vs random init {ri:.2}%, random replacement {rr:.2}%, greedy {gr:.2}%",
            run.history.best_epoch,
            run.history.batch_size,
            run.history.epochs * train.len().div_ceil(run.history.batch_size)
        ),
    )
}

fn c7_augmentation(ctx: &Ctx) -> Verdict {
    let ds = tri!(main_dataset(ctx));
    let (train, eval) = tri!(split_train_eval(&ds, 20));
    let train = &train[..512];
    let mnist = tri!(runner::load_mnist());
    let spec = TranslatorSpec::Mixer(MixerConfig::preset(Preset::Small, 6));
    let inputs = TrainInputs { train, eval: &eval, test: &mnist.test };
    let variants = [
        ("none", AugmentConfig::default()),
        ("noise", AugmentConfig { noise: true, noise_scale: 0.01, ..Default::default() }),
        ("mask", AugmentConfig { mask: true, mask_prob: 0.1, ..Default::default() }),
    ];
    let mut wins = [0usize; 2];
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut best = Vec::new();
        for (name, aug) in &variants {
            let cfg = TrainConfig { seed, augment: aug.clone(), reference_pairs: Some(2000), ..TrainConfig::default() };
            let out = ctx.work.join(format!("c7-{name}-seed{seed}"));
            let run = tri!(train_translator(&inputs, &spec, &cfg, Some(&out), RunOptions { resume: true, stop_after: None }));
            best.push(run.history.best_acc.unwrap_or(0.0));
        }
        wins[0] += usize::from(best[1] >= best[0]);
        wins[1] += usize::from(best[2] >= best[0]);
        rows.push(format!("seed {seed}: none {:.2} noise {:.2} mask {:.2}", 100.0 * best[0], 100.0 * best[1], 100.0 * best[2]));
    }
    verdict(
        wins[0] >= 2 && wins[1] >= 2,
        format!("noise >= none in {} of 3, mask >= none in {} of 3; {}", wins[0], wins[1], rows.join("; ")),
    )
}

/// 24 seeds: 4 training pairs and 20 evaluation hosts.
fn small_dataset(ctx: &Ctx) -> kt::Result<PairDataset> {
    let data = runner::load_mnist()?;
    generate_dataset(&small_gen(&ctx.work, SeedRange { start: 0, end: 24 }, "pairs-small"), &data, &GenOptions::default())
}

fn c8_cadence(ctx: &Ctx) -> Verdict {
    let ds = tri!(small_dataset(ctx));
    let mnist = tri!(runner::load_mnist());
    let cfg = RunConfig {
        translator: TranslatorSection {
            model: Some(MixerConfig {
                num_layers: 1,
                seq_len: 72,
                hidden: 16,
                token_mlp_dim: 16,
                channel_mlp_dim: 32,
                dropout: 0.0,
                target: TargetVariant::SmallConv,
            }),
            ..Default::default()
        },
        training: TrainConfig { epochs: 300, ..Default::default() },
        ..Default::default()
    };
    let out = ctx.work.join("c8-run");
    let _ = std::fs::remove_dir_all(&out);
    let report: TrainReport = tri!(runner::cmd_train(&cfg, &ds.dir, &out, &mnist.test, RunOptions::default()));
    let epochs: Vec<usize> = report.history.evals.iter().map(|p| p.epoch).collect();
    let expected: Vec<usize> = (1..=12).map(|k| 25 * k).collect();
    let max = report.history.evals.iter().map(|p| p.mean_acc).fold(f64::NEG_INFINITY, f64::max);
    let stored: TrainReport = tri!(std::fs::read_to_string(out.join("report.json"))
        .map_err(|e| kt::KtError::io(&out, e))
        .and_then(|s| serde_json::from_str(&s).map_err(kt::KtError::from)));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap_or_default();
    let acc_rows = csv.lines().skip(1).filter(|l| !l.ends_with(',')).count();
    // the best checkpoint re-scores to the recorded best exactly
    let best = tri!(load_translator(&out.join("checkpoints/best.ktpr")));
    let (_, eval) = tri!(split_train_eval(&ds, 20));
    let larges: Vec<&LargeBlockParams> = eval.iter().map(|h| &h.pair.large).collect();
    let params = tri!(translate(&best, &larges, TargetVariant::SmallConv));
    let accs: Vec<f32> = tri!(eval.iter().zip(&params).map(|(h, p)| plug_and_score(&h.checkpoint, p, &mnist.test)).collect());
    let rescored = mean(&accs);
    let ok = epochs == expected
        && stored.best_acc == Some(max)
        && acc_rows == 12
        && csv.lines().count() == 301
        && Some(rescored) == stored.best_acc;
    verdict(
        ok,
        format!(
            "{} eval points at epochs {:?}..{:?}, report best {:?} = max {max:.4}, checkpoint re-score {rescored:.4}",
            epochs.len(),
            epochs.first(),
            epochs.last(),
            stored.best_acc
        ),
    )
}

fn c9_round_trip(ctx: &Ctx) -> Verdict {
    let ds = tri!(small_dataset(ctx));
    let mnist = tri!(runner::load_mnist());
    let (_, eval) = tri!(split_train_eval(&ds, 20));
    let mut exact = 0;
    for h in &eval {
        let acc = tri!(plug_and_score(&h.checkpoint, &h.pair.target, &mnist.test));
        exact += usize::from(acc.to_bits() == h.pair.distilled_acc.to_bits());
    }
    verdict(exact == eval.len() && eval.len() == 20, format!("{exact} of {} eval records reproduce distilled accuracy bit-exactly", eval.len()))
}

fn c10_histogram(_: &Ctx) -> Verdict {
    let fixtures: [(&str, Vec<f32>); 3] = [
        ("boundaries", vec![0.30, 0.35, 0.0, 0.05, 0.95, 1.0]),
        ("grid", (0..=1000).map(|i| i as f32 / 1000.0).collect()),
        ("cluster", vec![0.2738, 0.4733, 0.4733, 0.9899, 0.0001]),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, accs) in &fixtures {
        let h = accuracy_histogram(accs);
        ok &= h.labels == (1..=HIST_BINS as u32).map(|k| 5 * k).collect::<Vec<_>>();
        ok &= h.counts.iter().sum::<usize>() == accs.len();
        for &a in accs {
            let b = hist_bin(a);
            // value a lies in [label-5, label) in percent, except 100 which closes the last bin
            let label = h.labels[b] as f64;
            let pct = (a as f64 * 100.0 * 1e4).round() / 1e4;
            ok &= (pct >= label - 5.0 && pct < label) || (pct == 100.0 && b == HIST_BINS - 1);
        }
        notes.push(format!("{name}: {} values", accs.len()));
    }
    let spot = accuracy_histogram(&[0.30]);
    ok &= spot.counts[6] == 1 && spot.labels[6] == 35;
    notes.push(format!("0.30 -> bin {}", spot.labels[hist_bin(0.30)]));
    verdict(ok, notes.join(", "))
}

fn c11_pilot(ctx: &Ctx) -> Verdict {
    let ds = tri!(main_dataset(ctx));
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let path = ctx.work.join(format!("c11-seed{seed}.json"));
        let curves = match std::fs::read(&path).ok().and_then(|b| serde_json::from_slice::<Vec<kt::trainer::PilotCurve>>(&b).ok()) {
            Some(c) => c,
            None => {
                let cfg = PilotBenchConfig { seed, ..PilotBenchConfig::default() };
                let c = tri!(pilot_benchmark(&ds.pairs, &PilotKind::ALL, &cfg));
                let _ = std::fs::write(&path, serde_json::to_vec(&c).expect("json"));
                c
            }
        };
        let last = |k: PilotKind| curves.iter().find(|c| c.kind == k).and_then(|c| c.losses.last().copied()).unwrap_or(f64::NAN);
        let (m, cv, a) = (last(PilotKind::Mlp), last(PilotKind::Conv), last(PilotKind::Attention));
        wins += usize::from(m < a);
        let flops: Vec<String> = curves.iter().map(|c| format!("{}", c.flops)).collect();
        rows.push(format!("seed {seed}: mlp {m:.3e} conv {cv:.3e} attention {a:.3e} (flops {})", flops.join("/")));
    }
    let detail = format!("mlp < attention in {wins} of 3; {}", rows.join("; "));
    if wins >= 2 {
        Verdict::Pass(detail)
    } else {
        Verdict::Warn(detail)
    }
}
