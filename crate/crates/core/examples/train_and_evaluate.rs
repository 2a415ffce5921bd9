//! Trains a small mixer on a pair dataset and compares it with the three baselines.
//!
//! ```text
//! cargo run --release --example generate_pairs -- 0..64 runs/example-pairs
//! cargo run --release --example train_and_evaluate -- runs/example-pairs [epochs]
//! ```

use std::path::PathBuf;

use kt::eval::{run_method, EvalContext, Method};
use kt::host::{data_root, DigitData, TargetVariant};
use kt::pairs::{split_train_eval, PairDataset};
use kt::trainer::{train_translator, RunOptions, TrainConfig, TrainInputs};
use kt::translators::{MixerConfig, TranslatorSpec};

fn main() -> kt::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "runs/example-pairs".into()));
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);
    let ds = PairDataset::open(&dir)?;
    let hosts = (ds.len() / 4).clamp(1, 20);
    let (train, eval) = split_train_eval(&ds, hosts)?;
    let data = DigitData::load(&data_root().join("mnist"))?;

    let spec = TranslatorSpec::Mixer(MixerConfig {
        num_layers: 2,
        seq_len: 2 * ds.channels() * ds.channels(),
        hidden: 32,
        token_mlp_dim: 64,
        channel_mlp_dim: 64,
        dropout: 0.0,
        target: TargetVariant::SmallConv,
    });
    let cfg = TrainConfig { epochs, batch_size: 32, eval_period: (epochs / 5).max(1), ..Default::default() };
    let inputs = TrainInputs { train: &train, eval: &eval, test: &data.test };
    let run = train_translator(&inputs, &spec, &cfg, None, RunOptions::default())?;
    let best = run.best.as_ref().unwrap_or(&run.last);

    let ctx = EvalContext { hosts: &eval, train: &train, test: &data.test, translator: Some(best), seed: 0 };
    for m in [Method::Translation, Method::RandomInit, Method::RandomReplacement, Method::Greedy, Method::Distilled] {
        let r = run_method(m, &ctx, "example")?;
        println!("{:<20} mean {:6.2}%  best {:6.2}%", m.name(), 100.0 * r.mean, 100.0 * r.best);
    }
    Ok(())
}
