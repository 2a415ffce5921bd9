//! Random masking and noise addition on a trained large block, and their effect on
//! the host's test accuracy.
//!
//! ```text
//! cargo run --release --example augmentation -- <dataset dir>
//! ```

use std::path::PathBuf;

use kt::augment::{augment_flat, AugmentConfig};
use kt::host::{data_root, evaluate, DigitData, LargeBlockParams};
use kt::pairs::{split_train_eval, PairDataset};
use kt::rng::stream_rng;

fn main() -> kt::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/example-pairs".into()));
    let ds = PairDataset::open(&dir)?;
    let (_, eval) = split_train_eval(&ds, 1)?;
    let host = &eval[0].checkpoint.host;
    let data = DigitData::load(&data_root().join("mnist"))?;
    println!("unchanged: {:.2}%", 100.0 * evaluate(host, &data.test, 256));
    let settings = [
        ("noise 0.01", AugmentConfig { noise: true, noise_scale: 0.01, ..Default::default() }),
        ("noise 0.1", AugmentConfig { noise: true, noise_scale: 0.1, ..Default::default() }),
        ("mask 0.1", AugmentConfig { mask: true, mask_prob: 0.1, ..Default::default() }),
        ("mask 0.5", AugmentConfig { mask: true, mask_prob: 0.5, ..Default::default() }),
    ];
    for (name, cfg) in settings {
        let mut flat = host.extract_large_block()?.flat();
        augment_flat(&mut flat, &cfg, &mut stream_rng(0, &[1]));
        let mut h = host.clone();
        h.insert_large_block(&LargeBlockParams::from_flat(ds.channels(), &flat)?)?;
        println!("{name:<10}: {:.2}%", 100.0 * evaluate(&h, &data.test, 256));
    }
    Ok(())
}
