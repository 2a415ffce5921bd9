//! Generates a parameter-pair dataset with the default desk-scale recipe.
//!
//! ```text
//! cargo run --release --example generate_pairs -- <seeds e.g. 0..64> <output dir>
//! ```

use std::path::PathBuf;

use kt::host::{data_root, DigitData};
use kt::pairs::{generate_dataset, GenConfig, GenOptions};

fn main() -> kt::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let seeds = args.next().unwrap_or_else(|| "0..16".into()).parse()?;
    let output = PathBuf::from(args.next().unwrap_or_else(|| "runs/example-pairs".into()));
    let data = DigitData::load(&data_root().join("mnist"))?;
    let cfg = GenConfig { seeds, output, ..Default::default() };
    let ds = generate_dataset(&cfg, &data, &GenOptions::default())?;
    let mean = ds.pairs.iter().map(|p| p.host_acc as f64).sum::<f64>() / ds.len() as f64;
    let distilled = ds.pairs.iter().map(|p| p.distilled_acc as f64).sum::<f64>() / ds.len() as f64;
    println!("{} pairs in {}", ds.len(), ds.dir.display());
    println!("mean host accuracy {mean:.4}, mean distilled accuracy {distilled:.4}");
    println!("content digest {}", ds.index.content_digest());
    Ok(())
}
