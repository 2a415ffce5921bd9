//! Trains one host with the large block, then trains a small block inside the frozen
//! host and compares their test accuracies.
//!
//! ```text
//! cargo run --release --example host_distillation -- [seed]
//! ```

use kt::host::{data_root, train_full, train_target_frozen, DigitData, HostModel, HostSpec, HostTrainConfig, TargetVariant};

fn main() -> kt::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = DigitData::load(&data_root().join("mnist"))?;
    let recipe = HostTrainConfig::default();

    let mut host: HostModel = HostModel::build(HostSpec::new(6, TargetVariant::LargeConv)?, seed)?;
    let host_acc = train_full(&mut host, &data.train, &data.test, &recipe, seed)?;
    println!("host with large block: {:.2}%", 100.0 * host_acc);

    let step2 = HostTrainConfig { epochs: 2, ..recipe };
    for variant in [TargetVariant::SmallConv, TargetVariant::MlpBlock, TargetVariant::AttnBlock] {
        let (params, acc, _) = train_target_frozen(&host, variant, &data.train, &data.test, &step2, seed)?;
        let n: usize = params.tensors().iter().map(|t| t.len()).sum();
        println!("{:<10} block, {n:>4} params: {:.2}%", variant.name(), 100.0 * acc);
    }
    Ok(())
}
