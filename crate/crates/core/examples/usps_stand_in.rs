//! Resamples MNIST through 16x16 (the USPS resolution) and reports how a host trained
//! on MNIST copes with the blurrier digits.

use kt::eval::resample_through;
use kt::host::{data_root, evaluate, train_full, DigitData, HostModel, HostSpec, HostTrainConfig, TargetVariant};

fn main() -> kt::Result<()> {
    let data = DigitData::load(&data_root().join("mnist"))?;
    let blurred = resample_through(&data.test, 16)?;
    let mut host: HostModel = HostModel::build(HostSpec::new(6, TargetVariant::LargeConv)?, 0)?;
    train_full(&mut host, &data.train, &data.test, &HostTrainConfig::default(), 0)?;
    println!("MNIST test:            {:.2}%", 100.0 * evaluate(&host, &data.test, 256));
    println!("resampled through 16:  {:.2}%", 100.0 * evaluate(&host, &blurred, 256));
    Ok(())
}
