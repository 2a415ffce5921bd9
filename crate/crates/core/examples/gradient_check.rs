//! Central-difference gradient check of a tiny 64-bit mixer under the translation loss.

use kt::host::TargetVariant;
use kt::nn::{finite_diff_check, Parameterized};
use kt::rng::stream_rng;
use kt::trainer::loss_and_grad;
use kt::translators::{Mixer, MixerConfig, Translate};

fn main() -> kt::Result<()> {
    let cfg = MixerConfig {
        num_layers: 1,
        seq_len: 8,
        hidden: 8,
        token_mlp_dim: 8,
        channel_mlp_dim: 16,
        dropout: 0.0,
        target: TargetVariant::SmallConv,
    };
    let base: Mixer<f64> = Mixer::new(cfg, &mut stream_rng(1, &[]))?;
    let x: Vec<f64> = (0..2 * base.in_len()).map(|i| (i as f64 * 0.3).sin()).collect();
    let t: Vec<f64> = (0..2 * base.out_len()).map(|i| (i as f64 * 0.2).cos() * 0.3).collect();
    let cfg = base.config().clone();
    let segs: Vec<usize> = cfg.target.target_shapes(cfg.channels()).iter().map(|s| s.iter().product()).collect();
    let f = |w: &[f64]| {
        let mut m = base.clone();
        m.set_flat_values(w).expect("parameter count");
        let (y, cache) = m.forward(&x, 2, None);
        let (loss, dy) = loss_and_grad(&y, &t, &segs, 2);
        m.zero_grad();
        m.backward(&cache, &dy);
        (loss, m.flat_grads())
    };
    let report = finite_diff_check(f, &base.flat_values(), 100, 0)?;
    println!(
        "{} of {} coordinates checked, max relative error {:.2e} at {}",
        report.checked,
        base.param_count(),
        report.max_rel_error,
        report.worst_index
    );
    // The per-token stem bias is cancelled by the following layer norm; a check that
    // samples it compares two numbers that are both zero up to rounding.
    Ok(())
}
