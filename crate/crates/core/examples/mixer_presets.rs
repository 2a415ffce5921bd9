//! Mixer presets: layout, trainable parameters and forward FLOPs per sample, plus the
//! token view of a large block.

use kt::host::LargeBlockParams;
use kt::rng::stream_rng;
use kt::translators::{count_params, tokens_from_large, Mixer, MixerConfig, Preset, Translate};

fn main() -> kt::Result<()> {
    println!("{:<6} {:>6} {:>7} {:>8} {:>12} {:>10}", "preset", "layers", "hidden", "D_C", "params", "MFLOPs");
    for p in Preset::ALL {
        let cfg = MixerConfig::preset(p, 6);
        let m: Mixer = Mixer::new(cfg.clone(), &mut stream_rng(0, &[]))?;
        println!(
            "{:<6} {:>6} {:>7} {:>8} {:>12} {:>10.1}",
            p.to_string(),
            cfg.num_layers,
            cfg.hidden,
            cfg.channel_mlp_dim,
            count_params(&cfg),
            m.flops() as f64 / 1e6
        );
    }

    let flat: Vec<f32> = (0..648).map(|i| i as f32).collect();
    let large = LargeBlockParams::from_flat(6, &flat)?;
    let tokens = tokens_from_large(&large);
    println!("\nlarge block C=6 -> {} tokens of width {}", tokens.rows(), tokens.cols());
    println!("token 0 (conv1 kernel [0,0]): {:?}", tokens.row(0));
    println!("token 36 (conv2 kernel [0,0]): {:?}", tokens.row(36));
    Ok(())
}
