//! Sizes the MLP, convolution and attention pilots to a shared forward-FLOPs budget.
//!
//! ```text
//! cargo run --release --example pilot_flops -- [budget, default 2e7]
//! ```

use kt::translators::pilot::solve_width;
use kt::translators::PilotKind;

fn main() -> kt::Result<()> {
    let budget: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2e7);
    for kind in PilotKind::ALL {
        let cfg = solve_width(kind, 6, kind.default_depth(), budget as u64)?;
        let flops = cfg.flops();
        println!(
            "{:<10} depth {} width {:>5}: {:>12} FLOPs ({:+.2}% of budget)",
            kind.to_string(),
            cfg.depth,
            cfg.width,
            flops,
            100.0 * (flops as f64 - budget) / budget
        );
    }
    match solve_width(PilotKind::Mlp, 6, 3, 1000) {
        Ok(_) => println!("unexpected: a 1000-FLOP MLP pilot was accepted"),
        Err(e) => println!("tiny budget rejected: {e}"),
    }
    Ok(())
}
