//! Adam with cosine annealing on a two-parameter quadratic.

use kt::nn::{cosine_lr, OptimizerState, Param, Tensor};

fn main() -> kt::Result<()> {
    let target = [3.0f32, -2.0];
    let mut p = Param::new("w", Tensor::zeros(&[2]));
    let mut opt = OptimizerState::new([&p], 0.1);
    let epochs = 200;
    for e in 0..epochs {
        opt.lr = cosine_lr(e, epochs, 0.1)?;
        let w = p.value.data().to_vec();
        for (g, (w, t)) in p.grad.data_mut().iter_mut().zip(w.iter().zip(target)) {
            *g = 2.0 * (w - t);
        }
        opt.adam_step(&mut [&mut p])?;
        if e % 40 == 0 || e == epochs - 1 {
            println!("epoch {e:>3} lr {:.5} w {:?}", opt.lr, p.value.data());
        }
    }
    println!("final lr at epoch {epochs}: {}", cosine_lr(epochs, epochs, 0.1)?);
    Ok(())
}
