use serde::{Deserialize, Serialize};

use super::tensor::{Param, Scalar, Tensor};
use crate::error::{ensure, KtError, Result};

/// Cosine annealing from `base_lr` at epoch 0 down to exactly 0 at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    ensure!(
        total_epochs >= 1,
        KtError::Invalid("cosine_lr: total_epochs must be >= 1".into())
    );
    ensure!(
        epoch <= total_epochs,
        KtError::Invalid(format!(
            "cosine_lr: epoch {epoch} outside 0..={total_epochs}"
        ))
    );
    let phase = std::f64::consts::PI * epoch as f64 / total_epochs as f64;
    Ok(base_lr * (1.0 + phase.cos()) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments and step counter, one moment pair per parameter in declaration order.
#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    pub lr: f64,
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<'a, I>(params: I, lr: f64) -> Self
    where
        I: IntoIterator<Item = &'a Param<T>>,
    {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
            .unzip();
        Self {
            lr,
            hyper: AdamHyper::default(),
            step: 0,
            m,
            v,
        }
    }

    /// One bias-corrected Adam update from the gradients stored on `params`.
    ///
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn adam_step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        ensure!(
            params.len() == self.m.len(),
            KtError::shape("adam_step", &[self.m.len()], &[params.len()])
        );
        for (p, m) in params.iter().zip(&self.m) {
            ensure!(
                p.grad.shape() == m.shape(),
                KtError::shape("adam_step", m.shape(), p.grad.shape())
            );
            if !p.grad.all_finite() {
                return Err(KtError::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let step_size = T::of(self.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            let w = p.value.data_mut();
            for i in 0..w.len() {
                md[i] = b1 * md[i] + one_b1 * g[i];
                vd[i] = b2 * vd[i] + one_b2 * g[i] * g[i];
                let denom = (vd[i] * inv_bc2).sqrt() + eps;
                w[i] -= step_size * md[i] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 300, 0.001).unwrap(), 0.001);
        assert!(cosine_lr(300, 300, 0.001).unwrap().abs() < 1e-18);
        assert!((cosine_lr(150, 300, 0.001).unwrap() - 0.0005).abs() < 1e-15);
        assert!(cosine_lr(301, 300, 0.001).is_err());
        assert!(cosine_lr(0, 0, 0.001).is_err());
    }

    #[test]
    fn cosine_is_monotone_and_symmetric() {
        let total = 97;
        let mut prev = f64::INFINITY;
        for e in 0..=total {
            let lr = cosine_lr(e, total, 0.01).unwrap();
            assert!(lr <= prev);
            prev = lr;
            let mirror = cosine_lr(total - e, total, 0.01).unwrap();
            assert!((lr + mirror - 0.01).abs() < 1e-15);
        }
    }

    fn scalar_param(v: f64) -> Param<f64> {
        Param::new("w", Tensor::new(&[1], vec![v]).unwrap())
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = scalar_param(0.75);
        let mut st = OptimizerState::new([&p], 0.1);
        for _ in 0..5 {
            st.adam_step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value.data()[0], 0.75);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction → Δ = lr · 1/(1 + eps)
        let mut p = scalar_param(0.0);
        p.grad.data_mut()[0] = 1.0;
        let mut st = OptimizerState::new([&p], 0.1);
        st.adam_step(&mut [&mut p]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = scalar_param(1.0);
        p.grad.data_mut()[0] = f64::NAN;
        let mut st = OptimizerState::new([&p], 0.1);
        let err = st.adam_step(&mut [&mut p]).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p.value.data()[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut p = scalar_param(0.3);
            let mut st = OptimizerState::new([&p], 0.05);
            for i in 0..10 {
                p.grad.data_mut()[0] = (i as f64).sin();
                st.adam_step(&mut [&mut p]).unwrap();
            }
            p.value.data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
