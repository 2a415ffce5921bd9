//! Parameter-to-parameter translation models.
//!
//! Every model maps a batch of flattened large blocks (`B × 18C²`, conv1 then conv2,
//! row-major) to a batch of flattened target blocks in declaration order. For the conv
//! target those buffers are exactly the token matrices described in [`tokens`].

pub mod checkpoint;
pub mod mixer;
pub mod pilot;
pub mod tokens;

use rand::{Rng, RngCore};

use crate::nn::{Parameterized, Scalar, Tensor};

pub use checkpoint::{load_translator, save_translator, AnyTranslator, TranslatorSpec};
pub use mixer::{count_params, Mixer, MixerConfig, Preset};
pub use pilot::{build_pilot, flops_estimate, PilotConfig, PilotKind, PilotModel};
pub use tokens::{small_from_tokens, tokens_from_large, TokenMatrix};

/// A trainable translator with a hand-written backward pass.
pub trait Translate<T: Scalar>: Parameterized<T> + Send + Sync {
    type Cache: Send;

    /// Values per input sample.
    fn in_len(&self) -> usize;
    /// Values per output sample.
    fn out_len(&self) -> usize;

    /// Forward pass. Dropout is active only when `dropout_rng` is given.
    fn forward(&self, x: &[T], batch: usize, dropout_rng: Option<&mut dyn RngCore>) -> (Vec<T>, Self::Cache);

    /// Accumulates parameter gradients for output gradient `dy`.
    fn backward(&mut self, cache: &Self::Cache, dy: &[T]);

    /// Multiply-accumulates of one single-sample forward pass, ×2.
    fn flops(&self) -> u64;

    fn predict(&self, x: &[T], batch: usize) -> Vec<T> {
        self.forward(x, batch, None).0
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` dense weights.
pub(crate) fn dense_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect())
        .expect("shape matches data")
}

/// Dense FLOPs for `rows` rows mapping `a → b` features.
pub(crate) fn dense_flops(rows: usize, a: usize, b: usize) -> u64 {
    2 * (rows * a * b) as u64
}
