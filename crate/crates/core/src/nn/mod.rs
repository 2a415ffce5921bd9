//! Differentiable-computation substrate: tensors, layer kernels with hand-written
//! backward passes, Adam, cosine annealing and gradient checking.

pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use conv::conv2d_forward;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use optim::{cosine_lr, AdamHyper, OptimizerState};
pub use tensor::{gemm, Param, Parameterized, Scalar, Tensor};
