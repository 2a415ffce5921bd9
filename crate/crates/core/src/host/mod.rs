//! MNIST-style host classifiers: data loading, parameter records, the model and its training.

pub mod idx;
pub mod model;
pub mod params;
pub mod train;

pub use idx::{data_root, DigitData, ImageSet};
pub use model::{ForwardMode, HostModel, Scope};
pub use params::{
    AttnBlockParams, ConvTensor4, HostSpec, LargeBlockParams, MlpBlockParams, SmallBlockParams,
    TargetBlockParams, TargetVariant, IMAGE_SIDE, NUM_CLASSES,
};
pub use train::{evaluate, train_full, train_target_frozen, HostTrainConfig};
