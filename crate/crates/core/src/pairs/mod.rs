//! Parameter-pair datasets: the binary container and the generator that fills it.

pub mod factory;
pub mod format;

pub use factory::{
    generate_dataset, generate_pair, split_train_eval, DatasetIndex, EvalHost, GenConfig,
    GenOptions, PairDataset, SeedRange,
};
pub use format::{HostCheckpoint, ParamPair};
