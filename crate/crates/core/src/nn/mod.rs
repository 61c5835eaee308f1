//! Layers, the reference networks and the SGDM training loop.

pub mod augment;
mod batch_norm;
mod loss;
mod network;
mod train;

pub(crate) use batch_norm::map_channels;
pub use batch_norm::{BatchNormParts, BatchNormState, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
pub use loss::{dice_loss, softmax_cross_entropy};
pub use network::{LayerSpec, Model, NetworkSpec, TaskKind};
pub(crate) use train::chunk_batches;
pub use train::{train, EpochLog, Sgdm, TrainOutcome, TrainRecipe};
