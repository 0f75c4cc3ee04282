//! Spiking convolutional classifier with surrogate-gradient training through
//! time and an optional flow-regression head.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod lif;
pub mod model;
pub mod train;

pub use adam::{cosine_lr, Adam};
pub use checkpoint::CheckpointMeta;
pub use lif::{lif_step, surrogate_derivative, surrogate_primitive, LifParams, SpikeMode};
pub use model::{ArchSpec, ForwardOutput, Model, ModelConfig, Param, Preset, TrainTrace};
pub use train::{
    evaluate_split, gradient_check, train, train_step, flow_mse, softmax_cross_entropy,
    AugmentSettings, EpochStats, StepLosses, TrainReport, TrainSettings,
};
