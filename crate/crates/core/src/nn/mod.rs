//! Small deterministic neural engine: a conv net and a vision transformer over a
//! flat parameter vector, with exact reverse-mode gradients.

mod cnn;
mod model;
pub mod ops;
mod optim;
mod params;
mod snapshot;
mod tensor;
mod train;
mod vit;

pub use cnn::{CnnConfig, ConvLayerSpec, TinyCnn};
pub use model::{Architecture, ForwardPass, Gradients, Mode, Model, ModelKind, OutputGrad, ProbeLayer};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamBlock, ParamLayout};
pub use snapshot::ModelSnapshot;
pub use tensor::Tensor;
pub use train::{
    grid_search, per_class_recall, predict, train, EpochHook, EpochRecord, GridResult, LrSchedule, MetricTrace,
    NoHook, Predictions, TrainConfig, TrainSet, EVAL_BATCH,
};
pub use vit::{TinyVit, VitConfig};
