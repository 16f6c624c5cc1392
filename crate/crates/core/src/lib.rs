//! Continual learning for convolutional networks by selective network
//! augmentation: a frozen shared trunk with one trainable branch per new
//! task, plus learning-without-forgetting and fine-tuning baselines and an
//! experiment runner that reproduces the train / add-task / evaluate protocol.

pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use datasets::{Dataset, SplitSpec, TaskData};
pub use error::{ErrorCategory, Result, SenaError};
pub use layers::{ForwardContext, LayerKind, LayerNode, LayerStack, Padding};
pub use model::{Architecture, MultiTaskModel, TaskBranch};
pub use rng::Rng;
pub use tensor::{matmul, Tensor};
pub use training::{LwfConfig, SgdConfig, TrainReport};
