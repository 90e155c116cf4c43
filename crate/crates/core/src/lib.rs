pub mod config;
pub mod data;
pub mod error;
pub mod graph;
mod kernels;
pub mod losses;
pub mod nn;
mod rng;
pub mod tensor;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use graph::{Elementwise, Gradients, Graph, Reduce, Var};
pub use losses::{DistillConfig, FeatureLoss, SoftLabelSet};
pub use nn::{ForwardOutput, ModelConfig, ModelKind, ParamStore};
pub use tensor::Tensor;
