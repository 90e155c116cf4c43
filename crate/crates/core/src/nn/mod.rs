//! Parameter stores, checkpoints and the student / assistant / teacher models.

pub mod layers;
pub mod models;
mod params;

pub use models::{
    build, build_assistant, build_student, build_teacher, count_params, feature_dim, forward, init_params,
    min_teacher_depth, ForwardOutput, Prediction,
};
pub use params::{
    Bound, ModelConfig, ModelKind, ParamStore, DEFAULT_HIDDEN_FC, DFCK_MAGIC, DFCK_VERSION, MIN_TEACHER_DEPTH,
};
