//! Per-modality forward sensory models `s = g(mu) + z` learned by GP regression.

mod gp;
mod models;

pub use gp::{log_spaced, select_lengthscale, GpModel, KernelParams};
pub use models::{
    train_forward_models, ForwardModelSet, GpSensorModel, Modality, ModalityMap, ModelFile,
    OutputTransform, SensorModel, TrainingOptions,
};
