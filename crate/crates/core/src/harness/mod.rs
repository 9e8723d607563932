//! Reproducible command runs: config, outputs and manifest.

mod commands;
mod config;
mod manifest;

pub use commands::{
    cmd_acquire, cmd_config, cmd_reconstruct, cmd_rhi, cmd_selfdetect, cmd_train, load_dataset,
    load_models, reconstruct, rhi_conditions, selfdetect, BruteForceCheck, CommandOutput,
    ConditionResult, Context, ReconstructSummary, RhiSummary, SampleReconstruction,
    SelfDetectSummary, BRUTE_FORCE_TOLERANCE,
};
pub use config::{
    AcquisitionConfig, EstimatorConfig, GpConfig, Precisions, ReconstructConfig, RhiConfig,
    RunConfig, NOMINAL_POSE,
};
pub use manifest::{FileRecord, RunManifest, StageRecord, MANIFEST_FILE};
