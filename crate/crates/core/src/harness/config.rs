use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arm_sim::{end_effector, ArmConfig, JointState, OtherObject};
use crate::error::{Error, Result};
use crate::gp_forward::{KernelParams, Modality, ModalityMap, TrainingOptions};
use crate::par::Exec;
use crate::pc_estimator::{EstimatorOptions, PerturbationSchedule, PrecisionMode};
use crate::self_grid::{GridParams, SceneConfig};

/// Pose the RHI experiment holds and the self-detection scene draws.
pub const NOMINAL_POSE: [f64; 3] = [0.3, 1.2, 0.9];

fn local_arm() -> ArmConfig {
    ArmConfig {
        joint_limits: NOMINAL_POSE.map(|a| [a - 0.6, a + 0.6]),
        ..ArmConfig::default()
    }
}

/// Brush 0.08 m to the right of the nominal end-effector.
fn default_brush(arm: &ArmConfig) -> [f64; 2] {
    let ee = end_effector(
        &JointState::new(NOMINAL_POSE[0], NOMINAL_POSE[1], NOMINAL_POSE[2]).0,
        arm,
    );
    [ee.x + 0.08, ee.y]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    pub samples: usize,
    /// Position of the other object [m]; `null` for none.
    pub other: Option<[f64; 2]>,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            samples: 800,
            other: Some(default_brush(&local_arm())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    pub visual_self: KernelParams,
    pub tactile: KernelParams,
    pub logit_amplitude: f64,
    /// Candidate lengthscales; empty keeps the configured ones.
    pub lengthscale_grid: Vec<f64>,
}

impl Default for GpConfig {
    fn default() -> Self {
        let t = TrainingOptions::default();
        GpConfig {
            visual_self: t.visual,
            tactile: t.tactile,
            logit_amplitude: t.logit_amplitude,
            lengthscale_grid: t.lengthscale_grid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Precisions {
    pub proprio: Option<f64>,
    pub visual_self: Option<f64>,
    pub tactile: Option<f64>,
}

impl Default for Precisions {
    fn default() -> Self {
        Precisions {
            proprio: Some(1.0),
            visual_self: Some(2e-5),
            tactile: Some(0.3),
        }
    }
}

impl Precisions {
    pub fn to_map(&self) -> ModalityMap<f64> {
        let mut m = ModalityMap::new();
        for (modality, v) in [
            (Modality::Proprio, self.proprio),
            (Modality::VisualSelf, self.visual_self),
            (Modality::Tactile, self.tactile),
        ] {
            if let Some(v) = v {
                m.insert(modality, v);
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub precisions: Precisions,
    pub step_size: f64,
    pub tol: f64,
    pub max_steps: usize,
    pub precision_mode: PrecisionMode,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let o = EstimatorOptions::default();
        EstimatorConfig {
            precisions: Precisions::default(),
            step_size: o.step_size,
            tol: o.tol,
            max_steps: o.max_steps,
            precision_mode: o.precision_mode,
        }
    }
}

impl EstimatorConfig {
    pub fn options(&self) -> EstimatorOptions {
        EstimatorOptions {
            step_size: self.step_size,
            tol: self.tol,
            max_steps: self.max_steps,
            precision_mode: self.precision_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RhiConfig {
    pub schedule: PerturbationSchedule,
    pub true_theta: [f64; 3],
    /// Convergence threshold on the change of mu over the last stroke period.
    pub tol: f64,
    /// Brute-force cross-check of each equilibrium.
    pub brute_force: bool,
    pub brute_force_half_width: f64,
    /// Run the 2-D identity toy instead of the learned models.
    pub toy: bool,
    pub toy_proprio_precision: f64,
    pub toy_visual_precision: f64,
}

impl Default for RhiConfig {
    fn default() -> Self {
        RhiConfig {
            schedule: PerturbationSchedule::default(),
            true_theta: NOMINAL_POSE,
            tol: 1e-6,
            brute_force: true,
            brute_force_half_width: 0.3,
            toy: false,
            toy_proprio_precision: 1.0,
            toy_visual_precision: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    pub held_out: usize,
    pub drop: Modality,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            held_out: 100,
            drop: Modality::VisualSelf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arm: ArmConfig,
    pub acquisition: AcquisitionConfig,
    pub gp: GpConfig,
    pub estimator: EstimatorConfig,
    pub rhi: RhiConfig,
    pub grid: GridParams,
    pub scene: SceneConfig,
    pub reconstruct: ReconstructConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arm: local_arm(),
            acquisition: AcquisitionConfig::default(),
            gp: GpConfig::default(),
            estimator: EstimatorConfig::default(),
            rhi: RhiConfig::default(),
            grid: GridParams::default(),
            scene: SceneConfig::default(),
            reconstruct: ReconstructConfig::default(),
            seed: 42,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Copy with `output_dir` set to ".", as stored next to the outputs.
    pub fn portable(&self) -> RunConfig {
        RunConfig {
            output_dir: PathBuf::from("."),
            ..self.clone()
        }
    }

    /// SHA-256 of the compact JSON form of [`RunConfig::portable`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(&self.portable()).expect("config serializes"),
        ))
    }

    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        if self.acquisition.samples == 0 {
            return Err(Error::Config(
                "acquisition.samples must be at least 1".into(),
            ));
        }
        if let Some(p) = self.acquisition.other {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("acquisition.other must be finite".into()));
            }
        }
        self.gp.visual_self.validate()?;
        self.gp.tactile.validate()?;
        if !(self.gp.logit_amplitude > 0.0 && self.gp.logit_amplitude.is_finite()) {
            return Err(Error::Config("gp.logit_amplitude must be positive".into()));
        }
        if self
            .gp
            .lengthscale_grid
            .iter()
            .any(|l| !(*l > 0.0 && l.is_finite()))
        {
            return Err(Error::Config(
                "gp.lengthscale_grid entries must be positive".into(),
            ));
        }
        self.estimator.options().validate()?;
        let pis = self.estimator.precisions.to_map();
        if pis.iter().next().is_none() {
            return Err(Error::Config(
                "estimator.precisions enables no modality".into(),
            ));
        }
        for (m, &p) in pis.iter() {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Config(format!(
                    "estimator.precisions.{m} must be positive, got {p}"
                )));
            }
        }
        self.rhi.schedule.validate()?;
        let theta = self.true_theta();
        self.arm
            .check_limits(&theta)
            .map_err(|e| Error::Config(format!("rhi.true_theta: {e}")))?;
        if !(self.rhi.tol > 0.0) {
            return Err(Error::Config("rhi.tol must be positive".into()));
        }
        if !(self.rhi.brute_force_half_width > 0.0 && self.rhi.brute_force_half_width.is_finite()) {
            return Err(Error::Config(
                "rhi.brute_force_half_width must be positive".into(),
            ));
        }
        if !(self.rhi.toy_proprio_precision > 0.0 && self.rhi.toy_visual_precision > 0.0) {
            return Err(Error::Config("rhi toy precisions must be positive".into()));
        }
        self.grid.validate()?;
        self.scene.validate()?;
        if self.reconstruct.held_out == 0 {
            return Err(Error::Config(
                "reconstruct.held_out must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn true_theta(&self) -> JointState {
        let t = self.rhi.true_theta;
        JointState::new(t[0], t[1], t[2])
    }

    pub fn other(&self) -> Option<OtherObject> {
        self.acquisition.other.map(|p| OtherObject::new(p[0], p[1]))
    }

    pub fn training_options(&self, exec: Exec) -> TrainingOptions {
        TrainingOptions {
            visual: self.gp.visual_self,
            tactile: self.gp.tactile,
            logit_amplitude: self.gp.logit_amplitude,
            lengthscale_grid: self.gp.lengthscale_grid.clone(),
            exec,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let moved = RunConfig {
            output_dir: "elsewhere".into(),
            ..c.clone()
        };
        assert_eq!(moved.hash(), c.hash());
    }

    #[test]
    fn partial_document_takes_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 7, "grid": {"width": 64, "height": 48, "decimation": 10, "window": 15, "beta": 2.0, "rho": 0.1, "tau": 0.5}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.rhi, RhiConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 7}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"rhi": {"gain": 4}}"#).is_err());
    }

    #[test]
    fn nested_validation_runs() {
        let mut c = RunConfig::default();
        c.grid.tau = 1.5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.rhi.true_theta = [3.0, 1.2, 0.9];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.estimator.precisions = Precisions {
            proprio: None,
            visual_self: None,
            tactile: None,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_brush_sits_right_of_the_fingertip() {
        let arm = local_arm();
        let ee = end_effector(&JointState::new(0.3, 1.2, 0.9).0, &arm);
        let b = default_brush(&arm);
        assert!((b[0] - ee.x - 0.08).abs() < 1e-15 && b[1] == ee.y);
    }
}
