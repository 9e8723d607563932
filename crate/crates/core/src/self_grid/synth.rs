//! Synthetic saliency sequences with ground-truth body labels.
//!
//! The arm is rasterized into the grid at a fixed pose. Its saliency follows
//! the self-motion signal; a disc-shaped distractor pulses independently.
//! Activations are normalized as `a / (a + mean)` over the frame, so the
//! background dims while the arm lights up.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GridParams, SaliencyFrame};
use crate::arm_sim::{chain_positions, ArmConfig, JointState};
use crate::error::{Error, Result};
use crate::rng::{stage_rng, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub frames: usize,
    /// Half thickness of the rasterized arm [px].
    pub arm_half_width_px: f64,
    /// Distractor disc centre [cells].
    pub distractor_center: [f64; 2],
    /// [cells]
    pub distractor_radius: f64,
    /// Scale of the self-motion signal; 0 gives a motionless sequence.
    pub motion_amplitude: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            frames: 200,
            arm_half_width_px: 20.0,
            distractor_center: [52.0, 38.0],
            distractor_radius: 4.0,
            motion_amplitude: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("scene needs at least one frame".into()));
        }
        if !(self.arm_half_width_px > 0.0 && self.distractor_radius >= 0.0) {
            return Err(Error::Config(
                "arm width and distractor radius must be positive".into(),
            ));
        }
        if !(self.motion_amplitude >= 0.0 && self.motion_amplitude.is_finite()) {
            return Err(Error::Config(
                "motion amplitude must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub frames: Vec<SaliencyFrame>,
    /// Self-motion signal per frame, in [0, 1].
    pub motion: Vec<f64>,
    /// Ground truth: cell shows the arm.
    pub inbody: Vec<bool>,
    pub distractor: Vec<bool>,
}

fn segment_distance(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + t * ab)).norm()
}

/// Cells whose centre lies within `half_width` px of a link, in image coordinates.
pub fn rasterize_arm(
    arm: &ArmConfig,
    pose: &JointState,
    grid: &GridParams,
    half_width: f64,
) -> Vec<bool> {
    let joints =
        chain_positions(&pose.0, &arm.link_lengths).map(|p| arm.camera.project_unbounded(&p));
    let k = grid.decimation as f64;
    (0..grid.width * grid.height)
        .map(|i| {
            let c = Vector2::new(
                ((i % grid.width) as f64 + 0.5) * k,
                ((i / grid.width) as f64 + 0.5) * k,
            );
            joints
                .windows(2)
                .any(|s| segment_distance(c, s[0], s[1]) <= half_width)
        })
        .collect()
}

/// Generates a labelled sequence from the self-detect stream of `seed`.
///
/// Self-motion is the norm of a smoothed random joint velocity, scaled to a
/// peak of `motion_amplitude`.
pub fn synthetic_sequence(
    arm: &ArmConfig,
    pose: &JointState,
    grid: &GridParams,
    scene: &SceneConfig,
    seed: u64,
) -> Result<SyntheticScene> {
    grid.validate()?;
    scene.validate()?;
    let mut rng = stage_rng(seed, Stage::SelfDetect);
    let n = grid.width * grid.height;
    let inbody = rasterize_arm(arm, pose, grid, scene.arm_half_width_px);
    let [dx, dy] = scene.distractor_center;
    let distractor: Vec<bool> = (0..n)
        .map(|i| {
            let (x, y) = ((i % grid.width) as f64, (i / grid.width) as f64);
            !inbody[i] && (x - dx).hypot(y - dy) <= scene.distractor_radius
        })
        .collect();
    if !inbody.iter().any(|&b| b) {
        return Err(Error::domain("the arm does not cover any grid cell"));
    }

    let frames_n = scene.frames;
    let noise: Vec<Vector3<f64>> = (0..frames_n + 2)
        .map(|_| Vector3::from_fn(|_, _| rng.sample(StandardNormal)))
        .collect();
    let speed: Vec<f64> = (0..frames_n)
        .map(|t| ((noise[t] + noise[t + 1] + noise[t + 2]) / 3.0).norm())
        .collect();
    let peak = speed.iter().cloned().fold(0.0, f64::max);
    let motion: Vec<f64> = speed
        .iter()
        .map(|s| {
            if peak > 0.0 {
                scene.motion_amplitude * s / peak
            } else {
                0.0
            }
        })
        .collect();
    let pulse: Vec<f64> = (0..frames_n).map(|_| rng.gen()).collect();

    let mut frames = Vec::with_capacity(frames_n);
    for t in 0..frames_n {
        let raw: Vec<f64> = (0..n)
            .map(|i| {
                let jitter = 0.01 * rng.gen::<f64>();
                if inbody[i] {
                    0.1 + 0.9 * motion[t] + jitter
                } else if distractor[i] {
                    0.3 + 0.2 * pulse[t] + jitter
                } else {
                    0.05 + jitter
                }
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let data = raw.iter().map(|r| r / (r + mean)).collect();
        frames.push(SaliencyFrame::new(grid.width, grid.height, data, t)?);
    }
    Ok(SyntheticScene {
        frames,
        motion,
        inbody,
        distractor,
    })
}
