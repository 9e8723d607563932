//! Rubber-hand drift experiment.
//!
//! The seen arm is displaced by a pixel offset while a brush strokes the
//! displaced ("rubber") forearm. Touches felt on the real skin are either in
//! phase with the seen strokes (synchronous), half a period late
//! (asynchronous) or absent. Synchronous stimulation multiplies the visual and
//! tactile precisions by a gain.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use super::{
    free_energy, grid_minimize_refined, predicted_observation, step_with, BodyBelief, Observation,
    PrecisionMode,
};
use crate::arm_sim::{
    contacts_at, end_effector, taxel_positions, ArmConfig, JointState, OtherObject,
};
use crate::error::{Error, Result};
use crate::gp_forward::{ForwardModelSet, Modality, ModalityMap};
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stimulation {
    None,
    Synchronous,
    Asynchronous,
}

impl Stimulation {
    pub const ALL: [Stimulation; 3] = [
        Stimulation::Synchronous,
        Stimulation::Asynchronous,
        Stimulation::None,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stimulation::None => "none",
            Stimulation::Synchronous => "sync",
            Stimulation::Asynchronous => "async",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSchedule {
    /// Displacement of the seen arm [px].
    pub visual_offset: [f64; 2],
    pub stimulation: Stimulation,
    /// Gain on visual and tactile precision under synchronous stimulation.
    pub precision_gain: f64,
    pub n_steps: usize,
    pub step_size: f64,
    /// Stroke period [frames]; strokes occupy the first half of each period.
    pub period: usize,
}

impl Default for PerturbationSchedule {
    fn default() -> Self {
        PerturbationSchedule {
            visual_offset: [30.0, 0.0],
            stimulation: Stimulation::Synchronous,
            precision_gain: 4.0,
            n_steps: 2000,
            step_size: 0.01,
            period: 10,
        }
    }
}

impl PerturbationSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.precision_gain >= 1.0 && self.precision_gain.is_finite()) {
            return Err(Error::Config(format!(
                "precision gain must be >= 1, got {}",
                self.precision_gain
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if self.period < 2 || self.period % 2 != 0 {
            return Err(Error::Config(format!(
                "stroke period must be even and >= 2, got {}",
                self.period
            )));
        }
        if self.visual_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("visual offset must be finite".into()));
        }
        Ok(())
    }

    pub fn with_stimulation(mut self, s: Stimulation) -> Self {
        self.stimulation = s;
        self
    }

    pub fn offset(&self) -> Vector2<f64> {
        Vector2::new(self.visual_offset[0], self.visual_offset[1])
    }

    fn in_stroke(&self, k: usize) -> bool {
        k % self.period < self.period / 2
    }

    /// Whether a touch is felt on frame `k`.
    pub fn touch_at(&self, k: usize) -> bool {
        match self.stimulation {
            Stimulation::None => false,
            Stimulation::Synchronous => self.in_stroke(k),
            Stimulation::Asynchronous => self.in_stroke(k + self.period / 2),
        }
    }

    /// Whether the brush is seen touching the displaced arm on frame `k`.
    pub fn visual_cue_at(&self, k: usize) -> bool {
        self.stimulation != Stimulation::None && self.in_stroke(k)
    }

    pub fn gain(&self) -> f64 {
        match self.stimulation {
            Stimulation::Synchronous => self.precision_gain,
            _ => 1.0,
        }
    }
}

/// Everything the full-pipeline experiment needs besides the models.
#[derive(Debug, Clone, PartialEq)]
pub struct RhiSetup {
    pub arm: ArmConfig,
    pub precisions: ModalityMap<f64>,
    pub brush: OtherObject,
    pub precision_mode: PrecisionMode,
    /// Convergence threshold on the change of mu over the last period.
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub schedule: PerturbationSchedule,
    /// n_steps + 1 entries, starting with the initial mode.
    pub mu_trajectory: Vec<DVector<f64>>,
    pub free_energy: Vec<f64>,
    /// Estimated end-effector position for each trajectory entry [px].
    pub ee_px: Vec<[f64; 2]>,
    pub drift: f64,
    pub converged: bool,
    /// Closed-form drift when one exists (identity toy).
    pub expected_drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub condition: Stimulation,
    pub drift_px: f64,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_drift_px: Option<f64>,
    pub schedule: PerturbationSchedule,
}

impl DriftReport {
    pub fn summary(&self) -> DriftSummary {
        DriftSummary {
            condition: self.schedule.stimulation,
            drift_px: self.drift,
            converged: self.converged,
            expected_drift_px: self.expected_drift,
            schedule: self.schedule,
        }
    }

    pub fn final_mu(&self) -> &DVector<f64> {
        self.mu_trajectory
            .last()
            .expect("trajectory is never empty")
    }

    /// Mean mode over the last stroke period.
    pub fn settled_mu(&self) -> DVector<f64> {
        settled(&self.mu_trajectory, self.schedule.period)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(["step", "mu0", "mu1", "mu2", "free_energy", "ee_u", "ee_v"])
            .expect("in-memory write");
        for (k, mu) in self.mu_trajectory.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend((0..3).map(|i| mu.get(i).map(|v| v.to_string()).unwrap_or_default()));
            rec.push(self.free_energy[k].to_string());
            rec.push(self.ee_px[k][0].to_string());
            rec.push(self.ee_px[k][1].to_string());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

fn settled(traj: &[DVector<f64>], period: usize) -> DVector<f64> {
    let tail = &traj[traj.len().saturating_sub(period.max(1))..];
    let mut acc = DVector::zeros(tail[0].len());
    for mu in tail {
        acc += mu;
    }
    acc / tail.len() as f64
}

/// One stroke period of observations and the precisions used with each.
fn arm_frames(
    models: &ForwardModelSet,
    schedule: &PerturbationSchedule,
    setup: &RhiSetup,
    theta: &JointState,
) -> Result<Vec<(Observation, ModalityMap<f64>)>> {
    let mu = theta.0.as_slice();
    let base = predicted_observation(models, mu);
    let offset = schedule.offset();
    let rubber: Vec<_> = taxel_positions(&theta.0, &setup.arm)
        .into_iter()
        .map(|p| p + setup.arm.camera.pixel_offset_to_world(&offset))
        .collect();
    let felt = contacts_at(&rubber, &setup.brush, setup.arm.contact_radius);
    let gain = schedule.gain();
    let pis = setup.precisions.map(|m, &p| match m {
        Modality::VisualSelf | Modality::Tactile => p * gain,
        Modality::Proprio => p,
    });

    let mut frames = Vec::with_capacity(schedule.period);
    for k in 0..schedule.period {
        let mut obs = base.clone();
        if let Some(v) = obs.get_mut(Modality::VisualSelf) {
            v[0] += offset.x;
            v[1] += offset.y;
        }
        if schedule.touch_at(k) {
            if let Some(t) = obs.get_mut(Modality::Tactile) {
                if t.len() != felt.len() {
                    return Err(Error::domain("tactile model and taxel layout disagree"));
                }
                for (i, &f) in felt.iter().enumerate() {
                    if f > 0.0 {
                        t[i] = 1.0;
                    }
                }
            }
        }
        frames.push((obs, pis.clone()));
    }
    Ok(frames)
}

fn run_frames(
    models: &ForwardModelSet,
    schedule: &PerturbationSchedule,
    frames: &[(Observation, ModalityMap<f64>)],
    mu0: DVector<f64>,
    mode: PrecisionMode,
    tol: f64,
    project: impl Fn(&DVector<f64>) -> [f64; 2],
) -> Result<DriftReport> {
    let mut belief = BodyBelief::new(mu0, frames[0].1.clone())?;
    let mut traj = Vec::with_capacity(schedule.n_steps + 1);
    let mut energy = Vec::with_capacity(schedule.n_steps + 1);
    traj.push(belief.mu.clone());
    for k in 0..schedule.n_steps {
        let (obs, pis) = &frames[k % frames.len()];
        belief.precisions = pis.clone();
        let (next, _) = step_with(&belief, obs, models, schedule.step_size, mode)?;
        energy.push(next.last_free_energy);
        belief = next;
        traj.push(belief.mu.clone());
    }
    let (obs, pis) = &frames[schedule.n_steps % frames.len()];
    belief.precisions = pis.clone();
    energy.push(free_energy(&belief, obs, models)?);

    let n = schedule.n_steps;
    let p = schedule.period;
    let converged = n >= p && (&traj[n] - &traj[n - p]).amax() < tol;
    let ee_px: Vec<[f64; 2]> = traj.iter().map(&project).collect();
    let before = Vector2::from(ee_px[0]);
    let after = Vector2::from(project(&settled(&traj, p)));
    let offset = schedule.offset();
    let drift = if offset.norm() > 0.0 {
        (after - before).dot(&offset.normalize())
    } else {
        (after - before).norm()
    };
    if !drift.is_finite() {
        return Err(Error::Numerical("drift is not finite".into()));
    }
    Ok(DriftReport {
        schedule: *schedule,
        mu_trajectory: traj,
        free_energy: energy,
        ee_px,
        drift,
        converged,
        expected_drift: None,
    })
}

/// Full pipeline: learned models, arm kinematics and camera.
///
/// Readings are rendered through the models at the true pose, so without an
/// offset or felt touch the start is an exact equilibrium. The estimate starts
/// at the true pose with a flat prior.
pub fn run_rhi(
    models: &ForwardModelSet,
    schedule: &PerturbationSchedule,
    setup: &RhiSetup,
    true_theta: &JointState,
) -> Result<DriftReport> {
    schedule.validate()?;
    setup.arm.check_limits(true_theta)?;
    let frames = arm_frames(models, schedule, setup, true_theta)?;
    let cam = &setup.arm.camera;
    run_frames(
        models,
        schedule,
        &frames,
        DVector::from_column_slice(true_theta.0.as_slice()),
        setup.precision_mode,
        setup.tol,
        |mu| {
            let theta = nalgebra::Vector3::new(mu[0], mu[1], mu[2]);
            let px = cam.project_unbounded(&end_effector(&theta, &setup.arm));
            [px.x, px.y]
        },
    )
}

/// Identity toy: proprio and vision both read a 2-D position in pixels.
/// Proprio reads the origin, vision reads the offset.
pub fn run_rhi_toy(
    schedule: &PerturbationSchedule,
    proprio_precision: f64,
    visual_precision: f64,
) -> Result<DriftReport> {
    schedule.validate()?;
    let models = ForwardModelSet::identity_toy(2);
    let offset = schedule.offset();
    let obs = Observation::new()
        .with(Modality::Proprio, DVector::zeros(2))
        .with(
            Modality::VisualSelf,
            DVector::from_column_slice(offset.as_slice()),
        );
    let pv = visual_precision * schedule.gain();
    let pis = ModalityMap::new()
        .with(Modality::Proprio, proprio_precision)
        .with(Modality::VisualSelf, pv);
    let mut report = run_frames(
        &models,
        schedule,
        &[(obs, pis)],
        DVector::zeros(2),
        PrecisionMode::Fixed,
        1e-12,
        |mu| [mu[0], mu[1]],
    )?;
    report.expected_drift = Some(offset.norm() * pv / (proprio_precision + pv));
    Ok(report)
}

fn averaged_energy(
    models: &ForwardModelSet,
    frames: &[(Observation, ModalityMap<f64>)],
    mu: &[f64],
) -> f64 {
    // Predictions do not depend on the frame; evaluate them once.
    let pred = predicted_observation(models, mu);
    let mut total = 0.0;
    for (obs, pis) in frames {
        for (m, &p) in pis.iter() {
            if let (Some(s), Some(g)) = (obs.get(m), pred.get(m)) {
                total += 0.5 * p * (s - g).norm_squared();
            }
        }
    }
    total / frames.len() as f64
}

/// Free energy at `mu` averaged over one stroke period (fixed precisions).
pub fn period_free_energy(
    models: &ForwardModelSet,
    schedule: &PerturbationSchedule,
    setup: &RhiSetup,
    true_theta: &JointState,
    mu: &[f64],
) -> Result<f64> {
    let frames = arm_frames(models, schedule, setup, true_theta)?;
    Ok(averaged_energy(models, &frames, mu))
}

/// Brute-force equilibrium: minimizes the period-averaged free energy on a
/// lattice around the true pose (0.02 rad, then 0.005 rad).
///
/// Returns the minimizing pose and its drift along the offset [px].
pub fn equilibrium_by_grid(
    exec: Exec,
    models: &ForwardModelSet,
    schedule: &PerturbationSchedule,
    setup: &RhiSetup,
    true_theta: &JointState,
    half_width: f64,
) -> Result<(DVector<f64>, f64)> {
    schedule.validate()?;
    let frames = arm_frames(models, schedule, setup, true_theta)?;
    let probe = BodyBelief::new(
        DVector::from_column_slice(true_theta.0.as_slice()),
        frames[0].1.clone(),
    )?;
    free_energy(&probe, &frames[0].0, models)?;

    let objective = |mu: &[f64]| averaged_energy(models, &frames, mu);
    let (best, _) = grid_minimize_refined(
        exec,
        objective,
        true_theta.0.as_slice(),
        half_width,
        0.02,
        0.005,
    );
    let cam = &setup.arm.camera;
    let ee = |v: &[f64]| {
        cam.project_unbounded(&end_effector(
            &nalgebra::Vector3::new(v[0], v[1], v[2]),
            &setup.arm,
        ))
    };
    let offset = schedule.offset();
    let delta = ee(&best) - ee(true_theta.0.as_slice());
    let drift = if offset.norm() > 0.0 {
        delta.dot(&offset.normalize())
    } else {
        delta.norm()
    };
    Ok((DVector::from_vec(best), drift))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_schedule(stim: Stimulation) -> PerturbationSchedule {
        PerturbationSchedule {
            stimulation: stim,
            ..PerturbationSchedule::default()
        }
    }

    #[test]
    fn toy_drift_matches_gaussian_fusion() {
        for stim in Stimulation::ALL {
            let r = run_rhi_toy(&toy_schedule(stim), 1.0, 3.0).unwrap();
            let pv = 3.0 * toy_schedule(stim).gain();
            let expected = 30.0 * pv / (1.0 + pv);
            assert!(
                (r.drift - expected).abs() < 1e-6,
                "{stim:?}: {} vs {expected}",
                r.drift
            );
            assert!(r.converged);
            assert_eq!(r.mu_trajectory.len(), 2001);
        }
    }

    #[test]
    fn toy_without_offset_has_no_drift() {
        let s = PerturbationSchedule {
            visual_offset: [0.0, 0.0],
            ..PerturbationSchedule::default()
        };
        assert!(run_rhi_toy(&s, 1.0, 3.0).unwrap().drift.abs() < 1e-9);
    }

    #[test]
    fn toy_drift_increases_with_visual_precision() {
        let s = toy_schedule(Stimulation::None);
        let mut prev = 0.0;
        for pv in [0.1, 0.5, 1.0, 2.0, 8.0] {
            let d = run_rhi_toy(&s, 1.0, pv).unwrap().drift;
            assert!(d > prev && d < 30.0);
            prev = d;
        }
    }

    #[test]
    fn stroke_timing() {
        let s = toy_schedule(Stimulation::Synchronous);
        let touches: Vec<bool> = (0..10).map(|k| s.touch_at(k)).collect();
        assert_eq!(
            touches,
            [true, true, true, true, true, false, false, false, false, false]
        );
        let a = toy_schedule(Stimulation::Asynchronous);
        assert!((0..10).all(|k| a.touch_at(k) != a.visual_cue_at(k)));
        let n = toy_schedule(Stimulation::None);
        assert!((0..10).all(|k| !n.touch_at(k) && !n.visual_cue_at(k)));
    }

    #[test]
    fn schedule_validation() {
        let bad = [
            PerturbationSchedule {
                precision_gain: 0.5,
                ..Default::default()
            },
            PerturbationSchedule {
                step_size: 0.0,
                ..Default::default()
            },
            PerturbationSchedule {
                n_steps: 0,
                ..Default::default()
            },
            PerturbationSchedule {
                period: 3,
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(matches!(s.validate(), Err(Error::Config(_))), "{s:?}");
        }
    }

    #[test]
    fn csv_layout() {
        let s = PerturbationSchedule {
            n_steps: 3,
            ..toy_schedule(Stimulation::None)
        };
        let text = run_rhi_toy(&s, 1.0, 1.0).unwrap().to_csv_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,mu0,mu1,mu2,free_energy,ee_u,ee_v");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,0,0,,"));
    }

    proptest::proptest! {
        #[test]
        fn toy_drift_bounded_and_monotone_in_visual_precision(
            pp in 0.5f64..5.0,
            pv in 0.5f64..5.0,
            offset in 1.0f64..50.0,
        ) {
            let s = PerturbationSchedule {
                visual_offset: [offset, 0.0],
                n_steps: 5000,
                ..toy_schedule(Stimulation::Asynchronous)
            };
            let lo = run_rhi_toy(&s, pp, pv).unwrap().drift;
            let hi = run_rhi_toy(&s, pp, 2.0 * pv).unwrap().drift;
            proptest::prop_assert!(lo >= 0.0 && hi <= offset);
            proptest::prop_assert!(hi > lo);
        }
    }
}
