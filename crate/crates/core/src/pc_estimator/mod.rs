//! Latent body-state inference by gradient descent on a quadratic free energy.
//!
//! F(mu) = sum_m (Pi_m / 2) |s_m - g_m(mu)|^2 + (Pi_0 / 2) |mu - mu_0|^2

mod rhi;

pub use rhi::{
    equilibrium_by_grid, period_free_energy, run_rhi, run_rhi_toy, DriftReport, DriftSummary,
    PerturbationSchedule, RhiSetup, Stimulation,
};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::arm_sim::SensorSnapshot;
use crate::error::{Error, Result};
use crate::gp_forward::{ForwardModelSet, Modality, ModalityMap, SensorModel};
use crate::par::{self, Exec};

/// Sensor readings for one frame; a missing entry drops that modality's term.
pub type Observation = ModalityMap<DVector<f64>>;

pub fn observation_from_snapshot(snap: &SensorSnapshot) -> Observation {
    let mut obs = Observation::new().with(
        Modality::Proprio,
        DVector::from_column_slice(snap.proprio.as_slice()),
    );
    if let Some(px) = snap.visual_self {
        obs.insert(
            Modality::VisualSelf,
            DVector::from_column_slice(px.as_slice()),
        );
    }
    obs.insert(Modality::Tactile, DVector::from_vec(snap.tactile.clone()));
    obs
}

/// Noiseless readings predicted by the models themselves at `mu`.
pub fn predicted_observation(models: &ForwardModelSet, mu: &[f64]) -> Observation {
    let mut obs = Observation::new();
    for (m, model) in models.iter() {
        obs.insert(m, model.predict(mu));
    }
    obs
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyBelief {
    /// Mode of q(mu).
    pub mu: DVector<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_precision: f64,
    /// Modalities without an entry are disabled.
    pub precisions: ModalityMap<f64>,
    pub last_free_energy: f64,
}

impl BodyBelief {
    pub fn new(mu: DVector<f64>, precisions: ModalityMap<f64>) -> Result<BodyBelief> {
        let b = BodyBelief {
            prior_mean: mu.clone(),
            mu,
            prior_precision: 0.0,
            precisions,
            last_free_energy: f64::NAN,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_prior(mut self, mean: DVector<f64>, precision: f64) -> Result<BodyBelief> {
        self.prior_mean = mean;
        self.prior_precision = precision;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("belief mode must be finite"));
        }
        if self.prior_mean.len() != self.mu.len() {
            return Err(Error::domain("prior mean and mode differ in dimension"));
        }
        if !(self.prior_precision >= 0.0 && self.prior_precision.is_finite()) {
            return Err(Error::domain(format!(
                "prior precision must be non-negative, got {}",
                self.prior_precision
            )));
        }
        for (m, &p) in self.precisions.iter() {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::domain(format!(
                    "precision for `{m}` must be positive, got {p}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    /// Configured constants.
    #[default]
    Fixed,
    /// Constants scaled by sigma_n^2 / (sigma_n^2 + predictive variance at mu),
    /// re-evaluated once per frame.
    PredictiveVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorOptions {
    pub step_size: f64,
    pub tol: f64,
    pub max_steps: usize,
    #[serde(default)]
    pub precision_mode: PrecisionMode,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            step_size: 0.05,
            tol: 1e-6,
            max_steps: 2000,
            precision_mode: PrecisionMode::Fixed,
        }
    }
}

impl EstimatorOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

struct Term<'a> {
    precision: f64,
    reading: &'a DVector<f64>,
    model: &'a SensorModel,
}

fn active_terms<'a>(
    belief: &BodyBelief,
    obs: &'a Observation,
    models: &'a ForwardModelSet,
) -> Result<Vec<Term<'a>>> {
    if belief.mu.len() != models.dim() {
        return Err(Error::domain(format!(
            "belief has dimension {} but models expect {}",
            belief.mu.len(),
            models.dim()
        )));
    }
    let mut terms = Vec::new();
    for (m, &precision) in belief.precisions.iter() {
        let Some(reading) = obs.get(m) else { continue };
        let model = models.require(m)?;
        if reading.len() != model.output_dim() {
            return Err(Error::domain(format!(
                "`{m}` reading has {} entries, model predicts {}",
                reading.len(),
                model.output_dim()
            )));
        }
        terms.push(Term {
            precision,
            reading,
            model,
        });
    }
    if terms.is_empty() {
        return Err(Error::domain(
            "no enabled modality is present in the observation",
        ));
    }
    Ok(terms)
}

/// Free energy and its gradient in one pass.
pub fn evaluate(
    belief: &BodyBelief,
    obs: &Observation,
    models: &ForwardModelSet,
) -> Result<(f64, DVector<f64>)> {
    let terms = active_terms(belief, obs, models)?;
    let mu = belief.mu.as_slice();
    let dmu = &belief.mu - &belief.prior_mean;
    let mut f = 0.5 * belief.prior_precision * dmu.norm_squared();
    let mut grad = belief.prior_precision * dmu;
    for t in &terms {
        let err = t.reading - t.model.predict(mu);
        f += 0.5 * t.precision * err.norm_squared();
        grad -= t.precision * t.model.jacobian(mu).tr_mul(&err);
    }
    Ok((f, grad))
}

pub fn free_energy(
    belief: &BodyBelief,
    obs: &Observation,
    models: &ForwardModelSet,
) -> Result<f64> {
    let terms = active_terms(belief, obs, models)?;
    let mu = belief.mu.as_slice();
    let mut f = 0.5 * belief.prior_precision * (&belief.mu - &belief.prior_mean).norm_squared();
    for t in &terms {
        f += 0.5 * t.precision * (t.reading - t.model.predict(mu)).norm_squared();
    }
    Ok(f)
}

pub fn free_energy_gradient(
    belief: &BodyBelief,
    obs: &Observation,
    models: &ForwardModelSet,
) -> Result<DVector<f64>> {
    evaluate(belief, obs, models).map(|(_, g)| g)
}

/// Precisions actually used for the current frame.
pub fn effective_precisions(
    belief: &BodyBelief,
    models: &ForwardModelSet,
    mode: PrecisionMode,
) -> ModalityMap<f64> {
    match mode {
        PrecisionMode::Fixed => belief.precisions.clone(),
        PrecisionMode::PredictiveVariance => belief.precisions.map(|m, &p| {
            let c = models
                .get(m)
                .map_or(1.0, |model| model.confidence(belief.mu.as_slice()));
            p * c
        }),
    }
}

/// One Euler step `mu <- mu - eta dF/dmu`.
///
/// `last_free_energy` is set to F at the pre-step mode.
pub fn step(
    belief: &BodyBelief,
    obs: &Observation,
    models: &ForwardModelSet,
    eta: f64,
) -> Result<BodyBelief> {
    step_with(belief, obs, models, eta, PrecisionMode::Fixed).map(|(b, _)| b)
}

/// Like [`step`]; also returns the gradient that was applied.
pub fn step_with(
    belief: &BodyBelief,
    obs: &Observation,
    models: &ForwardModelSet,
    eta: f64,
    mode: PrecisionMode,
) -> Result<(BodyBelief, DVector<f64>)> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::domain(format!(
            "step size must be positive, got {eta}"
        )));
    }
    let (f, grad) = match mode {
        PrecisionMode::Fixed => evaluate(belief, obs, models)?,
        PrecisionMode::PredictiveVariance => {
            let scaled = BodyBelief {
                precisions: effective_precisions(belief, models, mode),
                ..belief.clone()
            };
            evaluate(&scaled, obs, models)?
        }
    };
    if grad.iter().any(|g| !g.is_finite()) || !f.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite free-energy gradient at mu = {:?}",
            belief.mu.as_slice()
        )));
    }
    let mut next = belief.clone();
    next.mu -= eta * &grad;
    next.last_free_energy = f;
    Ok((next, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub belief: BodyBelief,
    pub converged: bool,
    /// Steps taken before stopping.
    pub steps: usize,
}

/// Descends over the observation stream, cycling it when shorter than the run.
///
/// Stops as soon as `|dF/dmu|_inf < tol` (before stepping) or after
/// `max_steps` updates.
pub fn infer(
    initial: &BodyBelief,
    observations: &[Observation],
    models: &ForwardModelSet,
    opts: &EstimatorOptions,
) -> Result<Inference> {
    opts.validate()?;
    initial.validate()?;
    if observations.is_empty() {
        return Err(Error::domain("inference needs at least one observation"));
    }
    let mut belief = initial.clone();
    for k in 0..=opts.max_steps {
        let obs = &observations[k % observations.len()];
        let (next, grad) = step_with(&belief, obs, models, opts.step_size, opts.precision_mode)?;
        if grad.amax() < opts.tol {
            belief.last_free_energy = next.last_free_energy;
            return Ok(Inference {
                belief,
                converged: true,
                steps: k,
            });
        }
        if k == opts.max_steps {
            belief.last_free_energy = next.last_free_energy;
            break;
        }
        belief = next;
    }
    Ok(Inference {
        belief,
        converged: false,
        steps: opts.max_steps,
    })
}

/// Predicted reading of `modality` at the current mode, usable when that
/// modality was never observed.
pub fn reconstruct_modality(
    belief: &BodyBelief,
    models: &ForwardModelSet,
    modality: Modality,
) -> Result<DVector<f64>> {
    Ok(models.require(modality)?.predict(belief.mu.as_slice()))
}

/// Exhaustive search on the lattice `center + resolution * i`, |i| <= half_width / resolution.
///
/// Returns the first lattice point (in row-major order) attaining the minimum.
pub fn grid_minimize<F>(
    exec: Exec,
    objective: F,
    center: &[f64],
    half_width: f64,
    resolution: f64,
) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let half = (half_width / resolution).round() as i64;
    let per_dim = (2 * half + 1) as usize;
    let d = center.len();
    let total = per_dim.pow(d as u32);
    let point = |mut idx: usize| -> Vec<f64> {
        let mut p = vec![0.0; d];
        for a in (0..d).rev() {
            let i = (idx % per_dim) as i64 - half;
            idx /= per_dim;
            p[a] = center[a] + resolution * i as f64;
        }
        p
    };
    let values = par::map_range(exec, total, |i| objective(&point(i)));
    let (best, value) =
        values.iter().enumerate().fold(
            (0, f64::INFINITY),
            |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc },
        );
    (point(best), value)
}

/// Coarse lattice over `center +- half_width`, then a fine lattice around the
/// coarse winner.
pub fn grid_minimize_refined<F>(
    exec: Exec,
    objective: F,
    center: &[f64],
    half_width: f64,
    coarse: f64,
    fine: f64,
) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let (c, _) = grid_minimize(exec, &objective, center, half_width, coarse);
    grid_minimize(exec, &objective, &c, 2.0 * coarse, fine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stage_rng, Stage};
    use rand::Rng;

    fn toy1() -> ForwardModelSet {
        ForwardModelSet::identity_toy(1)
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn proprio_only(pi: f64) -> ModalityMap<f64> {
        ModalityMap::new().with(Modality::Proprio, pi)
    }

    #[test]
    fn perfect_prediction_has_zero_energy() {
        let models = toy1();
        let b =
            BodyBelief::new(v(&[0.4]), proprio_only(1.0).with(Modality::VisualSelf, 2.0)).unwrap();
        let obs = predicted_observation(&models, &[0.4]);
        assert_eq!(free_energy(&b, &obs, &models).unwrap(), 0.0);
        assert_eq!(free_energy_gradient(&b, &obs, &models).unwrap()[0], 0.0);
    }

    #[test]
    fn scalar_hand_computation() {
        let models = toy1();
        let b = BodyBelief::new(v(&[0.0]), proprio_only(2.0)).unwrap();
        let obs = Observation::new().with(Modality::Proprio, v(&[1.0]));
        assert_eq!(free_energy(&b, &obs, &models).unwrap(), 1.0);
        assert_eq!(free_energy_gradient(&b, &obs, &models).unwrap()[0], -2.0);
        let next = step(&b, &obs, &models, 0.1).unwrap();
        assert!((next.mu[0] - 0.2).abs() < 1e-15);
        assert_eq!(next.last_free_energy, 1.0);
        assert_eq!(next.precisions, b.precisions);
    }

    #[test]
    fn zero_gradient_leaves_belief() {
        let models = toy1();
        let b = BodyBelief::new(v(&[0.3]), proprio_only(1.0)).unwrap();
        let obs = Observation::new().with(Modality::Proprio, v(&[0.3]));
        assert_eq!(step(&b, &obs, &models, 0.5).unwrap().mu, b.mu);
    }

    #[test]
    fn no_enabled_modality_is_domain_error() {
        let models = toy1();
        let b = BodyBelief::new(v(&[0.0]), proprio_only(1.0)).unwrap();
        let obs = Observation::new().with(Modality::VisualSelf, v(&[1.0]));
        assert!(matches!(
            free_energy(&b, &obs, &models),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn absent_reading_drops_term() {
        let models = toy1();
        let b =
            BodyBelief::new(v(&[0.0]), proprio_only(1.0).with(Modality::VisualSelf, 5.0)).unwrap();
        let obs = Observation::new().with(Modality::Proprio, v(&[1.0]));
        assert_eq!(free_energy(&b, &obs, &models).unwrap(), 0.5);
    }

    #[test]
    fn prior_term_and_term_by_term_oracle() {
        let models = ForwardModelSet::identity_toy(3);
        let mut rng = stage_rng(1, Stage::Probe);
        for _ in 0..50 {
            let r = |rng: &mut rand_chacha::ChaCha8Rng| {
                DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0))
            };
            let (mu, mu0, sp, sv) = (r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng));
            let (pp, pv, p0) = (
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.0..2.0),
            );
            let b = BodyBelief::new(mu.clone(), proprio_only(pp).with(Modality::VisualSelf, pv))
                .unwrap()
                .with_prior(mu0.clone(), p0)
                .unwrap();
            let obs = Observation::new()
                .with(Modality::Proprio, sp.clone())
                .with(Modality::VisualSelf, sv.clone());
            let mut oracle = 0.0;
            for i in 0..3 {
                oracle += 0.5 * pp * (sp[i] - mu[i]).powi(2);
                oracle += 0.5 * pv * (sv[i] - mu[i]).powi(2);
                oracle += 0.5 * p0 * (mu[i] - mu0[i]).powi(2);
            }
            assert!((free_energy(&b, &obs, &models).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_descent_is_monotone_below_stability_bound() {
        let models = toy1();
        let mut b = BodyBelief::new(
            v(&[-2.0]),
            proprio_only(3.0).with(Modality::VisualSelf, 1.0),
        )
        .unwrap()
        .with_prior(v(&[0.5]), 0.5)
        .unwrap();
        let obs = Observation::new()
            .with(Modality::Proprio, v(&[1.0]))
            .with(Modality::VisualSelf, v(&[2.0]));
        let eta = 0.99 / (3.0 + 1.0 + 0.5);
        let mut prev = free_energy(&b, &obs, &models).unwrap();
        for _ in 0..30 {
            b = step(&b, &obs, &models, eta).unwrap();
            let f = free_energy(&b, &obs, &models).unwrap();
            assert!(f <= prev);
            prev = f;
        }
    }

    #[test]
    fn symmetric_fusion_lands_at_midpoint() {
        let models = toy1();
        let b =
            BodyBelief::new(v(&[0.0]), proprio_only(1.0).with(Modality::VisualSelf, 1.0)).unwrap();
        let obs = Observation::new()
            .with(Modality::Proprio, v(&[-0.4]))
            .with(Modality::VisualSelf, v(&[1.0]));
        let out = infer(&b, &[obs], &models, &EstimatorOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.belief.mu[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn stationary_start_converges_at_step_zero() {
        let models = toy1();
        let b = BodyBelief::new(v(&[0.7]), proprio_only(1.0)).unwrap();
        let obs = predicted_observation(&models, &[0.7]);
        let out = infer(&b, &[obs], &models, &EstimatorOptions::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.steps, 0);
        assert_eq!(out.belief.mu, b.mu);
    }

    #[test]
    fn swapping_identical_modalities_keeps_trajectory() {
        let models = ForwardModelSet::identity_toy(2);
        let pis = proprio_only(1.5).with(Modality::VisualSelf, 0.5);
        let b = BodyBelief::new(v(&[0.0, 0.0]), pis.clone()).unwrap();
        let swapped_pis = proprio_only(0.5).with(Modality::VisualSelf, 1.5);
        let bs = BodyBelief::new(v(&[0.0, 0.0]), swapped_pis).unwrap();
        let (a, c) = (v(&[1.0, -1.0]), v(&[0.3, 0.2]));
        let obs = Observation::new()
            .with(Modality::Proprio, a.clone())
            .with(Modality::VisualSelf, c.clone());
        let obs_s = Observation::new()
            .with(Modality::Proprio, c)
            .with(Modality::VisualSelf, a);
        let (mut x, mut y) = (b, bs);
        for _ in 0..50 {
            x = step(&x, &obs, &models, 0.1).unwrap();
            y = step(&y, &obs_s, &models, 0.1).unwrap();
            assert!((&x.mu - &y.mu).amax() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_is_numerical_error() {
        let models = toy1();
        let b = BodyBelief::new(v(&[0.0]), proprio_only(1.0)).unwrap();
        let obs = Observation::new().with(Modality::Proprio, v(&[f64::INFINITY]));
        assert!(matches!(
            step(&b, &obs, &models, 0.1),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn reconstruct_proprio_is_mu_and_unknown_modality_fails() {
        let models = toy1();
        let b = BodyBelief::new(v(&[0.25]), proprio_only(1.0)).unwrap();
        assert_eq!(
            reconstruct_modality(&b, &models, Modality::Proprio).unwrap(),
            b.mu
        );
        assert!(matches!(
            reconstruct_modality(&b, &models, Modality::Tactile),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn grid_minimize_finds_lattice_minimum() {
        let f = |p: &[f64]| (p[0] - 0.12).powi(2) + (p[1] + 0.3).powi(2);
        let (p, _) = grid_minimize(Exec::Sequential, f, &[0.0, 0.0], 0.5, 0.01);
        assert!((p[0] - 0.12).abs() < 1e-9 && (p[1] + 0.3).abs() < 1e-9);
        let (q, _) = grid_minimize_refined(Exec::Parallel, f, &[0.0, 0.0], 0.5, 0.05, 0.005);
        assert!((q[0] - 0.12).abs() < 0.003 && (q[1] + 0.3).abs() < 0.003);
    }

    #[test]
    fn invalid_precision_rejected() {
        assert!(BodyBelief::new(v(&[0.0]), proprio_only(0.0)).is_err());
        assert!(BodyBelief::new(v(&[0.0]), proprio_only(1.0))
            .unwrap()
            .with_prior(v(&[0.0]), -1.0)
            .is_err());
    }

    proptest::proptest! {
        #[test]
        fn free_energy_nonnegative_and_small_steps_descend(
            mu in proptest::collection::vec(-2.0f64..2.0, 2),
            s in proptest::collection::vec(-2.0f64..2.0, 2),
            pp in 0.1f64..5.0,
            pv in 0.1f64..5.0,
        ) {
            let models = ForwardModelSet::identity_toy(2);
            let obs = Observation::new()
                .with(Modality::Proprio, DVector::zeros(2))
                .with(Modality::VisualSelf, v(&s));
            let pis = ModalityMap::new().with(Modality::Proprio, pp).with(Modality::VisualSelf, pv);
            let b = BodyBelief::new(v(&mu), pis).unwrap();
            let f0 = free_energy(&b, &obs, &models).unwrap();
            proptest::prop_assert!(f0 >= 0.0);
            // Quadratic with curvature pp + pv: any eta below 2 / (pp + pv) is a descent step.
            let next = step(&b, &obs, &models, 1.0 / (pp + pv)).unwrap();
            proptest::prop_assert!(free_energy(&next, &obs, &models).unwrap() <= f0 + 1e-12);
        }
    }
}
