use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;

use super::config::RunConfig;
use super::manifest::RunManifest;
use crate::arm_sim::{acquire_dataset, acquire_with_rng, Dataset, DatasetMeta, Sample};
use crate::error::{Error, Result};
use crate::gp_forward::{train_forward_models, ForwardModelSet, Modality, SensorModel};
use crate::par::{self, Exec};
use crate::pc_estimator::{
    equilibrium_by_grid, infer, observation_from_snapshot, reconstruct_modality, run_rhi,
    run_rhi_toy, BodyBelief, DriftReport, DriftSummary, RhiSetup, Stimulation,
};
use crate::rng::{stage_rng, Stage};
use crate::self_grid::{
    metrics_csv, pbm_bytes, pgm_bytes, run_sequence_observed, synthetic_sequence, FrameMetrics,
};

/// Resolved configuration plus where and how to run.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub exec: Exec,
}

impl Context {
    pub fn new(config: RunConfig, exec: Exec) -> Context {
        Context {
            out: config.output_dir.clone(),
            config,
            exec,
        }
    }

    fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }
}

/// Files written by a command and the text it prints.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub report: String,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Writes the config sidecar, times `body` and records everything in the manifest.
fn stage(
    ctx: &Context,
    name: &str,
    body: impl FnOnce(&Context) -> Result<(Vec<PathBuf>, String)>,
) -> Result<CommandOutput> {
    ctx.config.validate()?;
    let start = Instant::now();
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let sidecar = write_file(
        &ctx.out.join(format!("config_{name}.json")),
        ctx.config.portable().to_json(),
    )?;
    let (mut files, report) = body(ctx)?;
    files.insert(0, sidecar);
    let mut manifest = RunManifest::load_or_default(&ctx.out)?;
    manifest.record(
        &ctx.out,
        name,
        &ctx.config.hash(),
        ctx.config.seed,
        start.elapsed().as_secs_f64(),
        &files,
    )?;
    manifest.write(&ctx.out)?;
    Ok(CommandOutput { files, report })
}

pub fn cmd_acquire(ctx: &Context, n: Option<usize>) -> Result<CommandOutput> {
    stage(ctx, "acquire", |ctx| {
        let c = &ctx.config;
        let n = n.unwrap_or(c.acquisition.samples);
        if n == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        let other = c.other();
        let data = acquire_dataset(&c.arm, other.as_ref(), n, c.seed)?;
        let csv_path = write_file(&ctx.out.join("dataset.csv"), data.to_csv_string())?;
        let meta = DatasetMeta {
            arm: c.arm.clone(),
            seed: c.seed,
            n,
            other,
        };
        let meta_path = write_file(&ctx.out.join("dataset.json"), json(&meta))?;
        let contact = data
            .samples
            .iter()
            .filter(|s| s.snapshot.tactile.iter().any(|&t| t > 0.0))
            .count();
        let seen = data
            .samples
            .iter()
            .filter(|s| s.snapshot.visual_self.is_some())
            .count();
        let report = format!(
            "acquired {n} samples ({seen} with the hand in view, {contact} with contact) -> {}\n",
            csv_path.display()
        );
        Ok((vec![csv_path, meta_path], report))
    })
}

/// Reads a dataset CSV and, when present, its sidecar.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut data = Dataset::read_csv(path)?;
    let meta_path = path.with_extension("json");
    if meta_path.exists() {
        let meta = DatasetMeta::read(&meta_path)?;
        data.seed = meta.seed;
        data.other = meta.other;
    }
    Ok(data)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    samples: usize,
    visual_self_rmse_px: f64,
    tactile_rmse: f64,
    visual_self_lengthscale: f64,
    tactile_lengthscale: f64,
}

fn gp_of(models: &ForwardModelSet, m: Modality) -> Result<&crate::gp_forward::GpSensorModel> {
    match models.require(m)? {
        SensorModel::Gp(g) => Ok(g),
        SensorModel::Identity { .. } => Err(Error::domain(format!("`{m}` has no learned model"))),
    }
}

pub fn cmd_train(ctx: &Context, dataset: Option<&Path>) -> Result<CommandOutput> {
    stage(ctx, "train", |ctx| {
        let path = dataset.map_or_else(|| ctx.out.join("dataset.csv"), Path::to_path_buf);
        let data = load_dataset(&path)?;
        let models = train_forward_models(&data, &ctx.config.training_options(ctx.exec))?;
        let mut files = models.save(&ctx.models_dir())?;
        let v = gp_of(&models, Modality::VisualSelf)?;
        let t = gp_of(&models, Modality::Tactile)?;
        let summary = TrainSummary {
            samples: data.len(),
            visual_self_rmse_px: v.training_rmse(ctx.exec),
            tactile_rmse: t.training_rmse(ctx.exec),
            visual_self_lengthscale: v.gp().params().lengthscale,
            tactile_lengthscale: t.gp().params().lengthscale,
        };
        files.push(write_file(
            &ctx.models_dir().join("train_summary.json"),
            json(&summary),
        )?);
        let report = format!(
            "trained on {} samples\n  visual_self RMSE {:.4} px\n  tactile RMSE {:.4}\n",
            summary.samples, summary.visual_self_rmse_px, summary.tactile_rmse
        );
        Ok((files, report))
    })
}

/// Loads the learned models written by `train`.
pub fn load_models(ctx: &Context) -> Result<ForwardModelSet> {
    ForwardModelSet::load(ctx.exec, &ctx.models_dir())
}

fn labelled(label: &str, e: Error) -> Error {
    match e {
        Error::Domain(m) => Error::Domain(format!("{label}: {m}")),
        Error::Config(m) => Error::Config(format!("{label}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("{label}: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BruteForceCheck {
    pub drift_px: f64,
    pub mu: Vec<f64>,
    /// Largest per-joint gap between the settled mode and the lattice minimum [rad].
    pub max_gap_rad: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionResult {
    #[serde(flatten)]
    pub summary: DriftSummary,
    pub settled_mu: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brute_force: Option<BruteForceCheck>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RhiSummary {
    pub toy: bool,
    pub conditions: Vec<ConditionResult>,
    /// drift_sync > drift_async > drift_none
    pub ordering_holds: bool,
}

/// Lattice distance counted as agreement between descent and brute force [rad].
pub const BRUTE_FORCE_TOLERANCE: f64 = 0.01;

const PLOT_SCRIPT: &str = r#"# Plots end-effector drift along u for each stimulation condition.
import csv
import matplotlib.pyplot as plt

for label in ("sync", "async", "none"):
    with open(f"drift_{label}.csv") as f:
        rows = list(csv.DictReader(f))
    u0 = float(rows[0]["ee_u"])
    plt.plot([int(r["step"]) for r in rows], [float(r["ee_u"]) - u0 for r in rows], label=label)
plt.xlabel("step")
plt.ylabel("drift [px]")
plt.legend()
plt.savefig("drift.png", dpi=120)
"#;

/// Runs every stimulation condition and, optionally, the brute-force check.
pub fn rhi_conditions(
    ctx: &Context,
    models: Option<&ForwardModelSet>,
) -> Result<(Vec<DriftReport>, RhiSummary)> {
    let c = &ctx.config;
    let theta = c.true_theta();
    let results = par::map_slice(
        ctx.exec,
        &Stimulation::ALL,
        |&stim| -> Result<(DriftReport, Option<BruteForceCheck>)> {
            let schedule = c.rhi.schedule.with_stimulation(stim);
            let run = || -> Result<(DriftReport, Option<BruteForceCheck>)> {
                if c.rhi.toy {
                    let r = run_rhi_toy(
                        &schedule,
                        c.rhi.toy_proprio_precision,
                        c.rhi.toy_visual_precision,
                    )?;
                    return Ok((r, None));
                }
                let models = models.ok_or_else(|| Error::domain("learned models are required"))?;
                let brush = c.other().ok_or_else(|| {
                    Error::Config("the rubber-hand run needs acquisition.other (the brush)".into())
                })?;
                let setup = RhiSetup {
                    arm: c.arm.clone(),
                    precisions: c.estimator.precisions.to_map(),
                    brush,
                    precision_mode: c.estimator.precision_mode,
                    tol: c.rhi.tol,
                };
                let report = run_rhi(models, &schedule, &setup, &theta)?;
                let check = if c.rhi.brute_force {
                    let (mu, drift) = equilibrium_by_grid(
                        ctx.exec,
                        models,
                        &schedule,
                        &setup,
                        &theta,
                        c.rhi.brute_force_half_width,
                    )?;
                    let gap = (&mu - report.settled_mu()).amax();
                    Some(BruteForceCheck {
                        drift_px: drift,
                        mu: mu.iter().copied().collect(),
                        max_gap_rad: gap,
                        within_tolerance: gap <= BRUTE_FORCE_TOLERANCE,
                    })
                } else {
                    None
                };
                Ok((report, check))
            };
            run().map_err(|e| labelled(stim.label(), e))
        },
    );
    let mut reports = Vec::new();
    let mut conditions = Vec::new();
    for r in results {
        let (report, brute_force) = r?;
        conditions.push(ConditionResult {
            summary: report.summary(),
            settled_mu: report.settled_mu().iter().copied().collect(),
            brute_force,
        });
        reports.push(report);
    }
    let drift = |s: Stimulation| {
        conditions
            .iter()
            .find(|r| r.summary.condition == s)
            .map(|r| r.summary.drift_px)
    };
    let ordering_holds = match (
        drift(Stimulation::Synchronous),
        drift(Stimulation::Asynchronous),
        drift(Stimulation::None),
    ) {
        (Some(s), Some(a), Some(n)) => s > a && a > n,
        _ => false,
    };
    let summary = RhiSummary {
        toy: c.rhi.toy,
        conditions,
        ordering_holds,
    };
    Ok((reports, summary))
}

pub fn cmd_rhi(ctx: &Context) -> Result<CommandOutput> {
    stage(ctx, "rhi", |ctx| {
        let models = if ctx.config.rhi.toy {
            None
        } else {
            Some(load_models(ctx)?)
        };
        let dir = ctx.out.join("rhi");
        let (reports, summary) = rhi_conditions(ctx, models.as_ref())?;
        let mut files = Vec::new();
        let mut report = String::new();
        for (traj, cond) in reports.iter().zip(&summary.conditions) {
            let stim = cond.summary.condition;
            files.push(write_file(
                &dir.join(format!("drift_{}.csv", stim.label())),
                traj.to_csv_string(),
            )?);
            files.push(write_file(
                &dir.join(format!("drift_{}.json", stim.label())),
                json(cond),
            )?);
            report.push_str(&format!(
                "{:>5}: drift {:8.3} px, converged {}",
                stim.label(),
                cond.summary.drift_px,
                cond.summary.converged
            ));
            if let Some(e) = cond.summary.expected_drift_px {
                report.push_str(&format!(", closed form {e:.6} px"));
            }
            if let Some(b) = &cond.brute_force {
                report.push_str(&format!(
                    ", brute force {:.3} px (gap {:.4} rad)",
                    b.drift_px, b.max_gap_rad
                ));
            }
            report.push('\n');
        }
        report.push_str(&format!(
            "ordering sync > async > none: {}\n",
            summary.ordering_holds
        ));
        files.push(write_file(&dir.join("summary.json"), json(&summary))?);
        files.push(write_file(&dir.join("plot_rhi.py"), PLOT_SCRIPT)?);
        Ok((files, report))
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfDetectSummary {
    pub frames: usize,
    pub inbody_cells: usize,
    pub outbody_cells: usize,
    pub inbody_above_0_9: f64,
    pub outbody_below_0_1: f64,
    pub distractor_below_0_1: f64,
    /// Fraction of cells whose mask entry matches the ground-truth label.
    pub mask_accuracy: f64,
}

/// Generates the labelled scene, runs the grid filter and scores the result.
pub fn selfdetect(
    ctx: &Context,
) -> Result<(
    crate::self_grid::SequenceResult,
    Vec<FrameMetrics>,
    SelfDetectSummary,
)> {
    let c = &ctx.config;
    let scene = synthetic_sequence(&c.arm, &c.true_theta(), &c.grid, &c.scene, c.seed)?;
    let mut metrics = Vec::with_capacity(scene.frames.len());
    let result = run_sequence_observed(ctx.exec, &scene.frames, &scene.motion, &c.grid, |t, g| {
        metrics.push(FrameMetrics::measure(t, g, &scene.inbody))
    })?;
    let p = result.grid.probabilities();
    let frac = |sel: &dyn Fn(usize) -> bool, ok: &dyn Fn(f64) -> bool| {
        let (mut hit, mut total) = (0usize, 0usize);
        for (i, &v) in p.iter().enumerate() {
            if sel(i) {
                total += 1;
                hit += ok(v) as usize;
            }
        }
        if total == 0 {
            f64::NAN
        } else {
            hit as f64 / total as f64
        }
    };
    let inbody_cells = scene.inbody.iter().filter(|&&b| b).count();
    let summary = SelfDetectSummary {
        frames: scene.frames.len(),
        inbody_cells,
        outbody_cells: p.len() - inbody_cells,
        inbody_above_0_9: frac(&|i| scene.inbody[i], &|v| v > 0.9),
        outbody_below_0_1: frac(&|i| !scene.inbody[i], &|v| v < 0.1),
        distractor_below_0_1: frac(&|i| scene.distractor[i], &|v| v < 0.1),
        mask_accuracy: result
            .mask
            .cells
            .iter()
            .zip(&scene.inbody)
            .filter(|(a, b)| a == b)
            .count() as f64
            / p.len() as f64,
    };
    Ok((result, metrics, summary))
}

pub fn cmd_selfdetect(ctx: &Context) -> Result<CommandOutput> {
    stage(ctx, "selfdetect", |ctx| {
        let (result, metrics, summary) = selfdetect(ctx)?;
        let dir = ctx.out.join("selfdetect");
        let files = vec![
            write_file(&dir.join("probability.pgm"), pgm_bytes(&result.grid))?,
            write_file(&dir.join("mask.pbm"), pbm_bytes(&result.mask))?,
            write_file(&dir.join("metrics.csv"), metrics_csv(&metrics))?,
            write_file(&dir.join("summary.json"), json(&summary))?,
        ];
        let report = format!(
            "{} frames: {:.1}% of inbody cells P > 0.9, {:.1}% of outbody cells P < 0.1, mask accuracy {:.1}%\n",
            summary.frames,
            100.0 * summary.inbody_above_0_9,
            100.0 * summary.outbody_below_0_1,
            100.0 * summary.mask_accuracy
        );
        Ok((files, report))
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleReconstruction {
    pub index: usize,
    pub error: f64,
    pub inference_error_rad: f64,
    pub converged: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructSummary {
    pub dropped: Modality,
    pub held_out: usize,
    /// Samples where the dropped reading exists and could be scored.
    pub evaluated: usize,
    pub mean_error: f64,
    pub max_error: f64,
    pub mean_inference_error_rad: f64,
    /// Training RMSE of the dropped modality's model, when it is learned.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_over_training_rmse: Option<f64>,
}

fn reading(sample: &Sample, m: Modality) -> Option<DVector<f64>> {
    observation_from_snapshot(&sample.snapshot).get(m).cloned()
}

/// Infers mu on held-out samples without `drop`, then predicts the dropped reading.
pub fn reconstruct(
    ctx: &Context,
    models: &ForwardModelSet,
    drop: Modality,
) -> Result<(Vec<SampleReconstruction>, ReconstructSummary)> {
    let c = &ctx.config;
    models.require(drop)?;
    let mut precisions = c.estimator.precisions.to_map();
    precisions.remove(drop);
    if precisions.iter().next().is_none() {
        return Err(Error::Config(format!(
            "dropping `{drop}` leaves no enabled modality"
        )));
    }
    let other = c.other();
    let held = acquire_with_rng(
        &c.arm,
        other.as_ref(),
        c.reconstruct.held_out,
        c.seed,
        &mut stage_rng(c.seed, Stage::HeldOut),
    )?;
    let opts = c.estimator.options();
    let nominal = c.true_theta();
    let per_sample = par::map_slice(
        ctx.exec,
        &held.samples,
        |s| -> Result<Option<SampleReconstruction>> {
            let Some(truth) = reading(s, drop) else {
                return Ok(None);
            };
            let mut obs = observation_from_snapshot(&s.snapshot);
            obs.remove(drop);
            let init = if drop == Modality::Proprio {
                nominal.0
            } else {
                s.snapshot.proprio
            };
            let belief = BodyBelief::new(
                DVector::from_column_slice(init.as_slice()),
                precisions.clone(),
            )?;
            let out = infer(&belief, &[obs], models, &opts)?;
            let recon = reconstruct_modality(&out.belief, models, drop)?;
            let inference_error_rad = (0..3)
                .map(|j| (out.belief.mu[j] - s.theta.0[j]).powi(2))
                .sum::<f64>()
                .sqrt();
            Ok(Some(SampleReconstruction {
                index: s.snapshot.timestamp as usize,
                error: (recon - truth).norm(),
                inference_error_rad,
                converged: out.converged,
                steps: out.steps,
            }))
        },
    );
    let mut rows = Vec::new();
    for r in per_sample {
        if let Some(row) = r? {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(Error::domain(format!(
            "no held-out sample has a `{drop}` reading"
        )));
    }
    let n = rows.len() as f64;
    let mean_error = rows.iter().map(|r| r.error).sum::<f64>() / n;
    let training_rmse = match models.require(drop)? {
        SensorModel::Gp(g) => Some(g.training_rmse(ctx.exec)),
        SensorModel::Identity { .. } => None,
    };
    let summary = ReconstructSummary {
        dropped: drop,
        held_out: held.len(),
        evaluated: rows.len(),
        mean_error,
        max_error: rows.iter().map(|r| r.error).fold(0.0, f64::max),
        mean_inference_error_rad: rows.iter().map(|r| r.inference_error_rad).sum::<f64>() / n,
        training_rmse,
        error_over_training_rmse: training_rmse.map(|t| mean_error / t),
    };
    Ok((rows, summary))
}

pub fn cmd_reconstruct(ctx: &Context, drop: Option<Modality>) -> Result<CommandOutput> {
    stage(ctx, "reconstruct", |ctx| {
        let drop = drop.unwrap_or(ctx.config.reconstruct.drop);
        let models = load_models(ctx)?;
        let (rows, summary) = reconstruct(ctx, &models, drop)?;
        let dir = ctx.out.join("reconstruct");
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r).expect("in-memory write");
        }
        let csv_bytes = w.into_inner().expect("flush");
        let files = vec![
            write_file(
                &dir.join(format!("reconstruct_{}.csv", drop.name())),
                csv_bytes,
            )?,
            write_file(
                &dir.join(format!("reconstruct_{}.json", drop.name())),
                json(&summary),
            )?,
        ];
        let mut report = format!(
            "dropped {drop}: mean error {:.4} over {} held-out samples (max {:.4}), mean |mu - theta| {:.5} rad\n",
            summary.mean_error, summary.evaluated, summary.max_error, summary.mean_inference_error_rad
        );
        if let (Some(t), Some(r)) = (summary.training_rmse, summary.error_over_training_rmse) {
            report.push_str(&format!("  training RMSE {t:.4}, ratio {r:.3}\n"));
        }
        Ok((files, report))
    })
}

pub fn cmd_config(ctx: &Context) -> Result<CommandOutput> {
    stage(ctx, "config", |ctx| Ok((Vec::new(), ctx.config.to_json())))
}
