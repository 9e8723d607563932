use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::gp::{select_lengthscale, GpModel, KernelParams};
use crate::arm_sim::Dataset;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Proprio,
    VisualSelf,
    Tactile,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Proprio, Modality::VisualSelf, Modality::Tactile];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Proprio => "proprio",
            Modality::VisualSelf => "visual_self",
            Modality::Tactile => "tactile",
        }
    }

    pub fn model_file_name(self) -> String {
        format!("model_{}.json", self.name())
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proprio" => Ok(Modality::Proprio),
            "visual" | "visual_self" => Ok(Modality::VisualSelf),
            "tactile" => Ok(Modality::Tactile),
            other => Err(Error::domain(format!(
                "unknown modality `{other}` (expected proprio, visual or tactile)"
            ))),
        }
    }
}

/// One optional slot per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMap<T>([Option<T>; 3]);

impl<T> Default for ModalityMap<T> {
    fn default() -> Self {
        ModalityMap([None, None, None])
    }
}

impl<T> ModalityMap<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, m: Modality, value: T) -> Self {
        self.insert(m, value);
        self
    }

    pub fn insert(&mut self, m: Modality, value: T) -> Option<T> {
        self.0[m.index()].replace(value)
    }

    pub fn remove(&mut self, m: Modality) -> Option<T> {
        self.0[m.index()].take()
    }

    pub fn get(&self, m: Modality) -> Option<&T> {
        self.0[m.index()].as_ref()
    }

    pub fn get_mut(&mut self, m: Modality) -> Option<&mut T> {
        self.0[m.index()].as_mut()
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0[m.index()].is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &T)> {
        Modality::ALL
            .into_iter()
            .filter_map(|m| self.get(m).map(|v| (m, v)))
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &T) -> U) -> ModalityMap<U> {
        let mut out = ModalityMap::new();
        for (m, v) in self.iter() {
            out.insert(m, f(m, v));
        }
        out
    }
}

/// How recorded targets are encoded before regression and decoded after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutputTransform {
    Linear,
    /// Binary targets become logits `(2y - 1) * A`; predictions are squashed
    /// back into `[0, 1]` with the logistic function.
    Logistic {
        logit_amplitude: f64,
    },
}

impl OutputTransform {
    fn encode(&self, y: f64) -> f64 {
        match *self {
            OutputTransform::Linear => y,
            OutputTransform::Logistic { logit_amplitude } => (2.0 * y - 1.0) * logit_amplitude,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// A GP forward model with per-column output standardization.
#[derive(Debug, Clone)]
pub struct GpSensorModel {
    modality: Modality,
    transform: OutputTransform,
    raw_y: DMatrix<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    gp: GpModel,
}

impl GpSensorModel {
    pub fn train(
        exec: Exec,
        modality: Modality,
        x: DMatrix<f64>,
        raw_y: DMatrix<f64>,
        params: KernelParams,
        transform: OutputTransform,
        lengthscale_grid: &[f64],
    ) -> Result<GpSensorModel> {
        if let OutputTransform::Logistic { logit_amplitude } = transform {
            if !(logit_amplitude > 0.0 && logit_amplitude.is_finite()) {
                return Err(Error::Config(format!(
                    "logit amplitude must be positive, got {logit_amplitude}"
                )));
            }
        }
        let encoded = raw_y.map(|v| transform.encode(v));
        let (mean, scale) = column_stats(&encoded);
        let z = standardize(&encoded, &mean, &scale);
        let gp = select_lengthscale(exec, &x, &z, params, lengthscale_grid)?;
        Ok(GpSensorModel {
            modality,
            transform,
            raw_y,
            mean,
            scale,
            gp,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn transform(&self) -> OutputTransform {
        self.transform
    }

    pub fn gp(&self) -> &GpModel {
        &self.gp
    }

    pub fn standardization(&self) -> (&[f64], &[f64]) {
        (&self.mean, &self.scale)
    }

    fn latent(&self, mu: &[f64]) -> DVector<f64> {
        let z = self.gp.predict_mean(mu);
        DVector::from_fn(z.len(), |j, _| z[j] * self.scale[j] + self.mean[j])
    }

    pub fn predict(&self, mu: &[f64]) -> DVector<f64> {
        let z = self.latent(mu);
        match self.transform {
            OutputTransform::Linear => z,
            OutputTransform::Logistic { .. } => z.map(sigmoid),
        }
    }

    pub fn jacobian(&self, mu: &[f64]) -> DMatrix<f64> {
        let mut j = self.gp.predict_gradient(mu);
        let squash = match self.transform {
            OutputTransform::Linear => None,
            OutputTransform::Logistic { .. } => Some(self.latent(mu)),
        };
        for r in 0..j.nrows() {
            let mut factor = self.scale[r];
            if let Some(z) = &squash {
                let s = sigmoid(z[r]);
                factor *= s * (1.0 - s);
            }
            j.row_mut(r).scale_mut(factor);
        }
        j
    }

    /// sigma_n^2 / (sigma_n^2 + latent variance at mu), in (0, 1].
    ///
    /// Output scaling cancels in the ratio, so it is the same for every
    /// output column and for linear and logistic outputs alike.
    pub fn confidence(&self, mu: &[f64]) -> f64 {
        let noise = self.gp.params().noise_variance.max(f64::MIN_POSITIVE);
        noise / (noise + self.gp.latent_variance(mu))
    }

    /// Root-mean-square residual over every training row and output column,
    /// in output units.
    pub fn training_rmse(&self, exec: Exec) -> f64 {
        let x = self.gp.x();
        let preds = par::map_range(exec, x.nrows(), |i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            self.predict(&row)
        });
        let mut sum = 0.0;
        for (i, p) in preds.iter().enumerate() {
            for j in 0..p.len() {
                sum += (p[j] - self.raw_y[(i, j)]).powi(2);
            }
        }
        (sum / self.raw_y.len() as f64).sqrt()
    }

    pub fn to_file(&self) -> ModelFile {
        let rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        ModelFile {
            modality: self.modality,
            transform: self.transform,
            params: *self.gp.params(),
            standardization: Standardization {
                mean: self.mean.clone(),
                scale: self.scale.clone(),
            },
            x: rows(self.gp.x()),
            y: rows(&self.raw_y),
        }
    }

    /// Rebuilds the factorization from the persisted training data.
    pub fn from_file(exec: Exec, file: ModelFile) -> Result<GpSensorModel> {
        let to_matrix = |rows: &[Vec<f64>], what: &str| -> Result<DMatrix<f64>> {
            let cols = rows.first().map_or(0, Vec::len);
            if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
                return Err(Error::Config(format!(
                    "model `{}`: ragged or empty {what}",
                    file.modality
                )));
            }
            Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
        };
        let x = to_matrix(&file.x, "X")?;
        let raw_y = to_matrix(&file.y, "Y")?;
        let Standardization { mean, scale } = file.standardization;
        if mean.len() != raw_y.ncols()
            || scale.len() != raw_y.ncols()
            || scale.iter().any(|s| !(*s > 0.0))
        {
            return Err(Error::Config(format!(
                "model `{}`: bad standardization constants",
                file.modality
            )));
        }
        let z = standardize(&raw_y.map(|v| file.transform.encode(v)), &mean, &scale);
        let gp = GpModel::fit_with(exec, x, z, file.params)?;
        Ok(GpSensorModel {
            modality: file.modality,
            transform: file.transform,
            raw_y,
            mean,
            scale,
            gp,
        })
    }
}

fn column_stats(y: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = y.nrows() as f64;
    let mut mean = Vec::with_capacity(y.ncols());
    let mut scale = Vec::with_capacity(y.ncols());
    for col in y.column_iter() {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push(m);
        scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    (mean, scale)
}

fn standardize(y: &DMatrix<f64>, mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
        (y[(i, j)] - mean[j]) / scale[j]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

/// On-disk model: training data plus constants; factors are recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub modality: Modality,
    pub transform: OutputTransform,
    pub params: KernelParams,
    pub standardization: Standardization,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum SensorModel {
    /// g(mu) = mu.
    Identity {
        dim: usize,
    },
    Gp(GpSensorModel),
}

impl SensorModel {
    pub fn input_dim(&self) -> usize {
        match self {
            SensorModel::Identity { dim } => *dim,
            SensorModel::Gp(m) => m.gp.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            SensorModel::Identity { dim } => *dim,
            SensorModel::Gp(m) => m.gp.output_dim(),
        }
    }

    pub fn predict(&self, mu: &[f64]) -> DVector<f64> {
        match self {
            SensorModel::Identity { .. } => DVector::from_column_slice(mu),
            SensorModel::Gp(m) => m.predict(mu),
        }
    }

    pub fn jacobian(&self, mu: &[f64]) -> DMatrix<f64> {
        match self {
            SensorModel::Identity { dim } => DMatrix::identity(*dim, *dim),
            SensorModel::Gp(m) => m.jacobian(mu),
        }
    }

    /// Precision multiplier in the predictive-variance mode; 1 for exact maps.
    pub fn confidence(&self, mu: &[f64]) -> f64 {
        match self {
            SensorModel::Identity { .. } => 1.0,
            SensorModel::Gp(m) => m.confidence(mu),
        }
    }
}

/// Forward models for every modality, sharing one latent dimension.
#[derive(Debug, Clone)]
pub struct ForwardModelSet {
    models: ModalityMap<SensorModel>,
    dim: usize,
}

impl ForwardModelSet {
    pub fn new(models: ModalityMap<SensorModel>) -> Result<ForwardModelSet> {
        let dims: Vec<usize> = models.iter().map(|(_, m)| m.input_dim()).collect();
        let dim = *dims
            .first()
            .ok_or_else(|| Error::domain("model set is empty"))?;
        if dims.iter().any(|&d| d != dim) {
            return Err(Error::domain(
                "forward models disagree on the latent dimension",
            ));
        }
        Ok(ForwardModelSet { models, dim })
    }

    /// Identity maps for proprio and vision in a shared `dim`-dimensional space.
    pub fn identity_toy(dim: usize) -> ForwardModelSet {
        ForwardModelSet {
            models: ModalityMap::new()
                .with(Modality::Proprio, SensorModel::Identity { dim })
                .with(Modality::VisualSelf, SensorModel::Identity { dim }),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, m: Modality) -> Option<&SensorModel> {
        self.models.get(m)
    }

    pub fn require(&self, m: Modality) -> Result<&SensorModel> {
        self.get(m)
            .ok_or_else(|| Error::domain(format!("no forward model for modality `{m}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &SensorModel)> {
        self.models.iter()
    }

    /// Writes `model_<modality>.json` for each GP model; returns the paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (m, model) in self.iter() {
            if let SensorModel::Gp(gp) = model {
                let path = dir.join(m.model_file_name());
                let text = serde_json::to_string_pretty(&gp.to_file())
                    .map_err(|e| Error::Numerical(format!("cannot serialize model `{m}`: {e}")))?;
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
        }
        Ok(written)
    }

    /// Loads the visual and tactile models from `dir`; proprio is the identity.
    pub fn load(exec: Exec, dir: &Path) -> Result<ForwardModelSet> {
        let mut models = ModalityMap::new();
        for m in [Modality::VisualSelf, Modality::Tactile] {
            let path = dir.join(m.model_file_name());
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                message: e.to_string(),
            })?;
            if file.modality != m {
                return Err(Error::Parse {
                    path,
                    message: format!("file holds modality `{}`", file.modality),
                });
            }
            models.insert(m, SensorModel::Gp(GpSensorModel::from_file(exec, file)?));
        }
        let dim = models
            .get(Modality::VisualSelf)
            .map_or(3, SensorModel::input_dim);
        models.insert(Modality::Proprio, SensorModel::Identity { dim });
        ForwardModelSet::new(models)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOptions {
    pub visual: KernelParams,
    pub tactile: KernelParams,
    pub logit_amplitude: f64,
    /// Candidate lengthscales for marginal-likelihood selection; empty keeps
    /// the configured values.
    pub lengthscale_grid: Vec<f64>,
    pub exec: Exec,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        TrainingOptions {
            visual: KernelParams::default(),
            tactile: KernelParams::default(),
            logit_amplitude: 7.0,
            lengthscale_grid: Vec::new(),
            exec: Exec::default(),
        }
    }
}

/// Fits the visual and tactile GPs on a dataset; proprio is the identity.
pub fn train_forward_models(data: &Dataset, opts: &TrainingOptions) -> Result<ForwardModelSet> {
    let (xv, yv) = data.visual_pairs();
    if xv.nrows() == 0 {
        return Err(Error::domain("dataset has no in-frame visual readings"));
    }
    let visual = GpSensorModel::train(
        opts.exec,
        Modality::VisualSelf,
        xv,
        yv,
        opts.visual,
        OutputTransform::Linear,
        &opts.lengthscale_grid,
    )?;
    let (xt, yt) = data.tactile_pairs();
    let tactile = GpSensorModel::train(
        opts.exec,
        Modality::Tactile,
        xt,
        yt,
        opts.tactile,
        OutputTransform::Logistic {
            logit_amplitude: opts.logit_amplitude,
        },
        &opts.lengthscale_grid,
    )?;
    ForwardModelSet::new(
        ModalityMap::new()
            .with(Modality::Proprio, SensorModel::Identity { dim: 3 })
            .with(Modality::VisualSelf, SensorModel::Gp(visual))
            .with(Modality::Tactile, SensorModel::Gp(tactile)),
    )
}
