//! Exact GP regression with a squared-exponential kernel.
//!
//! All output columns share one kernel and one Cholesky factor; each column
//! gets its own dual weight vector.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            lengthscale: 0.5,
            signal_variance: 1.0,
            noise_variance: 1e-4,
        }
    }
}

impl KernelParams {
    pub fn new(lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Self {
        KernelParams {
            lengthscale,
            signal_variance,
            noise_variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(Error::Config(format!(
                "lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::Config(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config(format!(
                "noise variance must be non-negative, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    /// k(a, b) = sf2 * exp(-|a - b|^2 / (2 l^2))
    #[inline]
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_variance * (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    /// Row-major copy of the training inputs for cache-friendly kernel rows.
    rows: Vec<f64>,
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    params: KernelParams,
    jitter: f64,
    chol: DMatrix<f64>,
    alpha: DMatrix<f64>,
}

impl GpModel {
    pub fn fit(x: DMatrix<f64>, y: DMatrix<f64>, params: KernelParams) -> Result<GpModel> {
        Self::fit_with(Exec::default(), x, y, params)
    }

    pub fn fit_with(
        exec: Exec,
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        params: KernelParams,
    ) -> Result<GpModel> {
        params.validate()?;
        let (n, d) = x.shape();
        if n == 0 || d == 0 {
            return Err(Error::domain(
                "GP needs at least one training row and one input dimension",
            ));
        }
        if y.nrows() != n {
            return Err(Error::domain(format!(
                "{n} input rows but {} output rows",
                y.nrows()
            )));
        }
        if y.ncols() == 0 {
            return Err(Error::domain("GP needs at least one output column"));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("training data contains non-finite values"));
        }

        let rows: Vec<f64> = (0..n)
            .flat_map(|i| x.row(i).iter().copied().collect::<Vec<_>>())
            .collect();
        let gram_rows = par::map_range(exec, n, |i| {
            let xi = &rows[i * d..(i + 1) * d];
            (0..n)
                .map(|j| params.kernel(xi, &rows[j * d..(j + 1) * d]))
                .collect::<Vec<f64>>()
        });
        let gram = DMatrix::from_fn(n, n, |i, j| gram_rows[i][j]);

        let mut jitter = JITTER_START;
        let chol = loop {
            let mut a = gram.clone();
            for i in 0..n {
                a[(i, i)] += params.noise_variance + jitter;
            }
            if let Some(c) = Cholesky::<f64, Dyn>::new(a) {
                break c;
            }
            if jitter >= JITTER_MAX {
                return Err(Error::Factorization { jitter });
            }
            jitter = (jitter * 10.0).min(JITTER_MAX);
        };
        let alpha = chol.solve(&y);

        Ok(GpModel {
            rows,
            x,
            y,
            params,
            jitter,
            chol: chol.unpack(),
            alpha,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// Jitter that was added to the diagonal to make the factorization succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular factor of K + (noise + jitter) I.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.ncols()
    }

    fn row(&self, i: usize) -> &[f64] {
        let d = self.input_dim();
        &self.rows[i * d..(i + 1) * d]
    }

    /// k(X, mu) as a column.
    pub fn kernel_column(&self, mu: &[f64]) -> DVector<f64> {
        assert_eq!(mu.len(), self.input_dim(), "query dimension mismatch");
        DVector::from_fn(self.n(), |i, _| self.params.kernel(self.row(i), mu))
    }

    pub fn predict_mean(&self, mu: &[f64]) -> DVector<f64> {
        let k = self.kernel_column(mu);
        self.alpha.tr_mul(&k)
    }

    /// Latent predictive variance, one (identical) entry per output column.
    pub fn predict_variance(&self, mu: &[f64]) -> DVector<f64> {
        let v = self.latent_variance(mu);
        DVector::from_element(self.output_dim(), v)
    }

    pub fn latent_variance(&self, mu: &[f64]) -> f64 {
        let k = self.kernel_column(mu);
        let v = self
            .chol
            .solve_lower_triangular(&k)
            .expect("cholesky factor has a positive diagonal");
        (self.params.signal_variance - v.norm_squared()).max(0.0)
    }

    /// Jacobian of the predictive mean, `output_dim x input_dim`.
    pub fn predict_gradient(&self, mu: &[f64]) -> DMatrix<f64> {
        let (m, d) = (self.output_dim(), self.input_dim());
        let inv_l2 = 1.0 / (self.params.lengthscale * self.params.lengthscale);
        let mut jac = DMatrix::zeros(m, d);
        for i in 0..self.n() {
            let xi = self.row(i);
            let k = self.params.kernel(xi, mu);
            if k == 0.0 {
                continue;
            }
            for a in 0..d {
                let dk = -(mu[a] - xi[a]) * inv_l2 * k;
                for j in 0..m {
                    jac[(j, a)] += self.alpha[(i, j)] * dk;
                }
            }
        }
        jac
    }

    pub fn predict_mean_batch(&self, exec: Exec, queries: &[DVector<f64>]) -> Vec<DVector<f64>> {
        par::map_slice(exec, queries, |q| self.predict_mean(q.as_slice()))
    }

    /// log p(Y | X) summed over the independent output columns.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let (n, m) = (self.n() as f64, self.output_dim() as f64);
        let data_fit = self.y.component_mul(&self.alpha).sum();
        let log_det: f64 = self.chol.diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * data_fit - m * log_det - 0.5 * n * m * (2.0 * PI).ln()
    }
}

/// Refits over a set of lengthscales and keeps the one with the highest
/// log marginal likelihood. Ties keep the earlier candidate.
pub fn select_lengthscale(
    exec: Exec,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    base: KernelParams,
    lengthscales: &[f64],
) -> Result<GpModel> {
    if lengthscales.is_empty() {
        return GpModel::fit_with(exec, x.clone(), y.clone(), base);
    }
    let mut best: Option<(f64, GpModel)> = None;
    for &l in lengthscales {
        let model = GpModel::fit_with(
            exec,
            x.clone(),
            y.clone(),
            KernelParams {
                lengthscale: l,
                ..base
            },
        )?;
        let lml = model.log_marginal_likelihood();
        if best.as_ref().is_none_or(|(b, _)| lml > *b) {
            best = Some((lml, model));
        }
    }
    Ok(best.expect("non-empty candidate list").1)
}

/// `count` log-spaced values over `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}
