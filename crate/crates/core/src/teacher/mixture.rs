use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::schedule::Schedule;

/// Analytic Gaussian mixture standing in for the data distribution.
///
/// Under the variance-preserving forward kernel every component stays
/// Gaussian: mean `sqrt(abar) mu_k`, covariance `abar Sigma_k + (1 - abar) I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureFile", into = "MixtureFile")]
pub struct MixtureSpec {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariance: Covariance,
}

#[derive(Debug, Clone, PartialEq)]
enum Covariance {
    Diagonal(Vec<Vec<f64>>),
    Full(Vec<DMatrix<f64>>),
}

/// On-disk form: diagonal covariances by default, full matrices for `d <= 4`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureFile {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cov_diagonals: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    covariances: Option<Vec<Vec<Vec<f64>>>>,
}

impl TryFrom<MixtureFile> for MixtureSpec {
    type Error = Error;

    fn try_from(f: MixtureFile) -> Result<Self> {
        match (f.cov_diagonals, f.covariances) {
            (Some(d), None) => MixtureSpec::diagonal(f.weights, f.means, d),
            (None, Some(c)) => MixtureSpec::full(f.weights, f.means, c),
            _ => Err(Error::config(
                "mixture",
                "exactly one of cov_diagonals or covariances is required",
            )),
        }
    }
}

impl From<MixtureSpec> for MixtureFile {
    fn from(m: MixtureSpec) -> Self {
        let (cov_diagonals, covariances) = match m.covariance {
            Covariance::Diagonal(d) => (Some(d), None),
            Covariance::Full(c) => (
                None,
                Some(
                    c.iter()
                        .map(|s| (0..s.nrows()).map(|i| s.row(i).iter().copied().collect()).collect())
                        .collect(),
                ),
            ),
        };
        MixtureFile {
            weights: m.weights,
            means: m.means,
            cov_diagonals,
            covariances,
        }
    }
}

fn check_weights_means(weights: &[f64], means: &[Vec<f64>]) -> Result<usize> {
    if weights.is_empty() {
        return Err(Error::config("mixture.weights", "at least one component required"));
    }
    check_len("mixture means", weights.len(), means.len())?;
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::config("mixture.weights", "weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::config(
            "mixture.weights",
            format!("weights sum to {total}, expected 1 within 1e-12"),
        ));
    }
    let d = means[0].len();
    if d == 0 || means.iter().any(|m| m.len() != d) {
        return Err(Error::config("mixture.means", "means must share a positive dimension"));
    }
    Ok(d)
}

impl MixtureSpec {
    pub fn diagonal(weights: Vec<f64>, means: Vec<Vec<f64>>, cov_diagonals: Vec<Vec<f64>>) -> Result<Self> {
        let d = check_weights_means(&weights, &means)?;
        check_len("mixture covariance count", weights.len(), cov_diagonals.len())?;
        for diag in &cov_diagonals {
            check_len("mixture covariance diagonal", d, diag.len())?;
            if diag.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::config("mixture.cov_diagonals", "variances must be positive"));
            }
        }
        Ok(Self {
            weights,
            means,
            covariance: Covariance::Diagonal(cov_diagonals),
        })
    }

    pub fn full(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let d = check_weights_means(&weights, &means)?;
        if d > 4 {
            return Err(Error::config(
                "mixture.covariances",
                format!("full covariances are supported only for d <= 4, got d = {d}"),
            ));
        }
        check_len("mixture covariance count", weights.len(), covariances.len())?;
        let mut mats = Vec::with_capacity(covariances.len());
        for c in &covariances {
            check_len("mixture covariance rows", d, c.len())?;
            let mut m = DMatrix::zeros(d, d);
            for (i, row) in c.iter().enumerate() {
                check_len("mixture covariance cols", d, row.len())?;
                for (j, v) in row.iter().enumerate() {
                    m[(i, j)] = *v;
                }
            }
            if (&m - m.transpose()).abs().max() > 1e-12 {
                return Err(Error::config("mixture.covariances", "covariance must be symmetric"));
            }
            if m.clone().symmetric_eigenvalues().iter().any(|&e| e <= 0.0) {
                return Err(Error::config("mixture.covariances", "covariance must be positive definite"));
            }
            mats.push(m);
        }
        Ok(Self {
            weights,
            means,
            covariance: Covariance::Full(mats),
        })
    }

    /// Isotropic single Gaussian `N(mean, var I)`.
    pub fn gaussian(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::diagonal(vec![1.0], vec![mean], vec![vec![var; d]])
    }

    /// `modes` isotropic components evenly spaced on a circle in 2D.
    pub fn ring(modes: usize, radius: f64, sigma: f64, weights: Option<Vec<f64>>) -> Result<Self> {
        let weights = weights.unwrap_or_else(|| vec![1.0 / modes as f64; modes]);
        let means = (0..modes)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / modes as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::diagonal(weights, means, vec![vec![sigma * sigma; 2]; modes])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Data-space covariance of component `k` as a dense matrix.
    pub fn covariance_matrix(&self, k: usize) -> DMatrix<f64> {
        match &self.covariance {
            Covariance::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_vec(d[k].clone())),
            Covariance::Full(c) => c[k].clone(),
        }
    }

    /// The single-component mixture for component `k`.
    pub fn component(&self, k: usize) -> MixtureSpec {
        let covariance = match &self.covariance {
            Covariance::Diagonal(d) => Covariance::Diagonal(vec![d[k].clone()]),
            Covariance::Full(c) => Covariance::Full(vec![c[k].clone()]),
        };
        MixtureSpec {
            weights: vec![1.0],
            means: vec![self.means[k].clone()],
            covariance,
        }
    }

    /// Per-component log joint `log w_k + log N_k(x)` and the Gaussian score
    /// of each component, for the marginal with signal scale `a` and added
    /// isotropic variance `s2`.
    fn component_terms(&self, x: &[f64], a: f64, s2: f64) -> Vec<(f64, Vec<f64>)> {
        let d = self.dim();
        let a2 = a * a;
        (0..self.num_components())
            .map(|k| {
                let mu = &self.means[k];
                let diff: Vec<f64> = x.iter().zip(mu).map(|(x, m)| x - a * m).collect();
                let lw = self.weights[k].ln();
                match &self.covariance {
                    Covariance::Diagonal(var) => {
                        let mut quad = 0.0;
                        let mut logdet = 0.0;
                        let mut grad = Vec::with_capacity(d);
                        for j in 0..d {
                            let v = a2 * var[k][j] + s2;
                            quad += diff[j] * diff[j] / v;
                            logdet += v.ln();
                            grad.push(-diff[j] / v);
                        }
                        let lp = lw - 0.5 * (d as f64 * (2.0 * PI).ln() + logdet + quad);
                        (lp, grad)
                    }
                    Covariance::Full(cov) => {
                        let c = cov[k].scale(a2) + DMatrix::identity(d, d) * s2;
                        let chol = c.cholesky().expect("noised covariance is SPD");
                        let dv = DVector::from_vec(diff);
                        let sol = chol.solve(&dv);
                        let quad = dv.dot(&sol);
                        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                        let lp = lw - 0.5 * (d as f64 * (2.0 * PI).ln() + logdet + quad);
                        (lp, sol.iter().map(|v| -v).collect())
                    }
                }
            })
            .collect()
    }

    fn marginal_params(t: usize, sched: &Schedule) -> (f64, f64) {
        (sched.sqrt_alpha_bar(t), 1.0 - sched.alpha_bar(t))
    }

    /// `log p_t(x)` of the noised mixture, via max-shifted log-sum-exp.
    pub fn noisy_log_density(&self, x: &[f64], t: usize, sched: &Schedule) -> f64 {
        let (a, s2) = Self::marginal_params(t, sched);
        self.log_density_scaled(x, a, s2)
    }

    /// Log density of the data distribution itself (`t = 0`).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_scaled(x, 1.0, 0.0)
    }

    fn log_density_scaled(&self, x: &[f64], a: f64, s2: f64) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let terms = self.component_terms(x, a, s2);
        let max = terms.iter().map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|(l, _)| (l - max).exp()).sum::<f64>().ln()
    }

    /// Exact `grad_x log p_t(x)`: responsibility-weighted component scores.
    pub fn analytic_score(&self, x: &[f64], t: usize, sched: &Schedule) -> Vec<f64> {
        let (a, s2) = Self::marginal_params(t, sched);
        self.score_scaled(x, a, s2)
    }

    fn score_scaled(&self, x: &[f64], a: f64, s2: f64) -> Vec<f64> {
        let terms = self.component_terms(x, a, s2);
        let max = terms.iter().map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = terms.iter().map(|(l, _)| (l - max).exp()).collect();
        let z: f64 = resp.iter().sum();
        let mut out = vec![0.0; self.dim()];
        for (r, (_, g)) in resp.iter().zip(&terms) {
            for (o, gj) in out.iter_mut().zip(g) {
                *o += r / z * gj;
            }
        }
        out
    }

    /// Posterior responsibilities `gamma_k(x)` under the noised marginal.
    pub fn responsibilities(&self, x: &[f64], t: usize, sched: &Schedule) -> Vec<f64> {
        let (a, s2) = Self::marginal_params(t, sched);
        let terms = self.component_terms(x, a, s2);
        let max = terms.iter().map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = terms.iter().map(|(l, _)| (l - max).exp()).collect();
        let z: f64 = resp.iter().sum();
        resp.into_iter().map(|r| r / z).collect()
    }

    pub fn analytic_score_batch(&self, xs: ArrayView2<f64>, ts: &[usize], sched: &Schedule) -> Array2<f64> {
        let mut out = Array2::zeros(xs.dim());
        for (i, (row, &t)) in xs.rows().into_iter().zip(ts).enumerate() {
            let x: Vec<f64> = row.to_vec();
            for (j, v) in self.analytic_score(&x, t, sched).into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }

    pub fn noisy_log_density_batch(&self, xs: ArrayView2<f64>, ts: &[usize], sched: &Schedule) -> Vec<f64> {
        xs.rows()
            .into_iter()
            .zip(ts)
            .map(|(r, &t)| self.noisy_log_density(&r.to_vec(), t, sched))
            .collect()
    }

    /// Draw `n` samples; returns the points and their component labels.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
        let d = self.dim();
        let pick = WeightedIndex::new(&self.weights).expect("valid mixture weights");
        let chols: Option<Vec<DMatrix<f64>>> = match &self.covariance {
            Covariance::Full(c) => Some(
                c.iter()
                    .map(|m| m.clone().cholesky().expect("SPD").l())
                    .collect(),
            ),
            Covariance::Diagonal(_) => None,
        };
        let mut out = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let k = pick.sample(rng);
            labels.push(k);
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            match (&self.covariance, &chols) {
                (Covariance::Diagonal(var), _) => {
                    for j in 0..d {
                        out[[i, j]] = self.means[k][j] + var[k][j].sqrt() * z[j];
                    }
                }
                (Covariance::Full(_), Some(ls)) => {
                    let zz = &ls[k] * DVector::from_vec(z);
                    for j in 0..d {
                        out[[i, j]] = self.means[k][j] + zz[j];
                    }
                }
                _ => unreachable!(),
            }
        }
        (out, labels)
    }

    /// Squared Mahalanobis distance of `x` to component `k` in data space.
    pub fn mahalanobis_sq(&self, x: &[f64], k: usize) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.means[k]).map(|(a, b)| a - b).collect();
        match &self.covariance {
            Covariance::Diagonal(var) => diff.iter().zip(&var[k]).map(|(d, v)| d * d / v).sum(),
            Covariance::Full(c) => {
                let dv = DVector::from_vec(diff);
                let sol = c[k].clone().cholesky().expect("SPD").solve(&dv);
                dv.dot(&sol)
            }
        }
    }
}

/// One-hot condition rows for component labels.
pub fn one_hot(labels: &[usize], k: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = 1.0;
    }
    out
}
