//! Discrete variance-preserving noise schedule and prediction-target
//! conversions.
//!
//! `alphas_bar[t]` is the cumulative signal retention at step `t`, with
//! `alphas_bar[0] = 1`. The forward map is
//! `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Betas linear in `t`; endpoints are rescaled by `1000 / T` so the
    /// terminal retention stays small for short chains.
    LinearBeta,
    /// Squared-cosine cumulative retention with offset `0.008`.
    Cosine,
}

/// Serializable description of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub num_steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    0.02
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearBeta,
            num_steps: 1000,
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
        }
    }
}

const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    config: ScheduleConfig,
    alphas_bar: Vec<f64>,
    sqrt_alphas_bar: Vec<f64>,
    sigmas: Vec<f64>,
}

impl Schedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let t_max = config.num_steps;
        if t_max < 2 {
            return Err(Error::Schedule(format!("T must be at least 2, got {t_max}")));
        }
        let betas: Vec<f64> = match config.kind {
            ScheduleKind::LinearBeta => {
                if !(config.beta_start > 0.0 && config.beta_end >= config.beta_start) {
                    return Err(Error::Schedule(format!(
                        "beta endpoints must satisfy 0 < start <= end, got {} and {}",
                        config.beta_start, config.beta_end
                    )));
                }
                let scale = 1000.0 / t_max as f64;
                let (b0, b1) = (config.beta_start * scale, config.beta_end * scale);
                (0..t_max)
                    .map(|i| {
                        let frac = i as f64 / (t_max - 1) as f64;
                        (b0 + frac * (b1 - b0)).min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let u = (t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    u.cos().powi(2)
                };
                (1..=t_max)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, MAX_BETA))
                    .collect()
            }
        };

        let mut alphas_bar = Vec::with_capacity(t_max + 1);
        alphas_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        let last = alphas_bar[t_max];
        if !(last < 1e-3) {
            return Err(Error::Schedule(format!(
                "terminal retention {last:.3e} is not below 1e-3; widen the beta range"
            )));
        }
        if alphas_bar.windows(2).any(|w| !(w[1] < w[0])) || last <= 0.0 {
            return Err(Error::Schedule("retention must be strictly decreasing and positive".into()));
        }
        let sqrt_alphas_bar = alphas_bar.iter().map(|a| a.sqrt()).collect();
        let sigmas = alphas_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            config,
            alphas_bar,
            sqrt_alphas_bar,
            sigmas,
        })
    }

    pub fn linear(num_steps: usize) -> Result<Self> {
        Self::new(ScheduleConfig {
            num_steps,
            ..ScheduleConfig::default()
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// `T`, the largest valid timestep.
    pub fn num_steps(&self) -> usize {
        self.config.num_steps
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_alphas_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [0, {}]",
                self.num_steps()
            )));
        }
        Ok(())
    }
}

/// A noised point together with the draw that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

pub fn add_noise(x0: &[f64], eps: &[f64], t: usize, sched: &Schedule) -> Result<NoisySample> {
    check_len("add_noise eps", x0.len(), eps.len())?;
    sched.check_t(t)?;
    let (a, s) = (sched.sqrt_alpha_bar(t), sched.sigma(t));
    let x = x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect();
    Ok(NoisySample {
        x,
        t,
        eps: eps.to_vec(),
    })
}

/// Clean-sample estimate from a velocity prediction:
/// `x0 = sqrt(abar) x_t - sqrt(1 - abar) v`.
pub fn v_to_x0(x_t: &[f64], v: &[f64], t: usize, sched: &Schedule) -> Result<Vec<f64>> {
    check_len("v_to_x0 velocity", x_t.len(), v.len())?;
    sched.check_t(t)?;
    let (a, s) = (sched.sqrt_alpha_bar(t), sched.sigma(t));
    Ok(x_t.iter().zip(v).map(|(x, v)| a * x - s * v).collect())
}

/// Velocity target for a clean/noise pair: `v = sqrt(abar) eps - sqrt(1 - abar) x0`.
pub fn velocity_target(x0: &[f64], eps: &[f64], t: usize, sched: &Schedule) -> Result<Vec<f64>> {
    check_len("velocity_target eps", x0.len(), eps.len())?;
    sched.check_t(t)?;
    let (a, s) = (sched.sqrt_alpha_bar(t), sched.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * e - s * x).collect())
}

/// Score implied by a clean-sample prediction:
/// `-(x_t - sqrt(abar) x0_pred) / (1 - abar)`.
pub fn score_from_denoiser(x_t: &[f64], x0_pred: &[f64], t: usize, sched: &Schedule) -> Result<Vec<f64>> {
    check_len("score_from_denoiser prediction", x_t.len(), x0_pred.len())?;
    sched.check_t(t)?;
    if t == 0 {
        return Err(Error::InvalidArgument(
            "score is undefined at t = 0 (zero noise variance)".into(),
        ));
    }
    let a = sched.sqrt_alpha_bar(t);
    let var = 1.0 - sched.alpha_bar(t);
    Ok(x_t.iter().zip(x0_pred).map(|(x, m)| -(x - a * m) / var).collect())
}

// Row-batched forms. Each row `i` uses its own timestep `ts[i]`.

pub fn add_noise_batch(x0: ArrayView2<f64>, eps: ArrayView2<f64>, ts: &[usize], sched: &Schedule) -> Array2<f64> {
    assert_eq!(x0.dim(), eps.dim());
    assert_eq!(x0.nrows(), ts.len());
    let mut out = Array2::zeros(x0.dim());
    Zip::from(out.rows_mut())
        .and(x0.rows())
        .and(eps.rows())
        .and(ts)
        .for_each(|mut o, x, e, &t| {
            let (a, s) = (sched.sqrt_alpha_bar(t), sched.sigma(t));
            Zip::from(&mut o).and(&x).and(&e).for_each(|o, &x, &e| *o = a * x + s * e);
        });
    out
}

pub fn v_to_x0_batch(x_t: ArrayView2<f64>, v: ArrayView2<f64>, ts: &[usize], sched: &Schedule) -> Array2<f64> {
    assert_eq!(x_t.dim(), v.dim());
    let mut out = Array2::zeros(x_t.dim());
    Zip::from(out.rows_mut())
        .and(x_t.rows())
        .and(v.rows())
        .and(ts)
        .for_each(|mut o, x, v, &t| {
            let (a, s) = (sched.sqrt_alpha_bar(t), sched.sigma(t));
            Zip::from(&mut o).and(&x).and(&v).for_each(|o, &x, &v| *o = a * x - s * v);
        });
    out
}

pub fn velocity_target_batch(x0: ArrayView2<f64>, eps: ArrayView2<f64>, ts: &[usize], sched: &Schedule) -> Array2<f64> {
    let mut out = Array2::zeros(x0.dim());
    Zip::from(out.rows_mut())
        .and(x0.rows())
        .and(eps.rows())
        .and(ts)
        .for_each(|mut o, x, e, &t| {
            let (a, s) = (sched.sqrt_alpha_bar(t), sched.sigma(t));
            Zip::from(&mut o).and(&x).and(&e).for_each(|o, &x, &e| *o = a * e - s * x);
        });
    out
}

/// Batched score from clean-sample predictions; every `ts[i]` must be at least 1.
pub fn score_from_denoiser_batch(x_t: ArrayView2<f64>, x0_pred: ArrayView2<f64>, ts: &[usize], sched: &Schedule) -> Array2<f64> {
    let mut out = Array2::zeros(x_t.dim());
    Zip::from(out.rows_mut())
        .and(x_t.rows())
        .and(x0_pred.rows())
        .and(ts)
        .for_each(|mut o, x, m, &t| {
            debug_assert!(t >= 1);
            let a = sched.sqrt_alpha_bar(t);
            let var = 1.0 - sched.alpha_bar(t);
            Zip::from(&mut o).and(&x).and(&m).for_each(|o, &x, &m| *o = -(x - a * m) / var);
        });
    out
}
