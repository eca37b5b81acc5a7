//! Distribution matching: score-difference cotangents for the plain and the
//! softened reverse KL, quadrature values of both divergences, and the
//! fake-score network that tracks the student's distribution.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{sigmoid, train_head_on_samples, Discriminator};
use crate::denoiser::{Denoiser, DivergenceGuard};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState};
use crate::rng::{normal_matrix, uniform_steps};
use crate::schedule::{add_noise_batch, score_from_denoiser_batch, Schedule};
use crate::student::StudentModel;
use crate::teacher::{one_hot, MixtureSpec};

/// One side of the score pair: either the closed-form mixture score or a
/// denoiser's implied score.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreSource {
    Analytic {
        mixture: MixtureSpec,
        components: Vec<MixtureSpec>,
    },
    Neural(Denoiser),
}

impl ScoreSource {
    pub fn analytic(mixture: MixtureSpec) -> Self {
        let components = (0..mixture.num_components()).map(|k| mixture.component(k)).collect();
        Self::Analytic { mixture, components }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Analytic { .. } => "analytic",
            Self::Neural(_) => "neural",
        }
    }

    /// Scores at `(x_t, t)`. With one-hot conditions the analytic source
    /// uses the labelled component alone.
    pub fn scores(&self, x_t: ArrayView2<f64>, ts: &[usize], cond: Option<ArrayView2<f64>>, sched: &Schedule) -> Result<Array2<f64>> {
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > sched.num_steps()) {
            return Err(Error::InvalidArgument(format!("score queried at t = {t}")));
        }
        let out = match self {
            Self::Analytic { mixture, components } => match cond {
                None => mixture.analytic_score_batch(x_t, ts, sched),
                Some(c) => {
                    let mut out = Array2::zeros(x_t.dim());
                    for (i, row) in c.rows().into_iter().enumerate() {
                        let k = argmax(row.as_slice().expect("contiguous condition row"));
                        let sc = components[k].analytic_score(x_t.row(i).as_slice().expect("contiguous"), ts[i], sched);
                        out.row_mut(i).assign(&ndarray::ArrayView1::from(&sc));
                    }
                    out
                }
            },
            Self::Neural(den) => {
                let x0 = den.predict_x0(x_t, ts, cond, sched)?;
                score_from_denoiser_batch(x_t, x0.view(), ts, sched)
            }
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "score",
                detail: format!("{} source", self.tag()),
            });
        }
        Ok(out)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

/// The real (teacher) and fake (student) score functions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreProvider {
    pub real: ScoreSource,
    pub fake: ScoreSource,
}

/// Weight applied to the score difference in softened mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// `1 / (1 + r)`, the exact gradient of the softened divergence.
    OnePlusR,
    /// `1 / r`.
    InverseR,
}

impl WeightMode {
    /// Weight from the log ratio.
    pub fn weight(self, log_r: f64) -> f64 {
        match self {
            Self::OnePlusR => sigmoid(-log_r),
            Self::InverseR => (-log_r).exp(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::OnePlusR => "one-plus-r",
            Self::InverseR => "inverse-r",
        }
    }
}

/// Where the density ratio `p_real,t / p_fake,t` comes from.
#[derive(Debug, Clone, Copy)]
pub enum RatioSource<'a> {
    Discriminator(&'a Discriminator),
    /// Bayes ratio of two known mixtures.
    Analytic { real: &'a MixtureSpec, fake: &'a MixtureSpec },
}

impl RatioSource<'_> {
    pub fn log_ratio(&self, x_t: ArrayView2<f64>, ts: &[usize], cond: Option<ArrayView2<f64>>, sched: &Schedule) -> Result<Vec<f64>> {
        match self {
            Self::Discriminator(d) => d.log_ratio_batch(x_t, ts, cond, sched),
            Self::Analytic { real, fake } => {
                let lp = real.noisy_log_density_batch(x_t, ts, sched);
                let lq = fake.noisy_log_density_batch(x_t, ts, sched);
                Ok(lp.iter().zip(&lq).map(|(a, b)| a - b).collect())
            }
        }
    }
}

/// Per-sample quantities of one distribution-matching batch.
#[derive(Debug, Clone)]
pub struct DmdGradReport {
    /// Cotangents injected at the student output.
    pub cotangents: Array2<f64>,
    pub ratios: Vec<f64>,
    pub weights: Vec<f64>,
    pub taus: Vec<usize>,
}

/// Plain reverse-KL cotangent `-(s_real - s_fake)` at `F(x0_hat, tau, eps)`,
/// optionally multiplied by `d F / d x0_hat = sqrt(alpha_bar_tau)`.
pub fn dmd_cotangent_rkl(
    sp: &ScoreProvider,
    x0_hat: ArrayView2<f64>,
    taus: &[usize],
    eps: ArrayView2<f64>,
    cond: Option<ArrayView2<f64>>,
    sched: &Schedule,
    chain_rule: bool,
) -> Result<Array2<f64>> {
    let x_tau = add_noise_batch(x0_hat, eps, taus, sched);
    rkl_at(sp, x_tau.view(), taus, cond, sched, chain_rule)
}

fn rkl_at(sp: &ScoreProvider, x_tau: ArrayView2<f64>, taus: &[usize], cond: Option<ArrayView2<f64>>, sched: &Schedule, chain_rule: bool) -> Result<Array2<f64>> {
    let real = sp.real.scores(x_tau, taus, cond, sched)?;
    let fake = sp.fake.scores(x_tau, taus, cond, sched)?;
    let mut cot = fake - real;
    if chain_rule {
        for (mut row, &t) in cot.rows_mut().into_iter().zip(taus) {
            row *= sched.sqrt_alpha_bar(t);
        }
    }
    Ok(cot)
}

/// Softened cotangent `-w(r) (s_real - s_fake)`, exactly `w(r)` times the
/// plain cotangent for every sample.
#[allow(clippy::too_many_arguments)]
pub fn dmd_cotangent_soften(
    sp: &ScoreProvider,
    ratio: RatioSource<'_>,
    x0_hat: ArrayView2<f64>,
    taus: &[usize],
    eps: ArrayView2<f64>,
    cond: Option<ArrayView2<f64>>,
    sched: &Schedule,
    mode: WeightMode,
    chain_rule: bool,
) -> Result<DmdGradReport> {
    let x_tau = add_noise_batch(x0_hat, eps, taus, sched);
    let mut cot = rkl_at(sp, x_tau.view(), taus, cond, sched, chain_rule)?;
    let log_r = ratio.log_ratio(x_tau.view(), taus, cond, sched)?;
    let weights: Vec<f64> = log_r.iter().map(|&l| mode.weight(l)).collect();
    for (mut row, &w) in cot.rows_mut().into_iter().zip(&weights) {
        row *= w;
    }
    Ok(DmdGradReport {
        cotangents: cot,
        ratios: log_r.iter().map(|l| l.exp()).collect(),
        weights,
        taus: taus.to_vec(),
    })
}

/// Composite Simpson rule on `[lo, hi]` with an odd number of nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Quadrature {
    pub fn new(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(hi > lo) || points < 3 || points % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "Simpson grid needs lo < hi and an odd node count >= 3, got [{lo}, {hi}] with {points}"
            )));
        }
        Ok(Self { lo, hi, points })
    }

    /// Nodes and weights.
    pub fn nodes(&self) -> Vec<(f64, f64)> {
        let h = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points)
            .map(|i| {
                let w = if i == 0 || i == self.points - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                (self.lo + i as f64 * h, w * h / 3.0)
            })
            .collect()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes().into_iter().map(|(x, w)| w * f(x)).sum()
    }
}

const MIN_MASS: f64 = 0.9999;

fn check_mass(q: &Quadrature, log_p: &impl Fn(f64) -> f64, log_q: &impl Fn(f64) -> f64) -> Result<()> {
    let mp = q.integrate(|x| log_p(x).exp());
    let mq = q.integrate(|x| log_q(x).exp());
    if mp < MIN_MASS || mq < MIN_MASS {
        return Err(Error::GridCoverage(format!(
            "grid [{}, {}] holds mass {mp:.6} of p and {mq:.6} of q, need {MIN_MASS}",
            q.lo, q.hi
        )));
    }
    Ok(())
}

/// Softened reverse KL `∫ q (r + 1) log(1/2 + 1/(2r))` with `r = p / q`,
/// which equals `∫ (p + q) log((p + q) / 2p)`, twice the KL divergence of
/// the even mixture from `p`. Densities are passed as log-densities.
pub fn soften_rkl_value(log_p: impl Fn(f64) -> f64, log_q: impl Fn(f64) -> f64, grid: &Quadrature) -> Result<f64> {
    check_mass(grid, &log_p, &log_q)?;
    Ok(grid.integrate(|x| {
        let (lp, lq) = (log_p(x), log_q(x));
        let lm = lse(lp, lq);
        (lm.exp()) * (lm - std::f64::consts::LN_2 - lp)
    }))
}

/// `KL((p + q)/2 || p)`, half of [`soften_rkl_value`].
pub fn mixture_kl_value(log_p: impl Fn(f64) -> f64, log_q: impl Fn(f64) -> f64, grid: &Quadrature) -> Result<f64> {
    Ok(0.5 * soften_rkl_value(log_p, log_q, grid)?)
}

/// Reverse KL `KL(q || p) = ∫ q log(q / p)`.
pub fn reverse_kl_value(log_p: impl Fn(f64) -> f64, log_q: impl Fn(f64) -> f64, grid: &Quadrature) -> Result<f64> {
    check_mass(grid, &log_p, &log_q)?;
    Ok(grid.integrate(|x| {
        let (lp, lq) = (log_p(x), log_q(x));
        lq.exp() * (lq - lp)
    }))
}

fn lse(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// One denoising step of the fake-score network on student samples. The
/// student is only read. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn fake_score_update<R: Rng + ?Sized>(
    sp: &mut ScoreProvider,
    adam: &mut AdamState,
    student: &StudentModel,
    real_x0: ArrayView2<f64>,
    cond: Option<ArrayView2<f64>>,
    rng: &mut R,
) -> Result<f64> {
    let ScoreSource::Neural(fake) = &mut sp.fake else {
        return Err(Error::InvalidArgument("fake score is analytic and cannot be trained".into()));
    };
    let sched = &student.schedule;
    let n = real_x0.nrows();
    let d = real_x0.ncols();
    let ts = student.grid.sample(rng, n);
    let eps = normal_matrix(rng, n, d);
    let x_t = add_noise_batch(real_x0, eps.view(), &ts, sched);
    let x0_hat = student.predict(x_t.view(), &ts, cond)?;
    let t1 = uniform_steps(rng, n, 1, sched.num_steps());
    let eps2 = normal_matrix(rng, n, d);
    let (loss, grad) = fake.denoising_loss_grad(x0_hat.view(), eps2.view(), &t1, cond, sched)?;
    adam.step(fake.net.params_mut(), &grad)?;
    Ok(loss)
}

/// Settings for the distribution-matching phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmdPhaseConfig {
    #[serde(default = "default_dmd_iters")]
    pub iters: usize,
    /// Fake-score updates per student update.
    #[serde(default = "default_ratio")]
    pub fake_updates: usize,
    /// Discriminator-head updates per student update.
    #[serde(default = "default_ratio")]
    pub disc_updates: usize,
    /// Fake-score updates on student outputs before the first student update.
    #[serde(default = "default_fake_warmup")]
    pub fake_warmup: usize,
    #[serde(default = "default_weight_mode")]
    pub weight_mode: WeightMode,
    /// Multiply cotangents by `sqrt(alpha_bar_tau)`.
    #[serde(default)]
    pub chain_rule: bool,
    /// Draw `tau` only up to `0.98 T`.
    #[serde(default)]
    pub truncate_tau: bool,
    /// Divide the batch cotangent by its root mean square.
    #[serde(default)]
    pub normalize: bool,
    /// Scale each sample by `sigma_tau^2 / sqrt(alpha_bar_tau)`, which turns
    /// the score gap into the gap between the two clean-sample predictions.
    #[serde(default = "default_x0_space")]
    pub x0_space: bool,
    /// Stop training the discriminator head during this phase.
    #[serde(default)]
    pub freeze_head: bool,
}

fn default_dmd_iters() -> usize {
    5000
}
fn default_ratio() -> usize {
    5
}
fn default_fake_warmup() -> usize {
    2000
}
fn default_x0_space() -> bool {
    true
}
fn default_weight_mode() -> WeightMode {
    WeightMode::OnePlusR
}

impl Default for DmdPhaseConfig {
    fn default() -> Self {
        Self {
            iters: default_dmd_iters(),
            fake_updates: default_ratio(),
            disc_updates: default_ratio(),
            fake_warmup: default_fake_warmup(),
            weight_mode: default_weight_mode(),
            chain_rule: false,
            truncate_tau: false,
            normalize: false,
            x0_space: default_x0_space(),
            freeze_head: false,
        }
    }
}

/// One logged distribution-matching iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmdRow {
    pub iter: usize,
    pub mean_abs_cotangent: f64,
    pub cotangent_rms: f64,
    pub mean_ratio: f64,
    pub mean_weight: f64,
    pub fake_score_loss: f64,
}

/// Mutable state of the distribution-matching phase.
#[derive(Debug, Clone)]
pub struct DmdPhase {
    pub student_adam: AdamState,
    pub fake_adam: AdamState,
    pub head_adam: AdamState,
    pub fake_guard: DivergenceGuard,
    pub iter: usize,
}

impl DmdPhase {
    pub fn new(student: &StudentModel, fake: &Denoiser, disc: &Discriminator, adam: AdamConfig) -> Self {
        Self {
            student_adam: AdamState::new(adam, student.denoiser.net.num_params()),
            fake_adam: AdamState::new(adam, fake.net.num_params()),
            head_adam: AdamState::new(adam, disc.head.num_params()),
            fake_guard: DivergenceGuard::new("fake-score"),
            iter: 0,
        }
    }

    /// Student update, then the fake-score and head updates. `soften`
    /// selects the weighted cotangent; otherwise the plain reverse KL.
    #[allow(clippy::too_many_arguments)]
    pub fn step<R: Rng + ?Sized, S: Rng + ?Sized>(
        &mut self,
        student: &mut StudentModel,
        sp: &mut ScoreProvider,
        disc: &mut Discriminator,
        mixture: &MixtureSpec,
        conditional: bool,
        cfg: &DmdPhaseConfig,
        soften: bool,
        batch: usize,
        data_rng: &mut R,
        noise_rng: &mut S,
    ) -> Result<DmdRow> {
        let sched = student.schedule.clone();
        let k = mixture.num_components();
        let d = mixture.dim();
        let t_max = sched.num_steps();
        let tau_max = if cfg.truncate_tau {
            ((0.98 * t_max as f64).floor() as usize).max(1)
        } else {
            t_max
        };

        if self.iter == 0 {
            for _ in 0..cfg.fake_warmup {
                let (real, labels) = mixture.sample(batch, data_rng);
                let cond = conditional.then(|| one_hot(&labels, k));
                fake_score_update(sp, &mut self.fake_adam, student, real.view(), cond.as_ref().map(|c| c.view()), noise_rng)?;
            }
        }

        let (real, labels) = mixture.sample(batch, data_rng);
        let cond = conditional.then(|| one_hot(&labels, k));
        let cv = cond.as_ref().map(|c| c.view());
        let ts = student.grid.sample(noise_rng, batch);
        let eps = normal_matrix(noise_rng, batch, d);
        let taus = uniform_steps(noise_rng, batch, 1, tau_max);
        let eps_tau = normal_matrix(noise_rng, batch, d);
        let x_t = add_noise_batch(real.view(), eps.view(), &ts, &sched);
        let tr = student.denoiser.predict_x0_traced(x_t.view(), &ts, cv, &sched)?;

        let x_tau = add_noise_batch(tr.x0.view(), eps_tau.view(), &taus, &sched);
        let log_r = disc.log_ratio_batch(x_tau.view(), &taus, cv, &sched)?;
        let mut cot = rkl_at(sp, x_tau.view(), &taus, cv, &sched, cfg.chain_rule)?;
        if cfg.x0_space {
            for (mut row, &t) in cot.rows_mut().into_iter().zip(&taus) {
                row *= sched.sigma(t).powi(2) / sched.sqrt_alpha_bar(t);
            }
        }
        let weights: Vec<f64> = if soften {
            log_r.iter().map(|&l| cfg.weight_mode.weight(l)).collect()
        } else {
            vec![1.0; batch]
        };
        for (mut row, &w) in cot.rows_mut().into_iter().zip(&weights) {
            row *= w;
        }
        let rms = (cot.iter().map(|v| v * v).sum::<f64>() / cot.len() as f64).sqrt();
        let mean_abs = cot.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / batch as f64;
        if !rms.is_finite() {
            return Err(Error::NonFinite {
                what: "distribution-matching cotangent",
                detail: format!("iteration {}", self.iter),
            });
        }
        let mut scaled = cot / batch as f64;
        if cfg.normalize && rms > 0.0 {
            scaled /= rms;
        }
        let (g, _) = student.denoiser.backward_x0(&tr, scaled.view(), &sched, true)?;
        self.student_adam.step(student.denoiser.net.params_mut(), &g.expect("student gradient"))?;

        let mut fake_loss = 0.0;
        for _ in 0..cfg.fake_updates {
            let (real, labels) = mixture.sample(batch, data_rng);
            let cond = conditional.then(|| one_hot(&labels, k));
            fake_loss = fake_score_update(sp, &mut self.fake_adam, student, real.view(), cond.as_ref().map(|c| c.view()), noise_rng)?;
        }
        if cfg.fake_updates > 0 {
            self.fake_guard.observe(self.iter, fake_loss)?;
        }

        if soften && !cfg.freeze_head {
            for _ in 0..cfg.disc_updates {
                let (real, labels) = mixture.sample(batch, data_rng);
                let cond = conditional.then(|| one_hot(&labels, k));
                let cv = cond.as_ref().map(|c| c.view());
                let ts = student.grid.sample(noise_rng, batch);
                let eps = normal_matrix(noise_rng, batch, d);
                let x_t = add_noise_batch(real.view(), eps.view(), &ts, &sched);
                let fake = student.predict(x_t.view(), &ts, cv)?;
                train_head_on_samples(disc, &mut self.head_adam, real.view(), fake.view(), cv, &sched, noise_rng)?;
            }
        }

        let row = DmdRow {
            iter: self.iter,
            mean_abs_cotangent: mean_abs,
            cotangent_rms: rms,
            mean_ratio: log_r.iter().map(|l| l.exp()).sum::<f64>() / batch as f64,
            mean_weight: weights.iter().sum::<f64>() / batch as f64,
            fake_score_loss: fake_loss,
        };
        self.iter += 1;
        Ok(row)
    }
}

/// Score of a one-dimensional location family `N(theta, s^2)` student,
/// packaged for the quadrature oracles: the expected cotangent pulled back to
/// `theta`, where `E_q[g]` is taken by quadrature over the noised student
/// marginal instead of by sampling.
pub fn location_gradient(
    teacher: &MixtureSpec,
    theta: f64,
    spread: f64,
    tau: usize,
    sched: &Schedule,
    soften: Option<WeightMode>,
    grid: &Quadrature,
) -> Result<f64> {
    let student = MixtureSpec::gaussian(vec![theta], spread * spread)?;
    let sp = ScoreProvider {
        real: ScoreSource::analytic(teacher.clone()),
        fake: ScoreSource::analytic(student.clone()),
    };
    let nodes = grid.nodes();
    let n = nodes.len();
    let (a, sig) = (sched.sqrt_alpha_bar(tau), sched.sigma(tau));
    // place every node exactly: x_tau = a * theta + sig * eps'
    let x0 = Array2::from_elem((n, 1), theta);
    let eps = Array2::from_shape_fn((n, 1), |(i, _)| (nodes[i].0 - a * theta) / sig);
    let taus = vec![tau; n];
    let cot = match soften {
        None => dmd_cotangent_rkl(&sp, x0.view(), &taus, eps.view(), None, sched, true)?,
        Some(mode) => {
            let ratio = RatioSource::Analytic {
                real: teacher,
                fake: &student,
            };
            dmd_cotangent_soften(&sp, ratio, x0.view(), &taus, eps.view(), None, sched, mode, true)?.cotangents
        }
    };
    let xs = Array2::from_shape_fn((n, 1), |(i, _)| nodes[i].0);
    let lq = student.noisy_log_density_batch(xs.view(), &taus, sched);
    Ok(nodes
        .iter()
        .zip(&lq)
        .zip(cot.slice(s![.., 0]))
        .map(|(((_, w), l), c)| w * l.exp() * c)
        .sum())
}
