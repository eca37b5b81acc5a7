//! The data distribution and the teacher denoiser trained on it.

mod mixture;

pub use mixture::{one_hot, MixtureSpec};

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::denoiser::{Denoiser, DenoiserSpec, DivergenceGuard};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState};
use crate::rng::{normal_matrix, uniform_steps};
use crate::schedule::Schedule;

/// The fixed teacher: analytic data distribution plus a denoiser trained on it.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBundle {
    pub mixture: MixtureSpec,
    pub denoiser: Denoiser,
    pub schedule: Schedule,
    /// When true, every network receives a one-hot component label.
    pub conditional: bool,
}

impl TeacherBundle {
    pub fn new<R: Rng + ?Sized>(mixture: MixtureSpec, spec: &DenoiserSpec, schedule: Schedule, conditional: bool, rng: &mut R) -> Result<Self> {
        let cond_dim = if conditional { mixture.num_components() } else { 0 };
        let denoiser = Denoiser::new(spec, mixture.dim(), cond_dim, rng)?;
        Ok(Self {
            mixture,
            denoiser,
            schedule,
            conditional,
        })
    }

    pub fn condition_dim(&self) -> usize {
        self.denoiser.cond_dim()
    }

    /// One-hot rows for `labels`, or `None` for an unconditional teacher.
    pub fn condition_rows(&self, labels: &[usize]) -> Option<Array2<f64>> {
        self.conditional
            .then(|| one_hot(labels, self.mixture.num_components()))
    }

    /// Deterministic DDIM-style sampler over `n_steps` evenly spaced
    /// timesteps from `T` down. Returns the samples and the number of
    /// denoiser evaluations.
    pub fn sample_multistep(&self, n_steps: usize, z: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<(Array2<f64>, usize)> {
        let t_max = self.schedule.num_steps();
        if n_steps == 0 || n_steps > t_max {
            return Err(Error::InvalidArgument(format!(
                "n_steps must lie in [1, {t_max}], got {n_steps}"
            )));
        }
        let steps: Vec<usize> = (1..=n_steps)
            .rev()
            .map(|i| ((t_max * i) as f64 / n_steps as f64).round() as usize)
            .collect();
        let n = z.nrows();
        let mut x = z.to_owned();
        let mut x0 = Array2::zeros(z.dim());
        let mut evals = 0;
        for (k, &t) in steps.iter().enumerate() {
            let ts = vec![t; n];
            x0 = self.denoiser.predict_x0(x.view(), &ts, cond, &self.schedule)?;
            evals += 1;
            let Some(&next) = steps.get(k + 1) else { break };
            let (a, s) = (self.schedule.sqrt_alpha_bar(t), self.schedule.sigma(t));
            let (a_next, s_next) = (self.schedule.sqrt_alpha_bar(next), self.schedule.sigma(next));
            let eps_hat = (&x - &(&x0 * a)) / s;
            x = &x0 * a_next + &eps_hat * s_next;
        }
        Ok((x0, evals))
    }
}

/// Settings for plain denoising regression on mixture samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseTraining {
    pub iters: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

/// Train a denoiser on fresh mixture samples with timesteps drawn by
/// `draw_t`. Returns the per-iteration losses.
pub(crate) fn fit_denoiser<R, F>(
    denoiser: &mut Denoiser,
    mixture: &MixtureSpec,
    conditional: bool,
    schedule: &Schedule,
    settings: DenoiseTraining,
    phase: &'static str,
    rng: &mut R,
    mut draw_t: F,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R, usize) -> Vec<usize>,
{
    let mut adam = AdamState::new(settings.adam, denoiser.net.num_params());
    let mut guard = DivergenceGuard::new(phase);
    let mut losses = Vec::with_capacity(settings.iters);
    for iter in 0..settings.iters {
        let (x0, labels) = mixture.sample(settings.batch, rng);
        let eps = normal_matrix(rng, settings.batch, mixture.dim());
        let ts = draw_t(rng, settings.batch);
        let cond = conditional.then(|| one_hot(&labels, mixture.num_components()));
        let (loss, grad) = denoiser.denoising_loss_grad(x0.view(), eps.view(), &ts, cond.as_ref().map(|c| c.view()), schedule)?;
        guard.observe(iter, loss)?;
        adam.step(denoiser.net.params_mut(), &grad)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Standard denoising training of the teacher, `t ~ U{1..T}`.
pub fn train_teacher_denoiser<R: Rng + ?Sized>(bundle: &mut TeacherBundle, settings: DenoiseTraining, rng: &mut R) -> Result<Vec<f64>> {
    let t_max = bundle.schedule.num_steps();
    let TeacherBundle {
        mixture,
        denoiser,
        schedule,
        conditional,
    } = bundle;
    fit_denoiser(denoiser, mixture, *conditional, schedule, settings, "teacher", rng, |r, n| {
        uniform_steps(r, n, 1, t_max)
    })
}

/// Trailing moving average with window `w` (first value at index `w - 1`).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if xs.len() < w || w == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - w + 1);
    let mut acc: f64 = xs[..w].iter().sum();
    out.push(acc / w as f64);
    for i in w..xs.len() {
        acc += xs[i] - xs[i - w];
        out.push(acc / w as f64);
    }
    out
}
