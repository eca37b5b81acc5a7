//! The few-step generator: a denoiser evaluated only on a short grid of
//! timesteps.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::AdamConfig;
use crate::rng::normal_matrix;
use crate::schedule::{add_noise_batch, Schedule};
use crate::teacher::{fit_denoiser, DenoiseTraining, TeacherBundle};

/// Ordered timesteps `{0, t_1, ..., t_Q}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FewStepGrid(Vec<usize>);

impl TryFrom<Vec<usize>> for FewStepGrid {
    type Error = Error;

    fn try_from(steps: Vec<usize>) -> Result<Self> {
        if steps.len() < 2 || steps[0] != 0 {
            return Err(Error::config("student.grid", "grid must start at 0 and contain at least one denoising step"));
        }
        if steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("student.grid", "grid must be strictly increasing"));
        }
        Ok(Self(steps))
    }
}

impl From<FewStepGrid> for Vec<usize> {
    fn from(g: FewStepGrid) -> Self {
        g.0
    }
}

impl FewStepGrid {
    pub fn new(steps: Vec<usize>, num_steps: usize) -> Result<Self> {
        let grid = Self::try_from(steps)?;
        grid.check_within(num_steps)?;
        Ok(grid)
    }

    /// `Q` evenly spaced steps ending at `T - 1`: `t_i = i T / Q - 1`.
    pub fn uniform(q: usize, num_steps: usize) -> Result<Self> {
        if q == 0 || num_steps / q < 2 {
            return Err(Error::config("student.grid", format!("cannot place {q} steps on T = {num_steps}")));
        }
        let mut steps = vec![0];
        steps.extend((1..=q).map(|i| i * num_steps / q - 1));
        Self::new(steps, num_steps)
    }

    pub fn check_within(&self, num_steps: usize) -> Result<()> {
        if *self.0.last().unwrap() > num_steps {
            return Err(Error::config("student.grid", format!("grid exceeds T = {num_steps}")));
        }
        Ok(())
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    /// The denoising points `t_1..=t_Q`.
    pub fn denoising_steps(&self) -> &[usize] {
        &self.0[1..]
    }

    pub fn num_denoising_steps(&self) -> usize {
        self.0.len() - 1
    }

    /// `n` steps drawn uniformly from `t_1..=t_Q`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        let d = self.denoising_steps();
        (0..n).map(|_| d[rng.random_range(0..d.len())]).collect()
    }
}

/// How the sampler moves between grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Renoise {
    /// Re-noise the prediction with a fresh Gaussian draw.
    Stochastic,
    /// Deterministic DDIM hop reusing the implied noise.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub denoiser: Denoiser,
    pub grid: FewStepGrid,
    pub schedule: Schedule,
    pub renoise: Renoise,
}

/// One denoising evaluation of a few-step sweep.
#[derive(Debug, Clone)]
pub struct SweepStep {
    pub t: usize,
    pub input: Array2<f64>,
    pub x0_hat: Array2<f64>,
}

impl StudentModel {
    pub fn new(denoiser: Denoiser, grid: FewStepGrid, schedule: Schedule, renoise: Renoise) -> Result<Self> {
        grid.check_within(schedule.num_steps())?;
        Ok(Self {
            denoiser,
            grid,
            schedule,
            renoise,
        })
    }

    /// Clean-sample prediction `G(x_t, t)`.
    pub fn predict(&self, x_t: ArrayView2<f64>, ts: &[usize], cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        if let Some(&t) = ts.iter().find(|&&t| t == 0) {
            return Err(Error::InvalidArgument(format!("student is never queried at t = {t}")));
        }
        self.denoiser.predict_x0(x_t, ts, cond, &self.schedule)
    }

    /// Backward sweep over the grid starting from `z` at `t_Q`. The output is
    /// the prediction at `t_1`; the trace holds one entry per evaluation, so
    /// its length is exactly `Q`.
    pub fn generate_few_step<R: Rng + ?Sized>(
        &self,
        z: ArrayView2<f64>,
        cond: Option<ArrayView2<f64>>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Vec<SweepStep>)> {
        let n = z.nrows();
        let steps = self.grid.denoising_steps();
        let mut trace = Vec::with_capacity(steps.len());
        let mut x = z.to_owned();
        for (i, &t) in steps.iter().enumerate().rev() {
            let x0_hat = self.predict(x.view(), &vec![t; n], cond)?;
            let next = match i {
                0 => None,
                _ => Some(self.move_to(x.view(), x0_hat.view(), t, steps[i - 1], rng)),
            };
            trace.push(SweepStep {
                t,
                input: x,
                x0_hat,
            });
            match next {
                Some(nx) => x = nx,
                None => break,
            }
        }
        let out = trace.last().expect("grid has a denoising step").x0_hat.clone();
        Ok((out, trace))
    }

    fn move_to<R: Rng + ?Sized>(&self, x: ArrayView2<f64>, x0_hat: ArrayView2<f64>, t: usize, prev: usize, rng: &mut R) -> Array2<f64> {
        let n = x.nrows();
        match self.renoise {
            Renoise::Stochastic => {
                let eps = normal_matrix(rng, n, x.ncols());
                add_noise_batch(x0_hat, eps.view(), &vec![prev; n], &self.schedule)
            }
            Renoise::Deterministic => {
                let (a, s) = (self.schedule.sqrt_alpha_bar(t), self.schedule.sigma(t));
                let eps_hat = (&x - &(&x0_hat * a)) / s;
                &x0_hat * self.schedule.sqrt_alpha_bar(prev) + &eps_hat * self.schedule.sigma(prev)
            }
        }
    }

    /// Few-step samples only.
    pub fn generate<R: Rng + ?Sized>(&self, z: ArrayView2<f64>, cond: Option<ArrayView2<f64>>, rng: &mut R) -> Result<Array2<f64>> {
        Ok(self.generate_few_step(z, cond, rng)?.0)
    }
}

/// Initialise the student from the teacher. With matching architectures the
/// teacher's parameters are copied and `iters` may be zero; any warm-up
/// iterations then run denoising regression restricted to grid timesteps.
pub fn pretrain_student<R: Rng + ?Sized>(
    student: &mut StudentModel,
    teacher: &TeacherBundle,
    iters: usize,
    batch: usize,
    adam: AdamConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if student.denoiser.same_architecture(&teacher.denoiser) {
        student.denoiser.net.set_params(teacher.denoiser.net.params())?;
    }
    let grid = student.grid.clone();
    fit_denoiser(
        &mut student.denoiser,
        &teacher.mixture,
        teacher.conditional,
        &student.schedule,
        DenoiseTraining { iters, batch, adam },
        "student warm-up",
        rng,
        |r, n| grid.sample(r, n),
    )
}
