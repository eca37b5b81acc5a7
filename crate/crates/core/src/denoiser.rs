//! A [`DenseNet`] wrapped as a diffusion denoiser: input `(x_t, t, c)`,
//! output interpreted as a clean-sample or velocity prediction and always
//! exposed as a clean-sample estimate.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{build_input, Activation, DenseNet, InputLayout, Trace};
use crate::schedule::{velocity_target_batch, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prediction {
    X0,
    Velocity,
}

/// Architecture of a denoiser network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_prediction")]
    pub prediction: Prediction,
    #[serde(default = "default_time_freqs")]
    pub time_freqs: usize,
}

fn default_activation() -> Activation {
    Activation::Silu
}
fn default_prediction() -> Prediction {
    Prediction::X0
}
fn default_time_freqs() -> usize {
    16
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: default_activation(),
            prediction: default_prediction(),
            time_freqs: default_time_freqs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub net: DenseNet,
    pub prediction: Prediction,
}

/// Forward record needed to differentiate a clean-sample prediction.
#[derive(Debug, Clone)]
pub struct DenoiserTrace {
    trace: Trace,
    ts: Vec<usize>,
    pub x0: Array2<f64>,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(spec: &DenoiserSpec, sample_dim: usize, cond_dim: usize, rng: &mut R) -> Result<Self> {
        let layout = InputLayout {
            sample_dim,
            time_freqs: spec.time_freqs,
            cond_dim,
        };
        let mut widths = vec![layout.width()];
        widths.extend_from_slice(&spec.hidden);
        widths.push(sample_dim);
        let mut net = DenseNet::new(widths, spec.activation, layout)?;
        net.init_uniform(rng);
        Ok(Self {
            net,
            prediction: spec.prediction,
        })
    }

    pub fn sample_dim(&self) -> usize {
        self.net.layout().sample_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.net.layout().cond_dim
    }

    /// True when `other` has an identical architecture and output convention.
    pub fn same_architecture(&self, other: &Denoiser) -> bool {
        self.net.shape() == other.net.shape() && self.prediction == other.prediction
    }

    fn input(&self, x_t: ArrayView2<f64>, ts: &[usize], cond: Option<ArrayView2<f64>>, sched: &Schedule) -> Result<Array2<f64>> {
        if let Some(&t) = ts.iter().find(|&&t| t > sched.num_steps()) {
            return Err(Error::InvalidArgument(format!("timestep {t} beyond T")));
        }
        build_input(self.net.layout(), x_t, ts, sched.num_steps(), cond)
    }

    fn output_to_x0(&self, x_t: ArrayView2<f64>, out: Array2<f64>, ts: &[usize], sched: &Schedule) -> Array2<f64> {
        match self.prediction {
            Prediction::X0 => out,
            Prediction::Velocity => crate::schedule::v_to_x0_batch(x_t, out.view(), ts, sched),
        }
    }

    pub fn predict_x0(&self, x_t: ArrayView2<f64>, ts: &[usize], cond: Option<ArrayView2<f64>>, sched: &Schedule) -> Result<Array2<f64>> {
        let inp = self.input(x_t, ts, cond, sched)?;
        let out = self.net.forward(inp.view())?;
        Ok(self.output_to_x0(x_t, out, ts, sched))
    }

    pub fn predict_x0_traced(&self, x_t: ArrayView2<f64>, ts: &[usize], cond: Option<ArrayView2<f64>>, sched: &Schedule) -> Result<DenoiserTrace> {
        let inp = self.input(x_t, ts, cond, sched)?;
        let trace = self.net.forward_full_trace(inp.view())?;
        let x0 = self.output_to_x0(x_t, trace.output().clone(), ts, sched);
        Ok(DenoiserTrace {
            trace,
            ts: ts.to_vec(),
            x0,
        })
    }

    /// Pull a cotangent on the clean-sample estimate back to parameters and
    /// to `x_t`.
    pub fn backward_x0(&self, tr: &DenoiserTrace, cot_x0: ArrayView2<f64>, sched: &Schedule, want_params: bool) -> Result<(Option<Vec<f64>>, Array2<f64>)> {
        let d = self.sample_dim();
        let out_cot = match self.prediction {
            Prediction::X0 => cot_x0.to_owned(),
            Prediction::Velocity => {
                let mut c = cot_x0.to_owned();
                for (mut row, &t) in c.rows_mut().into_iter().zip(&tr.ts) {
                    row *= -sched.sigma(t);
                }
                c
            }
        };
        let g = self.net.backward(&tr.trace, out_cot.view(), want_params)?;
        let mut dx = g.input.slice(s![.., ..d]).to_owned();
        if self.prediction == Prediction::Velocity {
            Zip::from(dx.rows_mut())
                .and(cot_x0.rows())
                .and(&tr.ts)
                .for_each(|mut r, c, &t| r.scaled_add(sched.sqrt_alpha_bar(t), &c));
        }
        Ok((g.params, dx))
    }

    /// Hidden-layer features after `layers` layers, traced for input gradients.
    pub fn features_traced(&self, x_t: ArrayView2<f64>, ts: &[usize], cond: Option<ArrayView2<f64>>, sched: &Schedule, layers: usize) -> Result<Trace> {
        let inp = self.input(x_t, ts, cond, sched)?;
        self.net.forward_trace(inp.view(), layers)
    }

    /// Mean squared error of the denoising objective on `(x0, eps, t)`
    /// triples and its parameter gradient. The regression target follows
    /// the prediction convention.
    pub fn denoising_loss_grad(
        &self,
        x0: ArrayView2<f64>,
        eps: ArrayView2<f64>,
        ts: &[usize],
        cond: Option<ArrayView2<f64>>,
        sched: &Schedule,
    ) -> Result<(f64, Vec<f64>)> {
        let x_t = crate::schedule::add_noise_batch(x0, eps, ts, sched);
        let inp = self.input(x_t.view(), ts, cond, sched)?;
        let trace = self.net.forward_full_trace(inp.view())?;
        let target = match self.prediction {
            Prediction::X0 => x0.to_owned(),
            Prediction::Velocity => velocity_target_batch(x0, eps, ts, sched),
        };
        let n = x0.nrows() as f64;
        let resid = trace.output() - &target;
        let loss = resid.map(|r| r * r).sum_axis(Axis(1)).sum() / n;
        let cot = resid * (2.0 / n);
        let g = self.net.backward(&trace, cot.view(), true)?;
        Ok((loss, g.params.expect("parameter gradient requested")))
    }
}

/// Aborts training when the loss stays above ten times its first value for
/// `window` consecutive steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceGuard {
    phase: &'static str,
    window: usize,
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    pub fn new(phase: &'static str) -> Self {
        Self::with_window(phase, 100)
    }

    pub fn with_window(phase: &'static str, window: usize) -> Self {
        Self {
            phase,
            window,
            initial: None,
            streak: 0,
        }
    }

    /// `(initial loss, current streak)` for checkpointing.
    pub fn state(&self) -> (Option<f64>, usize) {
        (self.initial, self.streak)
    }

    pub fn restore_state(&mut self, initial: Option<f64>, streak: usize) {
        self.initial = initial;
        self.streak = streak;
    }

    pub fn observe(&mut self, iter: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss",
                detail: format!("{} iteration {iter}: {loss}", self.phase),
            });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > 10.0 * initial {
            self.streak += 1;
            if self.streak >= self.window {
                return Err(Error::Diverged {
                    phase: self.phase,
                    iter,
                    loss,
                    initial,
                    window: self.window,
                });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}
