//! Adversarial initialisation of the student.
//!
//! The discriminator reuses the frozen teacher denoiser as a feature
//! extractor (a tap on one of its hidden layers) and trains only a small
//! dense head producing one logit per sample. With `f = sigmoid(logit)` the
//! probability that a noised sample is real, the density ratio
//! `p_real / p_fake` is estimated as `f / (1 - f) = exp(logit)`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::{build_input, AdamConfig, AdamState, Activation, DenseNet, InputLayout, Trace};
use crate::rng::{normal_matrix, uniform_steps};
use crate::schedule::{add_noise_batch, Schedule};
use crate::student::StudentModel;
use crate::teacher::{one_hot, MixtureSpec};

pub const DEFAULT_LOGIT_CLAMP: f64 = 15.0;

/// What the discriminator head minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscObjective {
    /// Binary cross-entropy: `-E_real[log f] - E_fake[log(1 - f)]`.
    Bce,
    /// Ascend `E_real[log f] - E_fake[log f]` directly.
    LogGap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    #[serde(default = "default_head_hidden")]
    pub head_hidden: Vec<usize>,
    /// Number of backbone layers applied before the tap; defaults to the
    /// first hidden layer (deeper taps let the generator run away on the ring).
    #[serde(default)]
    pub tap_layers: Option<usize>,
    #[serde(default = "default_objective")]
    pub objective: DiscObjective,
    #[serde(default = "default_clamp")]
    pub logit_clamp: f64,
}

fn default_head_hidden() -> Vec<usize> {
    vec![64]
}
fn default_objective() -> DiscObjective {
    DiscObjective::Bce
}
fn default_clamp() -> f64 {
    DEFAULT_LOGIT_CLAMP
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            head_hidden: default_head_hidden(),
            tap_layers: None,
            objective: default_objective(),
            logit_clamp: default_clamp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    backbone: Denoiser,
    tap_layers: usize,
    pub head: DenseNet,
    pub objective: DiscObjective,
    clamp: f64,
}

/// Forward record of a discriminator evaluation.
#[derive(Debug, Clone)]
pub struct DiscTrace {
    backbone: Trace,
    head: Trace,
    /// Unclamped head outputs.
    raw: Vec<f64>,
    /// Logits after clamping.
    pub logits: Vec<f64>,
}

impl DiscTrace {
    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without cancellation.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Discriminator {
    /// Builds the head on top of a frozen copy of `backbone`. The head's
    /// output layer starts at zero so every probability starts at 1/2.
    pub fn new<R: Rng + ?Sized>(backbone: &Denoiser, spec: &DiscriminatorSpec, rng: &mut R) -> Result<Self> {
        let layers = backbone.net.num_layers();
        let tap_layers = spec.tap_layers.unwrap_or(1);
        if tap_layers == 0 || tap_layers >= layers {
            return Err(Error::config(
                "gan.discriminator.tap_layers",
                format!("tap must select a hidden layer in 1..{layers}, got {tap_layers}"),
            ));
        }
        if !(spec.logit_clamp > 0.0) {
            return Err(Error::config("gan.discriminator.logit_clamp", "must be positive"));
        }
        let feat = backbone.net.widths()[tap_layers];
        let layout = InputLayout {
            sample_dim: feat,
            time_freqs: backbone.net.layout().time_freqs,
            cond_dim: 0,
        };
        let mut widths = vec![layout.width()];
        widths.extend_from_slice(&spec.head_hidden);
        widths.push(1);
        let mut head = DenseNet::new(widths, Activation::Tanh, layout)?;
        head.init_uniform(rng);
        head.zero_output_layer();
        Ok(Self {
            backbone: backbone.clone(),
            tap_layers,
            head,
            objective: spec.objective,
            clamp: spec.logit_clamp,
        })
    }

    pub fn backbone(&self) -> &Denoiser {
        &self.backbone
    }

    /// Swap in a new frozen backbone of the same architecture.
    pub fn set_backbone(&mut self, backbone: &Denoiser) -> Result<()> {
        if !self.backbone.same_architecture(backbone) {
            return Err(Error::InvalidArgument("replacement backbone has a different architecture".into()));
        }
        self.backbone = backbone.clone();
        Ok(())
    }

    pub fn logit_clamp(&self) -> f64 {
        self.clamp
    }

    pub fn forward(&self, x_t: ArrayView2<f64>, ts: &[usize], cond: Option<ArrayView2<f64>>, sched: &Schedule) -> Result<DiscTrace> {
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > sched.num_steps()) {
            return Err(Error::InvalidArgument(format!("discriminator timestep {t} outside [1, T]")));
        }
        let backbone = self.backbone.features_traced(x_t, ts, cond, sched, self.tap_layers)?;
        let head_in = build_input(self.head.layout(), backbone.output().view(), ts, sched.num_steps(), None)?;
        let head = self.head.forward_full_trace(head_in.view())?;
        let raw: Vec<f64> = head.output().column(0).to_vec();
        let logits = raw.iter().map(|l| l.clamp(-self.clamp, self.clamp)).collect();
        Ok(DiscTrace {
            backbone,
            head,
            raw,
            logits,
        })
    }

    /// Pull per-sample cotangents on the clamped logits back to the head
    /// parameters and/or the noised input. Samples whose raw logit lies
    /// outside the clamp receive no gradient.
    pub fn backward(&self, tr: &DiscTrace, cot: &[f64], want_head: bool, want_input: bool) -> Result<(Option<Vec<f64>>, Option<Array2<f64>>)> {
        let n = tr.raw.len();
        let mut c = Array2::zeros((n, 1));
        for (i, (&g, &r)) in cot.iter().zip(&tr.raw).enumerate() {
            if r.abs() <= self.clamp {
                c[[i, 0]] = g;
            }
        }
        let hg = self.head.backward(&tr.head, c.view(), want_head)?;
        if !want_input {
            return Ok((hg.params, None));
        }
        let feat = self.backbone.net.widths()[self.tap_layers];
        let feat_cot = hg.input.slice(s![.., ..feat]).to_owned();
        let bg = self.backbone.net.backward(&tr.backbone, feat_cot.view(), false)?;
        let d = self.backbone.sample_dim();
        Ok((hg.params, Some(bg.input.slice(s![.., ..d]).to_owned())))
    }

    /// `f(D(x_t, t))`, strictly inside (0, 1).
    pub fn disc_prob(&self, x_t: &[f64], t: usize, cond: Option<&[f64]>, sched: &Schedule) -> Result<f64> {
        Ok(sigmoid(self.point_logit(x_t, t, cond, sched)?))
    }

    /// `f / (1 - f)`, equal to `exp` of the clamped logit.
    pub fn density_ratio(&self, x_t: &[f64], t: usize, cond: Option<&[f64]>, sched: &Schedule) -> Result<f64> {
        Ok(self.point_logit(x_t, t, cond, sched)?.exp())
    }

    fn point_logit(&self, x_t: &[f64], t: usize, cond: Option<&[f64]>, sched: &Schedule) -> Result<f64> {
        let x = ArrayView2::from_shape((1, x_t.len()), x_t).expect("row");
        let c = cond.map(|c| ArrayView2::from_shape((1, c.len()), c).expect("row"));
        Ok(self.forward(x, &[t], c, sched)?.logits[0])
    }

    /// Batched clamped log-ratio estimates.
    pub fn log_ratio_batch(&self, x_t: ArrayView2<f64>, ts: &[usize], cond: Option<ArrayView2<f64>>, sched: &Schedule) -> Result<Vec<f64>> {
        Ok(self.forward(x_t, ts, cond, sched)?.logits)
    }
}

/// Losses and diagnostics of one adversarial batch. `loss_d` and `loss_g`
/// are reported in the min-max form `E_real[log f] - E_fake[log f]` and
/// `E_fake[log f]`, whatever objective drives the updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanBatchReport {
    pub loss_d: f64,
    pub loss_g: f64,
    pub real_prob: f64,
    pub fake_prob: f64,
    pub real_logit: f64,
    pub fake_logit: f64,
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
}

impl GanBatchReport {
    pub fn is_finite(&self) -> bool {
        [
            self.loss_d,
            self.loss_g,
            self.real_prob,
            self.fake_prob,
            self.real_logit,
            self.fake_logit,
            self.grad_norm_g,
            self.grad_norm_d,
        ]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Gradients produced by [`gan_losses`].
#[derive(Debug, Clone)]
pub struct GanGrads {
    pub head: Vec<f64>,
    pub student: Vec<f64>,
}

/// Random draws consumed by one adversarial batch, split out so tests can
/// replay a batch exactly.
#[derive(Debug, Clone)]
pub struct GanDraws {
    /// Grid timesteps and noise producing the student's input from real data.
    pub student_ts: Vec<usize>,
    pub student_eps: Array2<f64>,
    /// Shared discriminator timesteps and noise for real and fake samples.
    pub taus: Vec<usize>,
    pub tau_eps: Array2<f64>,
}

impl GanDraws {
    pub fn draw<R: Rng + ?Sized>(student: &StudentModel, n: usize, rng: &mut R) -> Self {
        let d = student.denoiser.sample_dim();
        let t_max = student.schedule.num_steps();
        Self {
            student_ts: student.grid.sample(rng, n),
            student_eps: normal_matrix(rng, n, d),
            taus: uniform_steps(rng, n, 1, t_max),
            tau_eps: normal_matrix(rng, n, d),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Discriminator cotangents on (real, fake) logits for the chosen objective.
fn disc_cotangents(objective: DiscObjective, real: &[f64], fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    match objective {
        DiscObjective::Bce => (
            real.iter().map(|&l| (sigmoid(l) - 1.0) / nr).collect(),
            fake.iter().map(|&l| sigmoid(l) / nf).collect(),
        ),
        DiscObjective::LogGap => (
            real.iter().map(|&l| -(1.0 - sigmoid(l)) / nr).collect(),
            fake.iter().map(|&l| (1.0 - sigmoid(l)) / nf).collect(),
        ),
    }
}

/// One adversarial batch: student fakes from noised real data, both classes
/// noised with shared `(tau, eps')`, losses, and the requested gradients.
pub fn gan_losses(
    disc: &Discriminator,
    student: &StudentModel,
    real_x0: ArrayView2<f64>,
    cond: Option<ArrayView2<f64>>,
    draws: &GanDraws,
    want_head: bool,
    want_student: bool,
) -> Result<(GanBatchReport, GanGrads)> {
    let sched = &student.schedule;
    let n = real_x0.nrows();
    let x_t = add_noise_batch(real_x0, draws.student_eps.view(), &draws.student_ts, sched);
    let st = student
        .denoiser
        .predict_x0_traced(x_t.view(), &draws.student_ts, cond, sched)?;
    let fake_tau = add_noise_batch(st.x0.view(), draws.tau_eps.view(), &draws.taus, sched);
    let real_tau = add_noise_batch(real_x0, draws.tau_eps.view(), &draws.taus, sched);

    let both = concatenate(Axis(0), &[real_tau.view(), fake_tau.view()]).expect("same width");
    let ts2: Vec<usize> = draws.taus.iter().chain(&draws.taus).copied().collect();
    let cond2 = cond.map(|c| concatenate(Axis(0), &[c, c]).expect("same width"));
    let tr = disc.forward(both.view(), &ts2, cond2.as_ref().map(|c| c.view()), sched)?;
    let (real_l, fake_l) = tr.logits.split_at(n);

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let log_f_real = mean(&real_l.iter().map(|&l| log_sigmoid(l)).collect::<Vec<_>>());
    let log_f_fake = mean(&fake_l.iter().map(|&l| log_sigmoid(l)).collect::<Vec<_>>());
    let mut report = GanBatchReport {
        loss_d: log_f_real - log_f_fake,
        loss_g: log_f_fake,
        real_prob: mean(&real_l.iter().map(|&l| sigmoid(l)).collect::<Vec<_>>()),
        fake_prob: mean(&fake_l.iter().map(|&l| sigmoid(l)).collect::<Vec<_>>()),
        real_logit: mean(real_l),
        fake_logit: mean(fake_l),
        grad_norm_g: 0.0,
        grad_norm_d: 0.0,
    };
    let mut grads = GanGrads {
        head: Vec::new(),
        student: Vec::new(),
    };

    if want_head {
        let (cr, cf) = disc_cotangents(disc.objective, real_l, fake_l);
        let cot: Vec<f64> = cr.into_iter().chain(cf).collect();
        let (g, _) = disc.backward(&tr, &cot, true, false)?;
        grads.head = g.expect("head gradient");
        report.grad_norm_d = norm(&grads.head);
    }
    if want_student {
        // Generator descends -E_fake[log f].
        let cot: Vec<f64> = std::iter::repeat(0.0)
            .take(n)
            .chain(fake_l.iter().map(|&l| -(1.0 - sigmoid(l)) / n as f64))
            .collect();
        let (_, dx) = disc.backward(&tr, &cot, false, true)?;
        let dx = dx.expect("input gradient");
        let mut cot_x0 = dx.slice(s![n.., ..]).to_owned();
        for (mut row, &t) in cot_x0.rows_mut().into_iter().zip(&draws.taus) {
            row *= sched.sqrt_alpha_bar(t);
        }
        let (g, _) = student.denoiser.backward_x0(&st, cot_x0.view(), sched, true)?;
        grads.student = g.expect("student gradient");
        report.grad_norm_g = norm(&grads.student);
    }
    if !report.is_finite() {
        return Err(Error::NonFinite {
            what: "adversarial batch",
            detail: format!("{report:?}"),
        });
    }
    Ok((report, grads))
}

/// One discriminator-head update on explicit real and fake clean samples.
pub fn train_head_on_samples<R: Rng + ?Sized>(
    disc: &mut Discriminator,
    adam: &mut AdamState,
    real_x0: ArrayView2<f64>,
    fake_x0: ArrayView2<f64>,
    cond: Option<ArrayView2<f64>>,
    sched: &Schedule,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let n = real_x0.nrows();
    let taus = uniform_steps(rng, n, 1, sched.num_steps());
    let eps = normal_matrix(rng, n, real_x0.ncols());
    let real_tau = add_noise_batch(real_x0, eps.view(), &taus, sched);
    let fake_tau = add_noise_batch(fake_x0, eps.view(), &taus, sched);
    let both = concatenate(Axis(0), &[real_tau.view(), fake_tau.view()]).expect("same width");
    let ts2: Vec<usize> = taus.iter().chain(&taus).copied().collect();
    let cond2 = cond.map(|c| concatenate(Axis(0), &[c, c]).expect("same width"));
    let tr = disc.forward(both.view(), &ts2, cond2.as_ref().map(|c| c.view()), sched)?;
    let (real_l, fake_l) = tr.logits.split_at(n);
    let (cr, cf) = disc_cotangents(disc.objective, real_l, fake_l);
    let cot: Vec<f64> = cr.into_iter().chain(cf).collect();
    let (g, _) = disc.backward(&tr, &cot, true, false)?;
    adam.step(disc.head.params_mut(), &g.expect("head gradient"))?;
    let mean = |v: &[f64]| v.iter().map(|&l| sigmoid(l)).sum::<f64>() / v.len() as f64;
    Ok((mean(real_l), mean(fake_l)))
}

/// Aborts when the mean fake probability stays below `threshold` for
/// `window` consecutive iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseGuard {
    pub threshold: f64,
    pub window: usize,
    pub streak: usize,
}

impl Default for CollapseGuard {
    fn default() -> Self {
        Self {
            threshold: 1e-3,
            window: 500,
            streak: 0,
        }
    }
}

impl CollapseGuard {
    pub fn observe(&mut self, iter: usize, fake_prob: f64) -> Result<()> {
        if fake_prob < self.threshold {
            self.streak += 1;
            if self.streak >= self.window {
                return Err(Error::Collapsed {
                    iter,
                    threshold: self.threshold,
                    window: self.window,
                });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

/// Settings for the adversarial phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanPhaseConfig {
    #[serde(default = "default_gan_iters")]
    pub iters: usize,
    /// Discriminator updates per generator update.
    #[serde(default = "default_ratio")]
    pub disc_updates: usize,
    /// Head-only updates before the first generator update.
    #[serde(default)]
    pub head_warmup: usize,
    #[serde(default)]
    pub discriminator: DiscriminatorSpec,
}

fn default_gan_iters() -> usize {
    4000
}
fn default_ratio() -> usize {
    5
}

impl Default for GanPhaseConfig {
    fn default() -> Self {
        Self {
            iters: default_gan_iters(),
            disc_updates: default_ratio(),
            head_warmup: 0,
            discriminator: DiscriminatorSpec::default(),
        }
    }
}

/// Mutable state of the adversarial phase, advanced one iteration at a time.
#[derive(Debug, Clone)]
pub struct GanPhase {
    pub student_adam: AdamState,
    pub head_adam: AdamState,
    pub guard: CollapseGuard,
    pub iter: usize,
}

impl GanPhase {
    pub fn new(student: &StudentModel, disc: &Discriminator, adam: AdamConfig) -> Self {
        Self {
            student_adam: AdamState::new(adam, student.denoiser.net.num_params()),
            head_adam: AdamState::new(adam, disc.head.num_params()),
            guard: CollapseGuard::default(),
            iter: 0,
        }
    }

    /// `disc_updates` head updates followed by one generator update.
    #[allow(clippy::too_many_arguments)]
    pub fn step<R: Rng + ?Sized, S: Rng + ?Sized>(
        &mut self,
        disc: &mut Discriminator,
        student: &mut StudentModel,
        mixture: &MixtureSpec,
        conditional: bool,
        cfg: &GanPhaseConfig,
        batch: usize,
        data_rng: &mut R,
        noise_rng: &mut S,
    ) -> Result<GanBatchReport> {
        let k = mixture.num_components();
        let mut grad_norm_d = 0.0;
        let head_steps = cfg.disc_updates + if self.iter == 0 { cfg.head_warmup } else { 0 };
        for _ in 0..head_steps {
            let (real, labels) = mixture.sample(batch, data_rng);
            let cond = conditional.then(|| one_hot(&labels, k));
            let draws = GanDraws::draw(student, batch, noise_rng);
            let (r, g) = gan_losses(disc, student, real.view(), cond.as_ref().map(|c| c.view()), &draws, true, false)?;
            self.head_adam.step(disc.head.params_mut(), &g.head)?;
            grad_norm_d = r.grad_norm_d;
        }
        let (real, labels) = mixture.sample(batch, data_rng);
        let cond = conditional.then(|| one_hot(&labels, k));
        let draws = GanDraws::draw(student, batch, noise_rng);
        let (mut report, g) = gan_losses(disc, student, real.view(), cond.as_ref().map(|c| c.view()), &draws, false, true)?;
        // Head gradient of the last discriminator update of this iteration.
        report.grad_norm_d = grad_norm_d;
        self.student_adam.step(student.denoiser.net.params_mut(), &g.student)?;
        self.guard.observe(self.iter, report.fake_prob)?;
        self.iter += 1;
        Ok(report)
    }
}

/// Runs `cfg.iters` adversarial iterations. Returns the per-iteration log.
#[allow(clippy::too_many_arguments)]
pub fn run_gan_phase<R: Rng + ?Sized, S: Rng + ?Sized>(
    disc: &mut Discriminator,
    student: &mut StudentModel,
    mixture: &MixtureSpec,
    conditional: bool,
    cfg: &GanPhaseConfig,
    batch: usize,
    adam: AdamConfig,
    data_rng: &mut R,
    noise_rng: &mut S,
) -> Result<Vec<GanBatchReport>> {
    let mut phase = GanPhase::new(student, disc, adam);
    (0..cfg.iters)
        .map(|_| phase.step(disc, student, mixture, conditional, cfg, batch, data_rng, noise_rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserSpec, Prediction};
    use crate::numerics::finite_diff_grad;
    use crate::rng::stream;
    use crate::student::{FewStepGrid, Renoise};

    fn setup(seed: u64) -> (Discriminator, StudentModel, MixtureSpec) {
        let sched = Schedule::linear(1000).unwrap();
        let spec = DenoiserSpec {
            hidden: vec![4, 4],
            activation: Activation::Tanh,
            prediction: Prediction::X0,
            time_freqs: 2,
        };
        let mut rng = stream(seed, "init");
        let teacher = Denoiser::new(&spec, 1, 0, &mut rng).unwrap();
        let den = Denoiser::new(&spec, 1, 0, &mut rng).unwrap();
        let student = StudentModel::new(den, FewStepGrid::uniform(4, 1000).unwrap(), sched, Renoise::Stochastic).unwrap();
        let mut disc = Discriminator::new(&teacher, &DiscriminatorSpec { head_hidden: vec![4], ..Default::default() }, &mut rng).unwrap();
        disc.head.init_uniform(&mut rng);
        let mix = MixtureSpec::diagonal(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![vec![0.1], vec![0.1]]).unwrap();
        (disc, student, mix)
    }

    #[test]
    fn zero_head_is_balanced() {
        let (_, student, _) = setup(0);
        let disc = Discriminator::new(&student.denoiser, &DiscriminatorSpec::default(), &mut stream(0, "h")).unwrap();
        let s = &student.schedule;
        for x in [-3.0, 0.0, 2.5] {
            assert_eq!(disc.disc_prob(&[x], 300, None, s).unwrap(), 0.5);
            assert_eq!(disc.density_ratio(&[x], 300, None, s).unwrap(), 1.0);
        }
        assert!(disc.disc_prob(&[0.0], 0, None, s).is_err());
    }

    #[test]
    fn clamp_keeps_probability_below_one() {
        let (mut disc, student, _) = setup(1);
        let n = disc.head.num_params();
        // push the output bias far beyond the clamp
        disc.head.params_mut()[n - 1] = 100.0;
        let p = disc.disc_prob(&[0.3], 10, None, &student.schedule).unwrap();
        assert!(p < 1.0);
        let r = disc.density_ratio(&[0.3], 10, None, &student.schedule).unwrap();
        assert!((r - 15f64.exp()).abs() < 1e-6 * r);
    }

    #[test]
    fn ratio_identity_pointwise() {
        let (disc, student, _) = setup(2);
        for x in [-2.0, -0.5, 0.0, 1.5] {
            for t in [1, 250, 999] {
                let f = disc.disc_prob(&[x], t, None, &student.schedule).unwrap();
                let r = disc.density_ratio(&[x], t, None, &student.schedule).unwrap();
                assert!((r * (1.0 - f) - f).abs() < 1e-12);
            }
        }
        let half = 0.8f64 / (1.0 - 0.8);
        assert!((half - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_head_generator_loss_is_log_half() {
        let (_, student, mix) = setup(3);
        let disc = Discriminator::new(&student.denoiser, &DiscriminatorSpec::default(), &mut stream(0, "h")).unwrap();
        let (real, _) = mix.sample(16, &mut stream(3, "d"));
        let draws = GanDraws::draw(&student, 16, &mut stream(3, "n"));
        let (rep, _) = gan_losses(&disc, &student, real.view(), None, &draws, true, true).unwrap();
        assert!((rep.loss_g - 0.5f64.ln()).abs() < 1e-12);
        assert!(rep.loss_d.abs() < 1e-12);
    }

    #[test]
    fn identical_batches_cancel() {
        // With the student reproducing the real batch exactly, both classes see
        // the same noised inputs and the min-max loss vanishes.
        let (disc, mut student, mix) = setup(4);
        let mut net = DenseNet::new(
            student.denoiser.net.widths().to_vec(),
            Activation::Tanh,
            *student.denoiser.net.layout(),
        )
        .unwrap();
        net.zero_output_layer();
        student.denoiser.net = net;
        let real = ndarray::Array2::zeros((32, 1));
        let draws = GanDraws::draw(&student, 32, &mut stream(4, "n"));
        let (rep, _) = gan_losses(&disc, &student, real.view(), None, &draws, false, false).unwrap();
        assert!(rep.loss_d.abs() < 1e-12);
        let _ = mix;
    }

    #[test]
    fn generator_gradient_matches_fd() {
        let (disc, student, mix) = setup(5);
        let (real, _) = mix.sample(8, &mut stream(5, "d"));
        let draws = GanDraws::draw(&student, 8, &mut stream(5, "n"));
        let (_, g) = gan_losses(&disc, &student, real.view(), None, &draws, false, true).unwrap();
        let f = |p: &[f64]| {
            let mut s = student.clone();
            s.denoiser.net.set_params(p).unwrap();
            -gan_losses(&disc, &s, real.view(), None, &draws, false, false).unwrap().0.loss_g
        };
        let fd = finite_diff_grad(f, student.denoiser.net.params(), 1e-6);
        let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (a, b) in g.student.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-3 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn head_gradient_matches_fd_for_both_objectives() {
        for objective in [DiscObjective::Bce, DiscObjective::LogGap] {
            let (mut disc, student, mix) = setup(6);
            disc.objective = objective;
            let (real, _) = mix.sample(8, &mut stream(6, "d"));
            let draws = GanDraws::draw(&student, 8, &mut stream(6, "n"));
            let (_, g) = gan_losses(&disc, &student, real.view(), None, &draws, true, false).unwrap();
            let f = |p: &[f64]| {
                let mut dd = disc.clone();
                dd.head.set_params(p).unwrap();
                let (rep, _) = gan_losses(&dd, &student, real.view(), None, &draws, false, false).unwrap();
                match objective {
                    DiscObjective::LogGap => -rep.loss_d,
                    DiscObjective::Bce => {
                        let x_t = add_noise_batch(real.view(), draws.student_eps.view(), &draws.student_ts, &student.schedule);
                        let fake = student.predict(x_t.view(), &draws.student_ts, None).unwrap();
                        let ft = add_noise_batch(fake.view(), draws.tau_eps.view(), &draws.taus, &student.schedule);
                        let rt = add_noise_batch(real.view(), draws.tau_eps.view(), &draws.taus, &student.schedule);
                        let lr = dd.log_ratio_batch(rt.view(), &draws.taus, None, &student.schedule).unwrap();
                        let lf = dd.log_ratio_batch(ft.view(), &draws.taus, None, &student.schedule).unwrap();
                        let n = lr.len() as f64;
                        -lr.iter().map(|&l| log_sigmoid(l)).sum::<f64>() / n
                            - lf.iter().map(|&l| log_sigmoid(-l)).sum::<f64>() / n
                    }
                }
            };
            let fd = finite_diff_grad(f, disc.head.params(), 1e-6);
            for (a, b) in g.head.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-7, "{objective:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn swapping_labels_negates_log_gap_loss_on_fixed_batch() {
        let (disc, student, mix) = setup(7);
        let (real, _) = mix.sample(8, &mut stream(7, "d"));
        let draws = GanDraws::draw(&student, 8, &mut stream(7, "n"));
        let x_t = add_noise_batch(real.view(), draws.student_eps.view(), &draws.student_ts, &student.schedule);
        let fake = student.predict(x_t.view(), &draws.student_ts, None).unwrap();
        let s = &student.schedule;
        let noised = |x: &Array2<f64>| add_noise_batch(x.view(), draws.tau_eps.view(), &draws.taus, s);
        let lr = disc.log_ratio_batch(noised(&real).view(), &draws.taus, None, s).unwrap();
        let lf = disc.log_ratio_batch(noised(&fake).view(), &draws.taus, None, s).unwrap();
        let m = |v: &[f64]| v.iter().map(|&l| log_sigmoid(l)).sum::<f64>() / v.len() as f64;
        let (rep, _) = gan_losses(&disc, &student, real.view(), None, &draws, false, false).unwrap();
        assert!((rep.loss_d - (m(&lr) - m(&lf))).abs() < 1e-12);
        assert!((rep.loss_g - m(&lf)).abs() < 1e-12);
        let swapped = m(&lf) - m(&lr);
        assert!((swapped + rep.loss_d).abs() < 1e-12);
    }

    #[test]
    fn phase_keeps_backbone_frozen_and_updates_head() {
        let (mut disc, mut student, mix) = setup(8);
        let backbone_before = disc.backbone().net.params().to_vec();
        let head_before = disc.head.params().to_vec();
        let student_before = student.denoiser.net.params().to_vec();
        let cfg = GanPhaseConfig {
            iters: 3,
            disc_updates: 2,
            ..Default::default()
        };
        let log = run_gan_phase(&mut disc, &mut student, &mix, false, &cfg, 8, AdamConfig::with_lr(1e-3), &mut stream(8, "d"), &mut stream(8, "n")).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(disc.backbone().net.params(), &backbone_before[..]);
        assert_ne!(disc.head.params(), &head_before[..]);
        assert_ne!(student.denoiser.net.params(), &student_before[..]);
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let (mut disc, mut student, mix) = setup(9);
        let (d0, s0) = (disc.clone(), student.clone());
        let cfg = GanPhaseConfig {
            iters: 0,
            ..Default::default()
        };
        let log = run_gan_phase(&mut disc, &mut student, &mix, false, &cfg, 8, AdamConfig::default(), &mut stream(9, "d"), &mut stream(9, "n")).unwrap();
        assert!(log.is_empty());
        assert_eq!(disc, d0);
        assert_eq!(student, s0);
    }

    #[test]
    fn collapse_guard() {
        let mut g = CollapseGuard {
            window: 3,
            ..Default::default()
        };
        g.observe(0, 1e-4).unwrap();
        g.observe(1, 1e-4).unwrap();
        assert!(g.observe(2, 1e-4).is_err());
        let mut g = CollapseGuard::default();
        for i in 0..1000 {
            g.observe(i, if i % 400 == 0 { 0.5 } else { 1e-4 }).unwrap();
        }
    }

    #[test]
    fn log_sigmoid_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!((log_sigmoid(-40.0) + 40.0).abs() < 1e-12);
        assert!(log_sigmoid(40.0).abs() < 1e-15);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }
}
