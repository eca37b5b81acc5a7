//! Run configuration: TOML or JSON, every field defaulted, with dotted-key
//! overrides applied before validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversarial::GanPhaseConfig;
use crate::denoiser::DenoiserSpec;
use crate::dmd::DmdPhaseConfig;
use crate::error::{Error, Result};
use crate::numerics::AdamConfig;
use crate::schedule::{Schedule, ScheduleConfig};
use crate::student::{FewStepGrid, Renoise};
use crate::teacher::MixtureSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MixtureConfig {
    /// Components evenly spaced on a circle. `weights` are relative and get
    /// normalised; omitted means equal weights.
    Ring {
        #[serde(default = "default_modes")]
        modes: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    Explicit {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        #[serde(default)]
        cov_diagonals: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        covariances: Option<Vec<Vec<Vec<f64>>>>,
    },
}

fn default_modes() -> usize {
    8
}
fn default_radius() -> f64 {
    2.0
}
fn default_sigma() -> f64 {
    0.1
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self::Ring {
            modes: default_modes(),
            radius: default_radius(),
            sigma: default_sigma(),
            weights: None,
        }
    }
}

impl MixtureConfig {
    pub fn build(&self) -> Result<MixtureSpec> {
        match self {
            Self::Ring {
                modes,
                radius,
                sigma,
                weights,
            } => {
                if *modes == 0 {
                    return Err(Error::config("mixture.modes", "need at least one mode"));
                }
                let weights = match weights {
                    None => None,
                    Some(w) => {
                        if w.len() != *modes {
                            return Err(Error::config("mixture.weights", format!("expected {modes} weights, got {}", w.len())));
                        }
                        let total: f64 = w.iter().sum();
                        if !(total > 0.0) || w.iter().any(|v| !(*v >= 0.0)) {
                            return Err(Error::config("mixture.weights", "weights must be nonnegative with a positive sum"));
                        }
                        Some(w.iter().map(|v| v / total).collect())
                    }
                };
                MixtureSpec::ring(*modes, *radius, *sigma, weights)
            }
            Self::Explicit {
                weights,
                means,
                cov_diagonals,
                covariances,
            } => match (cov_diagonals, covariances) {
                (Some(d), None) => MixtureSpec::diagonal(weights.clone(), means.clone(), d.clone()),
                (None, Some(c)) => MixtureSpec::full(weights.clone(), means.clone(), c.clone()),
                _ => Err(Error::config("mixture", "exactly one of cov_diagonals or covariances is required")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default)]
    pub denoiser: DenoiserSpec,
    #[serde(default = "default_teacher_iters")]
    pub iters: usize,
    #[serde(default = "default_teacher_batch")]
    pub batch: usize,
    #[serde(default = "default_teacher_lr")]
    pub lr: f64,
    /// Feed one-hot component labels to every network.
    #[serde(default)]
    pub conditional: bool,
}

fn default_teacher_iters() -> usize {
    20_000
}
fn default_teacher_batch() -> usize {
    256
}
fn default_teacher_lr() -> f64 {
    1e-3
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserSpec::default(),
            iters: default_teacher_iters(),
            batch: default_teacher_batch(),
            lr: default_teacher_lr(),
            conditional: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    /// Number of denoising steps when `grid` is not given.
    #[serde(default = "default_q")]
    pub q: usize,
    /// Explicit grid `{0, t_1, ..., t_Q}`.
    #[serde(default)]
    pub grid: Option<Vec<usize>>,
    #[serde(default = "default_renoise")]
    pub renoise: Renoise,
    /// Denoising warm-up on grid timesteps after copying the teacher.
    #[serde(default)]
    pub pretrain_iters: usize,
}

fn default_q() -> usize {
    4
}
fn default_renoise() -> Renoise {
    Renoise::Stochastic
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            q: default_q(),
            grid: None,
            renoise: default_renoise(),
            pretrain_iters: 0,
        }
    }
}

impl StudentConfig {
    pub fn build_grid(&self, num_steps: usize) -> Result<FewStepGrid> {
        match &self.grid {
            Some(g) => FewStepGrid::new(g.clone(), num_steps),
            None => FewStepGrid::uniform(self.q, num_steps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
}

fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    5e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch: default_batch(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RealScoreKind {
    /// Closed-form mixture score.
    Analytic,
    /// Score implied by the trained teacher denoiser.
    Neural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    #[serde(default = "default_real_score")]
    pub real: RealScoreKind,
}

fn default_real_score() -> RealScoreKind {
    RealScoreKind::Neural
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { real: default_real_score() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default = "yes")]
    pub gan_init: bool,
    #[serde(default = "yes")]
    pub dmd: bool,
    #[serde(default = "yes")]
    pub soften: bool,
}

fn yes() -> bool {
    true
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            gan_init: true,
            dmd: true,
            soften: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Parameter init, data and noise streams.
    #[serde(default)]
    pub train: u64,
    #[serde(default)]
    pub teacher: u64,
    #[serde(default = "default_eval_seed")]
    pub eval: u64,
}

fn default_eval_seed() -> u64 {
    1
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            train: 0,
            teacher: 0,
            eval: default_eval_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    #[serde(default = "default_eval_radius")]
    pub radius: f64,
    #[serde(default)]
    pub min_hits: Option<usize>,
    /// Subsample cap for the quadratic energy distance.
    #[serde(default)]
    pub energy_cap: Option<usize>,
    /// Steps of the baseline multistep sampler.
    #[serde(default = "default_teacher_steps")]
    pub teacher_steps: usize,
}

fn default_eval_samples() -> usize {
    10_000
}
fn default_eval_radius() -> f64 {
    crate::eval::DEFAULT_RADIUS
}
fn default_teacher_steps() -> usize {
    50
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: default_eval_samples(),
            radius: default_eval_radius(),
            min_hits: None,
            energy_cap: None,
            teacher_steps: default_teacher_steps(),
        }
    }
}

/// Everything a run needs. All sections are optional in files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mixture: MixtureConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub gan: GanPhaseConfig,
    #[serde(default)]
    pub dmd: DmdPhaseConfig,
    #[serde(default)]
    pub score: ScoreConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// A parsed configuration together with the exact text it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source_text: String,
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

impl ConfigFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::Json,
            _ => Self::Toml,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, ConfigFormat::from_path(path), overrides)
    }

    pub fn parse(text: &str, format: ConfigFormat, overrides: &[String]) -> Result<LoadedConfig> {
        let mut value: serde_json::Value = match format {
            ConfigFormat::Toml => {
                let v: toml::Value = toml::from_str(text)?;
                serde_json::to_value(v)?
            }
            ConfigFormat::Json => serde_json::from_str(text)?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
        config.validate()?;
        Ok(LoadedConfig {
            config,
            source_text: text.to_string(),
            overrides: overrides.to_vec(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let sched = Schedule::new(self.schedule.clone())?;
        let mixture = self.mixture.build()?;
        self.student.build_grid(sched.num_steps())?;
        if self.optim.batch == 0 {
            return Err(Error::config("optim.batch", "must be at least 1"));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::config("optim.lr", "must be positive"));
        }
        if !(self.teacher.lr > 0.0 && self.teacher.lr.is_finite()) {
            return Err(Error::config("teacher.lr", "must be positive"));
        }
        if self.teacher.batch == 0 {
            return Err(Error::config("teacher.batch", "must be at least 1"));
        }
        if self.teacher.denoiser.hidden.is_empty() || self.teacher.denoiser.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("teacher.denoiser.hidden", "need at least one hidden layer of positive width"));
        }
        if self.eval.samples == 0 {
            return Err(Error::config("eval.samples", "must be at least 1"));
        }
        if self.eval.teacher_steps == 0 || self.eval.teacher_steps > sched.num_steps() {
            return Err(Error::config("eval.teacher_steps", format!("must lie in [1, {}]", sched.num_steps())));
        }
        if self.teacher.conditional && mixture.num_components() < 2 {
            return Err(Error::config("teacher.conditional", "conditioning needs at least two components"));
        }
        Ok(())
    }
}

/// Apply `a.b.c=value`. The value is read as JSON when it parses (numbers,
/// booleans, arrays) and as a bare string otherwise.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key.path=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(spec, "empty key segment"));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = serde_json::Value::Object(Default::default());
            } else {
                return Err(Error::config(key, format!("`{}` is not a table", parts[..i].join("."))));
            }
        }
        let map = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert(serde_json::Value::Null);
    }
    unreachable!("loop returns on the last segment")
}
