//! End-to-end training: teacher preparation, adversarial initialisation,
//! distribution matching, evaluation, checkpoints and ablations.

mod ablation;
mod checkpoint;
mod config;

pub use ablation::{run_ablation_matrix, AblationRow, AblationRun, AblationTable, RowSpec};
pub use checkpoint::{blob_checksum, read_f64_blob, write_f64_blob};
pub use config::{
    apply_override, Ablation, ConfigFormat, EvalConfig, LoadedConfig, MixtureConfig, OptimConfig, RealScoreKind, RunConfig, ScoreConfig,
    Seeds, StudentConfig, TeacherConfig,
};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adversarial::{Discriminator, GanBatchReport, GanPhase};
use crate::dmd::{DmdPhase, DmdRow, ScoreProvider, ScoreSource};
use crate::error::{Error, Result};
use crate::eval::{distance_report, mode_coverage, score_error_map, speedup_report, CoverageReport, DistanceReport, GridSpec, SpeedupReport};
use crate::numerics::AdamConfig;
use crate::rng::{normal_matrix, stream, StreamRng};
use crate::schedule::Schedule;
use crate::student::{pretrain_student, StudentModel};
use crate::teacher::{moving_average, train_teacher_denoiser, DenoiseTraining, MixtureSpec, TeacherBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Gan,
    Dmd,
    Done,
}

/// Run-length record of which phase every optimizer step belonged to.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseStamps(pub Vec<(Stage, usize)>);

impl PhaseStamps {
    /// Record one step; a step of an earlier phase after a later one is a
    /// logic error.
    pub fn push(&mut self, stage: Stage) -> Result<()> {
        match self.0.last_mut() {
            Some((s, n)) if *s == stage => *n += 1,
            Some((s, _)) if *s > stage => {
                return Err(Error::InvalidArgument(format!("{stage:?} step after {s:?} step")));
            }
            _ => self.0.push((stage, 1)),
        }
        Ok(())
    }

    pub fn count(&self, stage: Stage) -> usize {
        self.0.iter().filter(|(s, _)| *s == stage).map(|(_, n)| n).sum()
    }
}

/// Trained teachers keyed by everything that determines them.
#[derive(Debug, Default)]
pub struct TeacherCache {
    memory: HashMap<String, (TeacherBundle, Vec<f64>)>,
    dir: Option<PathBuf>,
}

impl TeacherCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Additionally persist teachers under `dir`.
    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            memory: HashMap::new(),
            dir: Some(dir.into()),
        }
    }

    fn key(cfg: &RunConfig) -> String {
        serde_json::json!({
            "mixture": cfg.mixture,
            "schedule": cfg.schedule,
            "teacher": cfg.teacher,
            "seed": cfg.seeds.teacher,
        })
        .to_string()
    }

    /// The trained teacher for `cfg`, its training losses, and whether it came
    /// from the cache.
    pub fn get(&mut self, cfg: &RunConfig) -> Result<(TeacherBundle, Vec<f64>, bool)> {
        let key = Self::key(cfg);
        if let Some((t, l)) = self.memory.get(&key) {
            return Ok((t.clone(), l.clone(), true));
        }
        let mut bundle = blank_teacher(cfg)?;
        let file = self.dir.as_ref().map(|d| d.join(format!("teacher-{:016x}.bin", blob_checksum(key.as_bytes()))));
        if let Some(f) = file.as_ref().filter(|f| f.exists()) {
            let params = read_f64_blob(f, "teacher-cache", bundle.denoiser.net.num_params())?;
            bundle.denoiser.net.set_params(&params)?;
            let losses_path = f.with_extension("losses.json");
            let losses: Vec<f64> = match std::fs::read(&losses_path) {
                Ok(b) => serde_json::from_slice(&b)?,
                Err(_) => Vec::new(),
            };
            self.memory.insert(key, (bundle.clone(), losses.clone()));
            return Ok((bundle, losses, true));
        }
        let settings = DenoiseTraining {
            iters: cfg.teacher.iters,
            batch: cfg.teacher.batch,
            adam: AdamConfig::with_lr(cfg.teacher.lr),
        };
        let losses = train_teacher_denoiser(&mut bundle, settings, &mut stream(cfg.seeds.teacher, "teacher-train"))?;
        if let Some(f) = &file {
            std::fs::create_dir_all(f.parent().expect("cache file has a parent")).map_err(|e| Error::io(f, e))?;
            write_f64_blob(f, bundle.denoiser.net.params())?;
            let lp = f.with_extension("losses.json");
            std::fs::write(&lp, serde_json::to_vec(&losses)?).map_err(|e| Error::io(&lp, e))?;
        }
        self.memory.insert(key, (bundle.clone(), losses.clone()));
        Ok((bundle, losses, false))
    }
}

/// Untrained teacher with the configured architecture.
fn blank_teacher(cfg: &RunConfig) -> Result<TeacherBundle> {
    let schedule = Schedule::new(cfg.schedule.clone())?;
    let mixture = cfg.mixture.build()?;
    TeacherBundle::new(
        mixture,
        &cfg.teacher.denoiser,
        schedule,
        cfg.teacher.conditional,
        &mut stream(cfg.seeds.teacher, "teacher-init"),
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub teacher_secs: f64,
    pub pretrain_secs: f64,
    pub gan_secs: f64,
    pub dmd_secs: f64,
    pub eval_secs: f64,
}

/// All mutable training state of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub teacher: TeacherBundle,
    pub student: StudentModel,
    pub disc: Discriminator,
    pub scores: ScoreProvider,
    pub gan: GanPhase,
    pub dmd: DmdPhase,
    pub data_rng: StreamRng,
    pub noise_rng: StreamRng,
    pub stamps: PhaseStamps,
    pub teacher_log: Vec<f64>,
    pub pretrain_log: Vec<f64>,
    pub gan_log: Vec<GanBatchReport>,
    pub dmd_log: Vec<DmdRow>,
    pub timings: Timings,
    pub teacher_cached: bool,
}

impl Trainer {
    pub fn new(config: RunConfig, cache: &mut TeacherCache) -> Result<Self> {
        config.validate()?;
        let t0 = Instant::now();
        let (teacher, teacher_log, cached) = cache.get(&config)?;
        let teacher_secs = t0.elapsed().as_secs_f64();
        let mut trainer = Self::assemble(config, teacher)?;
        trainer.teacher_log = teacher_log;
        trainer.teacher_cached = cached;
        trainer.timings.teacher_secs = teacher_secs;
        if trainer.config.student.pretrain_iters > 0 {
            let t0 = Instant::now();
            let c = &trainer.config;
            trainer.pretrain_log = pretrain_student(
                &mut trainer.student,
                &trainer.teacher,
                c.student.pretrain_iters,
                c.optim.batch,
                c.optim.adam(),
                &mut stream(c.seeds.train, "pretrain"),
            )?;
            trainer.timings.pretrain_secs = t0.elapsed().as_secs_f64();
        }
        Ok(trainer)
    }

    /// Fresh training state around an already trained teacher.
    pub fn assemble(config: RunConfig, teacher: TeacherBundle) -> Result<Self> {
        let schedule = teacher.schedule.clone();
        let grid = config.student.build_grid(schedule.num_steps())?;
        let student = StudentModel::new(teacher.denoiser.clone(), grid, schedule, config.student.renoise)?;
        let mut init = stream(config.seeds.train, "init");
        let disc = Discriminator::new(&teacher.denoiser, &config.gan.discriminator, &mut init)?;
        let real = match config.score.real {
            RealScoreKind::Analytic => ScoreSource::analytic(teacher.mixture.clone()),
            RealScoreKind::Neural => ScoreSource::Neural(teacher.denoiser.clone()),
        };
        let scores = ScoreProvider {
            real,
            fake: ScoreSource::Neural(teacher.denoiser.clone()),
        };
        let adam = config.optim.adam();
        let gan = GanPhase::new(&student, &disc, adam);
        let ScoreSource::Neural(fake) = &scores.fake else { unreachable!() };
        let dmd = DmdPhase::new(&student, fake, &disc, adam);
        Ok(Self {
            data_rng: stream(config.seeds.train, "data"),
            noise_rng: stream(config.seeds.train, "noise"),
            config,
            teacher,
            student,
            disc,
            scores,
            gan,
            dmd,
            stamps: PhaseStamps::default(),
            teacher_log: Vec::new(),
            pretrain_log: Vec::new(),
            gan_log: Vec::new(),
            dmd_log: Vec::new(),
            timings: Timings::default(),
            teacher_cached: false,
        })
    }

    pub fn mixture(&self) -> &MixtureSpec {
        &self.teacher.mixture
    }

    fn gan_target(&self) -> usize {
        if self.config.ablation.gan_init {
            self.config.gan.iters
        } else {
            0
        }
    }

    fn dmd_target(&self) -> usize {
        if self.config.ablation.dmd {
            self.config.dmd.iters
        } else {
            0
        }
    }

    pub fn stage(&self) -> Stage {
        if self.gan.iter < self.gan_target() {
            Stage::Gan
        } else if self.dmd.iter < self.dmd_target() {
            Stage::Dmd
        } else {
            Stage::Done
        }
    }

    /// Total optimizer iterations executed so far.
    pub fn iterations(&self) -> usize {
        self.gan.iter + self.dmd.iter
    }

    /// One iteration of the current phase. Returns the phase that ran.
    pub fn step(&mut self) -> Result<Stage> {
        let stage = self.stage();
        let c = &self.config;
        let batch = c.optim.batch;
        let conditional = c.teacher.conditional;
        match stage {
            Stage::Gan => {
                let t0 = Instant::now();
                let row = self.gan.step(
                    &mut self.disc,
                    &mut self.student,
                    &self.teacher.mixture,
                    conditional,
                    &c.gan,
                    batch,
                    &mut self.data_rng,
                    &mut self.noise_rng,
                )?;
                self.gan_log.push(row);
                self.timings.gan_secs += t0.elapsed().as_secs_f64();
            }
            Stage::Dmd => {
                let t0 = Instant::now();
                let row = self.dmd.step(
                    &mut self.student,
                    &mut self.scores,
                    &mut self.disc,
                    &self.teacher.mixture,
                    conditional,
                    &c.dmd,
                    c.ablation.soften,
                    batch,
                    &mut self.data_rng,
                    &mut self.noise_rng,
                )?;
                self.dmd_log.push(row);
                self.timings.dmd_secs += t0.elapsed().as_secs_f64();
            }
            Stage::Done => return Ok(Stage::Done),
        }
        self.stamps.push(stage)?;
        Ok(stage)
    }

    /// Run up to `n` iterations, stopping early when training is complete.
    pub fn advance(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            if self.step()? == Stage::Done {
                break;
            }
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while self.step()? != Stage::Done {}
        Ok(())
    }

    /// Few-step student samples for evaluation, from the eval stream only.
    pub fn student_samples(&self, n: usize, seed: u64) -> Result<(Array2<f64>, usize)> {
        let (_, labels) = self.mixture().sample(n, &mut stream(seed, "eval-labels"));
        let cond = self.teacher.condition_rows(&labels);
        let z = normal_matrix(&mut stream(seed, "eval-latent"), n, self.mixture().dim());
        let (x, trace) = self
            .student
            .generate_few_step(z.view(), cond.as_ref().map(|c| c.view()), &mut stream(seed, "eval-renoise"))?;
        Ok((x, trace.len()))
    }

    /// Coverage and distances of student and baseline teacher samples.
    pub fn evaluate(&self) -> Result<EvalBlock> {
        let c = &self.config.eval;
        let seed = self.config.seeds.eval;
        let n = c.samples;
        let mix = self.mixture();
        let (reference, _) = mix.sample(n, &mut stream(seed, "eval-reference"));

        let t0 = Instant::now();
        let (student_x, student_evals) = self.student_samples(n, seed)?;
        let wall_student = t0.elapsed().as_secs_f64();

        let (_, labels) = mix.sample(n, &mut stream(seed, "eval-labels"));
        let cond = self.teacher.condition_rows(&labels);
        let z = normal_matrix(&mut stream(seed, "eval-latent"), n, mix.dim());
        let t0 = Instant::now();
        let (teacher_x, teacher_evals) = self.teacher.sample_multistep(c.teacher_steps, z.view(), cond.as_ref().map(|c| c.view()))?;
        let wall_teacher = t0.elapsed().as_secs_f64();

        Ok(EvalBlock {
            student: SampleQuality {
                coverage: mode_coverage(student_x.view(), mix, c.radius, c.min_hits)?,
                distances: distance_report(student_x.view(), reference.view(), c.energy_cap, seed)?,
                evals: student_evals,
            },
            teacher: SampleQuality {
                coverage: mode_coverage(teacher_x.view(), mix, c.radius, c.min_hits)?,
                distances: distance_report(teacher_x.view(), reference.view(), c.energy_cap, seed)?,
                evals: teacher_evals,
            },
            speedup: speedup_report(student_evals, teacher_evals, wall_student, wall_teacher)?,
        })
    }

    /// Mean teacher score error against the analytic score at a few noise
    /// levels, on a grid spanning the data.
    pub fn teacher_score_errors(&self) -> Result<Vec<(usize, f64)>> {
        let t_max = self.teacher.schedule.num_steps();
        let src = ScoreSource::Neural(self.teacher.denoiser.clone());
        let span = self
            .mixture()
            .means()
            .iter()
            .flatten()
            .fold(1.0f64, |a, v| a.max(v.abs()))
            + 0.5;
        let grid = GridSpec {
            lo: -span,
            hi: span,
            per_axis: if self.mixture().dim() == 1 { 101 } else { 21 },
        };
        if self.teacher.conditional {
            return Ok(Vec::new());
        }
        [t_max / 20, t_max / 4, t_max / 2]
            .into_iter()
            .filter(|&t| t >= 1)
            .map(|t| Ok((t, score_error_map(&src, self.mixture(), grid, t, &self.teacher.schedule)?.mean)))
            .collect()
    }

    pub fn gan_csv(&self) -> String {
        let mut s = String::from("iter,loss_D,loss_G,real_prob,fake_prob,grad_norm_G,grad_norm_D,real_logit,fake_logit\n");
        for (i, r) in self.gan_log.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{},{},{},{}",
                r.loss_d, r.loss_g, r.real_prob, r.fake_prob, r.grad_norm_g, r.grad_norm_d, r.real_logit, r.fake_logit
            );
        }
        s
    }

    pub fn dmd_csv(&self) -> String {
        let mode = if self.config.ablation.soften {
            self.config.dmd.weight_mode.name()
        } else {
            "plain"
        };
        let mut s = String::from("iter,mean_abs_cotangent,mean_r,mean_w,fake_score_loss,weight_mode,cotangent_rms\n");
        for r in &self.dmd_log {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{mode},{}",
                r.iter, r.mean_abs_cotangent, r.mean_ratio, r.mean_weight, r.fake_score_loss, r.cotangent_rms
            );
        }
        s
    }

    pub fn teacher_csv(&self) -> String {
        let mut s = String::from("iter,loss\n");
        for (i, l) in self.teacher_log.iter().enumerate() {
            let _ = writeln!(s, "{i},{l}");
        }
        s
    }

    fn write_logs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for (name, body) in [
            ("teacher.csv", self.teacher_csv()),
            ("gan.csv", self.gan_csv()),
            ("dmd.csv", self.dmd_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            out.push(p);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleQuality {
    pub coverage: CoverageReport,
    pub distances: DistanceReport,
    pub evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBlock {
    pub student: SampleQuality,
    pub teacher: SampleQuality,
    pub speedup: SpeedupReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub iters: usize,
    pub cached: bool,
    /// Mean of the last 500 training losses.
    pub final_loss: Option<f64>,
    /// `(t, mean score error)` against the analytic mixture score.
    pub score_errors: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub gan_iters: usize,
    pub dmd_iters: usize,
    pub stamps: PhaseStamps,
    pub last_gan: Option<GanBatchReport>,
    pub last_dmd: Option<DmdRow>,
}

/// Outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// The configuration text exactly as supplied.
    pub config_echo: String,
    pub overrides: Vec<String>,
    pub resolved_config: RunConfig,
    pub teacher: TeacherSummary,
    pub phases: PhaseSummary,
    pub eval: EvalBlock,
    pub timings: Timings,
    pub artifacts: Vec<PathBuf>,
}

impl RunReport {
    pub fn from_trainer(trainer: &Trainer, loaded: &LoadedConfig, eval: EvalBlock) -> Result<Self> {
        let tl = &trainer.teacher_log;
        let final_loss = (!tl.is_empty()).then(|| {
            let w = tl.len().min(500);
            moving_average(tl, w).last().copied().unwrap_or(f64::NAN)
        });
        Ok(Self {
            config_echo: loaded.source_text.clone(),
            overrides: loaded.overrides.clone(),
            resolved_config: trainer.config.clone(),
            teacher: TeacherSummary {
                iters: trainer.config.teacher.iters,
                cached: trainer.teacher_cached,
                final_loss,
                score_errors: trainer.teacher_score_errors()?,
            },
            phases: PhaseSummary {
                gan_iters: trainer.gan.iter,
                dmd_iters: trainer.dmd.iter,
                stamps: trainer.stamps.clone(),
                last_gan: trainer.gan_log.last().copied(),
                last_dmd: trainer.dmd_log.last().copied(),
            },
            eval,
            timings: trainer.timings,
            artifacts: Vec::new(),
        })
    }
}

/// Train and evaluate one configuration. With `out`, the resolved config is
/// written before training, and logs, a final checkpoint, samples and
/// `report.json` after it; a failed run still leaves its partial logs.
pub fn run_experiment(loaded: &LoadedConfig, cache: &mut TeacherCache, out: Option<&Path>) -> Result<RunReport> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.resolved.toml");
        std::fs::write(&p, loaded.config.to_toml()?).map_err(|e| Error::io(&p, e))?;
    }
    let mut trainer = Trainer::new(loaded.config.clone(), cache)?;
    log::info!("teacher ready in {:.1}s (cached: {})", trainer.timings.teacher_secs, trainer.teacher_cached);
    let total = trainer.gan_target() + trainer.dmd_target();
    let mut result = Ok(());
    while trainer.stage() != Stage::Done {
        if let Err(e) = trainer.step() {
            result = Err(e);
            break;
        }
        let i = trainer.iterations();
        if i % 500 == 0 {
            log::info!("iteration {i}/{total} ({:?})", trainer.stage());
        }
    }
    if let Err(e) = result {
        if let Some(dir) = out {
            trainer.write_logs(dir)?;
        }
        return Err(e);
    }
    let t0 = Instant::now();
    let eval = trainer.evaluate()?;
    trainer.timings.eval_secs = t0.elapsed().as_secs_f64();
    let mut report = RunReport::from_trainer(&trainer, loaded, eval)?;
    if let Some(dir) = out {
        report.artifacts = trainer.write_logs(dir)?;
        let ck = dir.join("checkpoint");
        trainer.save_checkpoint(&ck)?;
        report.artifacts.push(ck);
        let (x, _) = trainer.student_samples(loaded.config.eval.samples, loaded.config.seeds.eval)?;
        let sp = dir.join("samples.csv");
        std::fs::write(&sp, samples_csv(&x, loaded.config.seeds.eval)).map_err(|e| Error::io(&sp, e))?;
        report.artifacts.push(sp);
        let rp = dir.join("report.json");
        std::fs::write(&rp, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&rp, e))?;
    }
    Ok(report)
}

/// CSV with columns `seed, step, dim_0, ...`; `step` is the sample index.
pub fn samples_csv(x: &Array2<f64>, seed: u64) -> String {
    let mut s = String::from("seed,step");
    for j in 0..x.ncols() {
        let _ = write!(s, ",dim_{j}");
    }
    s.push('\n');
    for (i, row) in x.rows().into_iter().enumerate() {
        let _ = write!(s, "{seed},{i}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}
