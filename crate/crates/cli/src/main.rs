use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use distill_core::pipeline::{run_ablation_matrix, run_experiment, samples_csv, RowSpec, RunConfig, RunReport, TeacherCache, Trainer};
use distill_core::{eval, verify, Error};

/// Few-step distillation experiments on Gaussian mixtures.
#[derive(Parser)]
#[command(name = "distill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run(RunArgs),
    /// Run the ablation matrix over several seeds.
    Ablate(AblateArgs),
    /// Run an oracle suite and print a pass/fail table.
    Verify {
        /// scores, gradients, proportionality, ratio, quadrature or all
        suite: String,
    },
    /// Draw few-step samples from a checkpoint.
    Sample(SampleArgs),
    /// Summarise a finished run directory.
    Report {
        /// Directory holding report.json
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML or JSON configuration file
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; defaults to a fresh directory under $DISTILL_OUT_ROOT
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Dotted-key override, e.g. dmd.weight_mode=inverse-r (repeatable)
    #[arg(short = 's', long = "set")]
    overrides: Vec<String>,
    /// Directory for cached teachers
    #[arg(long)]
    teacher_cache: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Override the training seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated training seeds (at least three)
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint directory written by `run`
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(short, long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for samples.csv and the reports
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// Exit code policy: 2 for usage, config and restore problems, 3 when
/// training itself aborted.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(e) if e.is_training_abort() => 3,
            _ => 2,
        };
        Self { code, error }
    }
}

const OUT_ROOT_VAR: &str = "DISTILL_OUT_ROOT";

fn fresh_dir(explicit: Option<&Path>, prefix: &str) -> anyhow::Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            let stamp = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH)?.as_millis();
            root.join(format!("{prefix}-{stamp}"))
        }
    };
    if dir.exists() && std::fs::read_dir(&dir)?.next().is_some() {
        anyhow::bail!("output directory {} already holds results; choose a fresh one", dir.display());
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_error_file(dir: Option<&Path>, f: &Failure) {
    let Some(dir) = dir.filter(|d| d.is_dir()) else { return };
    let body = serde_json::json!({
        "exit_code": f.code,
        "error": f.error.to_string(),
        "chain": f.error.chain().map(|c| c.to_string()).collect::<Vec<_>>(),
    });
    let _ = std::fs::write(dir.join("error.json"), serde_json::to_string_pretty(&body).unwrap_or_default());
}

fn cache(dir: &Option<PathBuf>) -> TeacherCache {
    match dir {
        Some(d) => TeacherCache::with_dir(d),
        None => TeacherCache::new(),
    }
}

fn load(common: &Common, extra: Vec<String>) -> anyhow::Result<distill_core::pipeline::LoadedConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend(extra);
    RunConfig::load(&common.config, &overrides).with_context(|| format!("loading config {}", common.config.display()))
}

fn print_summary(r: &RunReport) {
    let s = &r.eval.student;
    let t = &r.eval.teacher;
    eprintln!(
        "student: coverage {:.3}, energy {:.4}, sliced W1 {:.4}, {} evals",
        s.coverage.coverage, s.distances.energy, s.distances.sliced_wasserstein, s.evals
    );
    eprintln!(
        "teacher: coverage {:.3}, energy {:.4}, sliced W1 {:.4}, {} evals",
        t.coverage.coverage, t.distances.energy, t.distances.sliced_wasserstein, t.evals
    );
    eprintln!(
        "timings: teacher {:.1}s, gan {:.1}s, dmd {:.1}s, eval {:.1}s",
        r.timings.teacher_secs, r.timings.gan_secs, r.timings.dmd_secs, r.timings.eval_secs
    );
}

fn cmd_run(args: RunArgs) -> Result<(), (Option<PathBuf>, Failure)> {
    let loaded = load(&args.common, args.seed.map(|s| format!("seeds.train={s}")).into_iter().collect()).map_err(|e| (None, e.into()))?;
    let dir = fresh_dir(args.common.out.as_deref(), "run").map_err(|e| (None, e.into()))?;
    let mut cache = cache(&args.common.teacher_cache);
    let report = run_experiment(&loaded, &mut cache, Some(&dir)).map_err(|e| (Some(dir.clone()), anyhow::Error::new(e).into()))?;
    print_summary(&report);
    eprintln!("results in {}", dir.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), (Option<PathBuf>, Failure)> {
    let loaded = load(&args.common, Vec::new()).map_err(|e| (None, e.into()))?;
    let dir = fresh_dir(args.common.out.as_deref(), "ablate").map_err(|e| (None, e.into()))?;
    let mut cache = cache(&args.common.teacher_cache);
    let wrap = |e: Error| (Some(dir.clone()), Failure::from(anyhow::Error::new(e)));
    std::fs::write(dir.join("config.resolved.toml"), loaded.config.to_toml().map_err(wrap)?).map_err(|e| wrap(Error::InvalidArgument(e.to_string())))?;
    let table = run_ablation_matrix(&loaded, &args.seeds, &RowSpec::standard(), &mut cache).map_err(wrap)?;
    let json = serde_json::to_string_pretty(&table).map_err(|e| wrap(e.into()))?;
    std::fs::write(dir.join("ablation.json"), json).map_err(|e| wrap(Error::InvalidArgument(e.to_string())))?;
    std::fs::write(dir.join("ablation.md"), table.to_markdown()).map_err(|e| wrap(Error::InvalidArgument(e.to_string())))?;
    eprint!("{}", table.to_markdown());
    Ok(())
}

fn cmd_verify(suite: &str) -> Result<bool, Failure> {
    let suites: Vec<&str> = if suite == "all" { verify::SUITES.to_vec() } else { vec![suite] };
    let mut all = true;
    println!("{:<16} {:<48} {:>12} {:>10}  result", "suite", "check", "measured", "tolerance");
    for s in suites {
        let results = verify::run_suite(s).map_err(|e| Failure::from(anyhow::Error::new(e)))?;
        for r in results {
            all &= r.passed;
            println!(
                "{:<16} {:<48} {:>12.3e} {:>10.1e}  {}",
                r.suite,
                r.name,
                r.measured,
                r.tolerance,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok(all)
}

fn cmd_sample(args: SampleArgs) -> Result<(), (Option<PathBuf>, Failure)> {
    let trainer = Trainer::restore(&args.checkpoint)
        .with_context(|| format!("restoring {}", args.checkpoint.display()))
        .map_err(|e| (None, Failure { code: 2, error: e }))?;
    let dir = fresh_dir(args.out.as_deref(), "sample").map_err(|e| (None, e.into()))?;
    let fail = |e: anyhow::Error| (Some(dir.clone()), Failure::from(e));
    let x = if args.n == 0 {
        ndarray::Array2::zeros((0, trainer.mixture().dim()))
    } else {
        trainer.student_samples(args.n, args.seed).map_err(|e| fail(e.into()))?.0
    };
    std::fs::write(dir.join("samples.csv"), samples_csv(&x, args.seed)).map_err(|e| fail(e.into()))?;
    let coverage = eval::mode_coverage(x.view(), trainer.mixture(), trainer.config.eval.radius, trainer.config.eval.min_hits)
        .context("coverage report over the sample set")
        .map_err(fail)?;
    let (reference, _) = trainer.mixture().sample(args.n, &mut distill_core::rng::stream(args.seed, "sample-reference"));
    let distances = eval::distance_report(x.view(), reference.view(), trainer.config.eval.energy_cap, args.seed)
        .context("distance report over the sample set")
        .map_err(fail)?;
    let body = serde_json::json!({ "coverage": coverage, "distances": distances });
    std::fs::write(dir.join("sample_report.json"), serde_json::to_string_pretty(&body).unwrap_or_default()).map_err(|e| fail(e.into()))?;
    eprintln!("coverage {:.3}, energy {:.4} -> {}", coverage.coverage, distances.energy, dir.display());
    Ok(())
}

fn cmd_report(dir: &Path) -> anyhow::Result<()> {
    let p = dir.join("report.json");
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let r: RunReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    print_summary(&r);
    let s = &r.eval.speedup;
    eprintln!(
        "sampler cost: {} vs {} evaluations ({:.0}% fewer), wall-clock ratio {:.1}x",
        s.student_evals,
        s.teacher_evals,
        100.0 * s.eval_reduction,
        s.wall_ratio
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome: Result<(), (Option<PathBuf>, Failure)> = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Verify { suite } => match cmd_verify(&suite) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(f) => Err((None, f)),
        },
        Command::Sample(a) => cmd_sample(a),
        Command::Report { run_dir } => cmd_report(&run_dir).map_err(|e| (None, Failure { code: 2, error: e })),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err((dir, f)) => {
            eprintln!("error: {:#}", f.error);
            write_error_file(dir.as_deref(), &f);
            ExitCode::from(f.code)
        }
    }
}
