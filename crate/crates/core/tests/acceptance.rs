//! The eight acceptance criteria, run in sequence so that wall-clock budgets
//! are measured without competing work. One PASS/FAIL line per criterion is
//! written straight to stderr (bypassing output capture) and a JSON summary
//! lands in the target tmpdir.

use std::io::Write;
use std::time::Instant;

use distill_core::pipeline::{
    run_ablation_matrix, AblationTable, MixtureConfig, RowSpec, RunConfig, Stage, TeacherCache, Trainer,
};
use distill_core::verify::{self, CheckResult, RatioCalibration};
use serde_json::json;

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    secs: f64,
}

fn say(line: &str) {
    let mut e = std::io::stderr();
    let _ = writeln!(e, "{line}");
    let _ = e.flush();
}

fn emit(o: &Outcome) {
    say(&format!(
        "criterion {} [{}] {}: {} ({:.1}s)",
        o.id,
        if o.passed { "PASS" } else { "FAIL" },
        o.title,
        o.detail,
        o.secs
    ));
}

fn checks(suite: &str, budget: f64, id: usize, title: &'static str, run: impl FnOnce() -> Vec<CheckResult>) -> Outcome {
    let t0 = Instant::now();
    let results = run();
    let secs = t0.elapsed().as_secs_f64();
    let worst = results
        .iter()
        .map(|r| format!("{}={:.2e}/{:.0e}{}", r.name, r.measured, r.tolerance, if r.passed { "" } else { " FAILED" }))
        .collect::<Vec<_>>()
        .join("; ");
    let ok = !results.is_empty() && results.iter().all(|r| r.passed);
    Outcome {
        id,
        title,
        passed: ok && secs < budget,
        detail: format!("{suite}: {worst}; budget {budget}s"),
        secs,
    }
}

/// End-to-end ring settings on top of the library defaults.
fn ring_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.optim.batch = 128;
    assert_eq!(
        c.mixture,
        MixtureConfig::Ring {
            modes: 8,
            radius: 2.0,
            sigma: 0.1,
            weights: None
        }
    );
    assert_eq!((c.gan.iters, c.dmd.iters, c.student.q), (4000, 5000, 4));
    assert_eq!(c.optim.lr, 5e-5);
    assert_eq!(c.eval.samples, 10_000);
    c
}

fn median_of(t: &AblationTable, row: &str) -> f64 {
    t.row(row).and_then(|r| r.median_coverage).unwrap_or(f64::NAN)
}

fn coverages(t: &AblationTable, row: &str) -> Vec<Option<f64>> {
    t.row(row).map(|r| r.runs.iter().map(|x| x.coverage).collect()).unwrap_or_default()
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    let mut summary = serde_json::Map::new();
    let record = |o: Outcome, outcomes: &mut Vec<Outcome>| {
        emit(&o);
        outcomes.push(o);
    };

    record(
        checks("scores", 5.0, 1, "score oracle", || verify::verify_scores().unwrap()),
        &mut outcomes,
    );
    record(
        checks("gradients", 30.0, 2, "gradient oracles", || verify::verify_gradients().unwrap()),
        &mut outcomes,
    );
    record(
        checks("proportionality", 5.0, 3, "exact proportionality", || verify::verify_proportionality().unwrap()),
        &mut outcomes,
    );
    record(
        checks("ratio", 120.0, 4, "ratio calibration", || {
            vec![verify::verify_ratio(&RatioCalibration::default()).unwrap().check]
        }),
        &mut outcomes,
    );

    // End-to-end run; its evaluation block also feeds the speedup criterion.
    let mut cache = TeacherCache::new();
    let t0 = Instant::now();
    let mut trainer = Trainer::new(ring_config(), &mut cache).unwrap();
    let teacher_secs = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let trained = trainer.run_to_end();
    let eval = trained.and_then(|_| trainer.evaluate());
    let secs = t0.elapsed().as_secs_f64();
    match &eval {
        Ok(e) => {
            let s = &e.student;
            summary.insert(
                "end_to_end".into(),
                json!({
                    "coverage": s.coverage.coverage,
                    "hits": s.coverage.hits,
                    "energy": s.distances.energy,
                    "sliced_wasserstein": s.distances.sliced_wasserstein,
                    "teacher_coverage": e.teacher.coverage.coverage,
                    "teacher_energy": e.teacher.distances.energy,
                    "secs": secs,
                    "teacher_secs": teacher_secs,
                    "timings": trainer.timings,
                }),
            );
            record(
                Outcome {
                    id: 5,
                    title: "end-to-end ring",
                    passed: s.coverage.coverage == 1.0 && s.distances.energy < 0.1 && secs < 600.0,
                    detail: format!(
                        "coverage {:.3} (need 1.0), energy {:.4} (need < 0.1), hits {:?}; teacher training {:.0}s not counted",
                        s.coverage.coverage, s.distances.energy, s.coverage.hits, teacher_secs
                    ),
                    secs,
                },
                &mut outcomes,
            );
            let sp = &e.speedup;
            summary.insert("speedup".into(), serde_json::to_value(sp).unwrap());
            record(
                Outcome {
                    id: 7,
                    title: "speedup structure",
                    passed: sp.student_evals == 4 && sp.teacher_evals == 50 && (sp.eval_reduction - 0.92).abs() < 1e-12,
                    detail: format!(
                        "{} vs {} evaluations ({:.0}% fewer); wall-clock ratio {:.1}x (reported, target 5x)",
                        sp.student_evals,
                        sp.teacher_evals,
                        100.0 * sp.eval_reduction,
                        sp.wall_ratio
                    ),
                    secs: sp.wall_student_secs + sp.wall_teacher_secs,
                },
                &mut outcomes,
            );
        }
        Err(err) => {
            for (id, title) in [(5, "end-to-end ring"), (7, "speedup structure")] {
                record(
                    Outcome {
                        id,
                        title,
                        passed: false,
                        detail: format!("run failed: {err}"),
                        secs,
                    },
                    &mut outcomes,
                );
            }
        }
    }
    drop(trainer);

    // Ablation directionality over five seeds, plus the asymmetric variant.
    let t0 = Instant::now();
    let seeds = [0, 1, 2, 3, 4];
    let base = RunConfig::parse(&ring_config().to_toml().unwrap(), distill_core::pipeline::ConfigFormat::Toml, &[]).unwrap();
    let standard = run_ablation_matrix(&base, &seeds, &RowSpec::standard(), &mut cache).unwrap();
    let mut asym = base.clone();
    asym.config.mixture = MixtureConfig::Ring {
        modes: 8,
        radius: 2.0,
        sigma: 0.1,
        weights: Some((1..=8).map(f64::from).collect()),
    };
    let pair: Vec<RowSpec> = RowSpec::standard()
        .into_iter()
        .filter(|r| r.name == "gan+dmd-plain" || r.name == "full")
        .collect();
    let skewed = run_ablation_matrix(&asym, &seeds, &pair, &mut cache).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let none = median_of(&standard, "no-gan-init");
    let gan_rows = ["gan-only", "gan+dmd-plain", "full"].map(|r| median_of(&standard, r));
    let a = gan_rows.iter().all(|&m| none < m);
    let b = median_of(&standard, "full") >= median_of(&standard, "gan+dmd-plain");
    let plain_skew = coverages(&skewed, "gan+dmd-plain");
    let c = plain_skew.iter().any(|c| matches!(c, Some(v) if *v < 1.0))
        && median_of(&skewed, "full") >= median_of(&skewed, "gan+dmd-plain");
    summary.insert("ablation".into(), serde_json::to_value(&standard).unwrap());
    summary.insert("ablation_asymmetric".into(), serde_json::to_value(&skewed).unwrap());
    say(&standard.to_markdown());
    say(&skewed.to_markdown());
    record(
        Outcome {
            id: 6,
            title: "ablation directionality",
            passed: a && b && c && secs < 3600.0,
            detail: format!(
                "(a) no-gan {none:.3} < {gan_rows:?}: {a}; (b) full {:.3} >= plain {:.3}: {b}; (c) asymmetric plain runs {plain_skew:?}, full median {:.3}: {c}",
                median_of(&standard, "full"),
                median_of(&standard, "gan+dmd-plain"),
                median_of(&skewed, "full"),
            ),
            secs,
        },
        &mut outcomes,
    );

    // Determinism and resume on a shortened run of the same setup.
    let t0 = Instant::now();
    let mut short = ring_config();
    short.optim.batch = 32;
    short.gan.iters = 300;
    short.dmd.iters = 300;
    let run = |cache: &mut TeacherCache| {
        let mut t = Trainer::new(short.clone(), cache).unwrap();
        t.run_to_end().unwrap();
        t
    };
    let first = run(&mut cache);
    let second = run(&mut cache);
    let same_logs = first.gan_csv() == second.gan_csv() && first.dmd_csv() == second.dmd_csv() && first.teacher_csv() == second.teacher_csv();
    let dir = tempfile::tempdir().unwrap();
    let mut half = Trainer::new(short.clone(), &mut cache).unwrap();
    half.advance(450).unwrap();
    assert_eq!(half.stage(), Stage::Dmd);
    half.save_checkpoint(dir.path()).unwrap();
    drop(half);
    let mut resumed = Trainer::restore(dir.path()).unwrap();
    resumed.run_to_end().unwrap();
    let (ea, eb) = (first.evaluate().unwrap(), resumed.evaluate().unwrap());
    // wall-clock fields in the speedup block are not metrics, everything else must match
    let metrics = |e: &distill_core::pipeline::EvalBlock| {
        serde_json::to_string(&(&e.student, &e.teacher, e.speedup.student_evals, e.speedup.teacher_evals)).unwrap()
    };
    let same_metrics = metrics(&ea) == metrics(&eb) && first.dmd_csv() == resumed.dmd_csv();
    let secs = t0.elapsed().as_secs_f64();
    record(
        Outcome {
            id: 8,
            title: "determinism and resume",
            passed: same_logs && same_metrics && secs < 300.0,
            detail: format!("identical logs: {same_logs}; resumed metrics identical: {same_metrics}"),
            secs,
        },
        &mut outcomes,
    );

    outcomes.sort_by_key(|o| o.id);
    say("acceptance summary:");
    for o in &outcomes {
        emit(o);
    }
    let crit: Vec<_> = outcomes
        .iter()
        .map(|o| json!({"criterion": o.id, "title": o.title, "passed": o.passed, "detail": o.detail, "secs": o.secs}))
        .collect();
    summary.insert("criteria".into(), json!(crit));
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).unwrap()).unwrap();
    say(&format!("summary written to {}", path.display()));

    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
