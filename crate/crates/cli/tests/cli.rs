use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[mixture]
preset = "ring"
modes = 4
radius = 2.0
sigma = 0.1

[teacher]
iters = 150
batch = 32

[teacher.denoiser]
hidden = [16, 16]

[optim]
batch = 8

[gan]
iters = 6

[dmd]
iters = 6

[eval]
samples = 200
teacher_steps = 5
"#;

fn distill(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distill"))
        .args(args)
        .env("DISTILL_OUT_ROOT", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn missing_config_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = distill(&["run", "-c", "/nonexistent/exp.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/exp.toml"), "{}", stderr(&o));
}

#[test]
fn bad_field_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = distill(&["run", "-c", &cfg, "--set", "optim.lr=-1"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("optim.lr"), "{}", stderr(&o));
}

#[test]
fn unknown_suite_lists_valid_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let o = distill(&["verify", "nonsense"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    for s in ["scores", "gradients", "proportionality", "ratio", "quadrature"] {
        assert!(e.contains(s), "{e}");
    }
}

#[test]
fn verify_quadrature_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = distill(&["verify", "quadrature"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}

#[test]
fn run_echoes_overrides_then_samples_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    let o = distill(
        &["run", "-c", &cfg, "-o", run.to_str().unwrap(), "--set", "dmd.weight_mode=inverse-r", "--seed", "4"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved = std::fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("weight_mode = \"inverse-r\""), "{resolved}");
    assert!(resolved.contains("train = 4"), "{resolved}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let echoed = report["overrides"].to_string();
    assert!(echoed.contains("dmd.weight_mode=inverse-r"), "{echoed}");
    for f in ["gan.csv", "dmd.csv", "teacher.csv", "samples.csv", "checkpoint/manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(std::fs::read_to_string(run.join("dmd.csv")).unwrap().contains("inverse-r"));

    // The same directory is not reused.
    let again = distill(&["run", "-c", &cfg, "-o", run.to_str().unwrap()], tmp.path());
    assert_eq!(again.status.code(), Some(2));

    let o = distill(&["report", run.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("4 vs 5 evaluations"), "{}", stderr(&o));

    let ckpt = run.join("checkpoint");
    let sample = |name: &str, n: &str| {
        let dir = tmp.path().join(name);
        let o = distill(
            &["sample", "--checkpoint", ckpt.to_str().unwrap(), "-n", n, "--seed", "9", "-o", dir.to_str().unwrap()],
            tmp.path(),
        );
        (o, dir)
    };
    let (a, da) = sample("s1", "50");
    let (b, db) = sample("s2", "50");
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0));
    let csv_a = std::fs::read(da.join("samples.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(db.join("samples.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&csv_a).lines().count(), 51);
    assert!(da.join("sample_report.json").exists());

    let (z, dz) = sample("s0", "0");
    assert_eq!(z.status.code(), Some(2));
    assert!(stderr(&z).contains("coverage report"), "{}", stderr(&z));
    let empty = std::fs::read_to_string(dz.join("samples.csv")).unwrap();
    assert_eq!(empty.trim_end(), "seed,step,dim_0,dim_1");
    assert!(dz.join("error.json").exists());
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let root = tmp.path().join("outs");
    let o = distill(&["run", "-c", &cfg, "--set", "gan.iters=0", "--set", "dmd.iters=0"], &root);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let made: Vec<_> = std::fs::read_dir(&root).unwrap().collect();
    assert_eq!(made.len(), 1);
}

#[test]
fn sample_from_missing_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = distill(&["sample", "--checkpoint", "/nonexistent/ckpt", "-n", "3"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/ckpt"));
}

// Demo run against the committed summary. Set DISTILL_REGEN_GOLDEN=1 to
// rewrite the golden file after an intentional change.
#[test]
fn demo_matches_golden_summary() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("demo");
    let o = distill(&["run", "-c", root.join("demo.toml").to_str().unwrap(), "-o", run.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let e = &report["eval"];
    let got = serde_json::json!({
        "student_coverage": e["student"]["coverage"]["coverage"],
        "student_energy": e["student"]["distances"]["energy"],
        "student_sliced_wasserstein": e["student"]["distances"]["sliced_wasserstein"],
        "teacher_coverage": e["teacher"]["coverage"]["coverage"],
        "teacher_energy": e["teacher"]["distances"]["energy"],
        "student_evals": e["speedup"]["student_evals"],
        "teacher_evals": e["speedup"]["teacher_evals"],
    });
    let golden = root.join("demo.golden.json");
    if std::env::var_os("DISTILL_REGEN_GOLDEN").is_some() {
        std::fs::write(&golden, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let want: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&golden).unwrap()).unwrap();
    // coverage moves in steps of 1/8, so anything below that is exact
    for (key, tol) in [
        ("student_coverage", 1e-9),
        ("teacher_coverage", 1e-9),
        ("student_energy", 0.01),
        ("teacher_energy", 0.01),
        ("student_sliced_wasserstein", 0.02),
        ("student_evals", 0.0),
        ("teacher_evals", 0.0),
    ] {
        let (g, w) = (got[key].as_f64().unwrap(), want[key].as_f64().unwrap());
        assert!((g - w).abs() <= tol, "{key}: got {g}, golden {w} (tol {tol})");
    }

    // Fresh samples from the checkpoint should cover about as well as the report says.
    let dir = tmp.path().join("fresh");
    let ckpt = run.join("checkpoint");
    let o = distill(
        &["sample", "--checkpoint", ckpt.to_str().unwrap(), "-n", "2000", "--seed", "11", "-o", dir.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let fresh: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("sample_report.json")).unwrap()).unwrap();
    let c = fresh["coverage"]["coverage"].as_f64().unwrap();
    assert!((c - got["student_coverage"].as_f64().unwrap()).abs() <= 0.05, "fresh coverage {c}");
}
