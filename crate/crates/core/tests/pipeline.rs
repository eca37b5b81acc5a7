use distill_core::pipeline::{run_ablation_matrix, ConfigFormat, LoadedConfig, RowSpec, RunConfig, Stage, TeacherCache, Trainer};
use distill_core::Error;

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
iters = 12

[dmd]
iters = 12

[eval]
samples = 300
teacher_steps = 5
"#;

fn tiny(overrides: &[&str]) -> LoadedConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::parse(TINY, ConfigFormat::Toml, &o).unwrap()
}

fn trainer(cache: &mut TeacherCache, overrides: &[&str]) -> Trainer {
    Trainer::new(tiny(overrides).config, cache).unwrap()
}

#[test]
fn identical_seeds_give_identical_logs() {
    let mut cache = TeacherCache::new();
    let mut a = trainer(&mut cache, &[]);
    let mut b = trainer(&mut TeacherCache::new(), &[]);
    a.run_to_end().unwrap();
    b.run_to_end().unwrap();
    assert_eq!(a.gan_csv(), b.gan_csv());
    assert_eq!(a.dmd_csv(), b.dmd_csv());
    assert_eq!(a.teacher_csv(), b.teacher_csv());

    let mut c = trainer(&mut cache, &["seeds.train=5"]);
    c.run_to_end().unwrap();
    assert_ne!(a.gan_csv(), c.gan_csv());
    // The teacher is shared across training seeds.
    assert_eq!(a.teacher.denoiser.net.params(), c.teacher.denoiser.net.params());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let mut cache = TeacherCache::new();
    let mut straight = trainer(&mut cache, &[]);
    straight.run_to_end().unwrap();

    let dir = tempfile::tempdir().unwrap();
    for cut in [5, 12, 17] {
        let mut first = trainer(&mut cache, &[]);
        first.advance(cut).unwrap();
        let ck = dir.path().join(format!("cut{cut}"));
        first.save_checkpoint(&ck).unwrap();
        drop(first);
        let mut resumed = Trainer::restore(&ck).unwrap();
        resumed.run_to_end().unwrap();
        assert_eq!(resumed.gan_csv(), straight.gan_csv(), "cut {cut}");
        assert_eq!(resumed.dmd_csv(), straight.dmd_csv(), "cut {cut}");
        assert_eq!(resumed.student.denoiser.net.params(), straight.student.denoiser.net.params());
        let (x, _) = resumed.student_samples(50, 3).unwrap();
        let (y, _) = straight.student_samples(50, 3).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn save_restore_save_is_byte_identical() {
    let mut cache = TeacherCache::new();
    let mut t = trainer(&mut cache, &[]);
    t.advance(15).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    t.save_checkpoint(&a).unwrap();
    Trainer::restore(&a).unwrap().save_checkpoint(&b).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 5);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn restoring_into_other_widths_is_a_shape_error() {
    let mut cache = TeacherCache::new();
    let t = trainer(&mut cache, &[]);
    let dir = tempfile::tempdir().unwrap();
    t.save_checkpoint(dir.path()).unwrap();
    let mut wide = trainer(&mut cache, &["teacher.denoiser.hidden=[16, 24]"]);
    assert!(matches!(wide.restore_into(dir.path()), Err(Error::Shape { .. })));
}

#[test]
fn corrupt_blob_names_its_section() {
    let mut cache = TeacherCache::new();
    let t = trainer(&mut cache, &[]);
    let dir = tempfile::tempdir().unwrap();
    t.save_checkpoint(dir.path()).unwrap();
    let p = dir.path().join("student.bin");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[10] ^= 0x40;
    std::fs::write(&p, bytes).unwrap();
    match Trainer::restore(dir.path()) {
        Err(Error::Checkpoint { section, .. }) => assert_eq!(section, "student"),
        other => panic!("expected checkpoint error, got {other:?}"),
    }
    std::fs::remove_file(dir.path().join("manifest.json")).unwrap();
    assert!(matches!(Trainer::restore(dir.path()), Err(Error::Checkpoint { .. })));
}

#[test]
fn all_switches_off_leaves_the_teacher_copy() {
    let mut cache = TeacherCache::new();
    let mut t = trainer(&mut cache, &["ablation.gan_init=false", "ablation.dmd=false"]);
    assert_eq!(t.stage(), Stage::Done);
    t.run_to_end().unwrap();
    assert_eq!(t.iterations(), 0);
    assert_eq!(t.student.denoiser.net.params(), t.teacher.denoiser.net.params());
    let e = t.evaluate().unwrap();
    assert_eq!(e.student.evals, 4);
}

#[test]
fn phases_run_in_order() {
    let mut cache = TeacherCache::new();
    let mut t = trainer(&mut cache, &[]);
    let mut seen = Vec::new();
    loop {
        let s = t.step().unwrap();
        if s == Stage::Done {
            break;
        }
        seen.push(s);
    }
    assert_eq!(seen.len(), 24);
    assert!(seen.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(t.stamps.0, vec![(Stage::Gan, 12), (Stage::Dmd, 12)]);
    assert!(t.stamps.clone().push(Stage::Gan).is_err());

    let mut no_gan = trainer(&mut cache, &["ablation.gan_init=false"]);
    assert_eq!(no_gan.stage(), Stage::Dmd);
    no_gan.run_to_end().unwrap();
    assert!(no_gan.gan_log.is_empty());
    assert_eq!(no_gan.dmd_log.len(), 12);
}

#[test]
fn eval_seed_does_not_touch_training() {
    let mut cache = TeacherCache::new();
    let mut a = trainer(&mut cache, &[]);
    let mut b = trainer(&mut cache, &["seeds.eval=77"]);
    a.run_to_end().unwrap();
    b.run_to_end().unwrap();
    assert_eq!(a.dmd_csv(), b.dmd_csv());
    let ea = a.evaluate().unwrap();
    let eb = b.evaluate().unwrap();
    assert_ne!(ea.student.distances.energy, eb.student.distances.energy);
    // Sampling is a pure function of the eval seed.
    assert_eq!(a.student_samples(20, 4).unwrap().0, a.student_samples(20, 4).unwrap().0);
}

#[test]
fn ablation_needs_three_seeds() {
    let mut cache = TeacherCache::new();
    let base = tiny(&[]);
    for seeds in [&[][..], &[0, 1][..]] {
        assert!(matches!(
            run_ablation_matrix(&base, seeds, &RowSpec::standard(), &mut cache),
            Err(Error::InvalidArgument(_))
        ));
    }
}

#[test]
fn ablation_matrix_reports_every_row() {
    let mut cache = TeacherCache::new();
    let table = run_ablation_matrix(&tiny(&["gan.iters=4", "dmd.iters=4"]), &[0, 1, 2], &RowSpec::standard(), &mut cache).unwrap();
    assert_eq!(table.rows.len(), 4);
    for r in &table.rows {
        assert_eq!(r.runs.len(), 3);
        assert!(r.median_coverage.is_some(), "{}", r.name);
    }
    assert!(table.to_markdown().contains("no-gan-init"));
}

#[test]
fn teacher_cache_on_disk_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]).config;
    let (a, la, cached_a) = TeacherCache::with_dir(dir.path()).get(&cfg).unwrap();
    let (b, lb, cached_b) = TeacherCache::with_dir(dir.path()).get(&cfg).unwrap();
    assert!(!cached_a && cached_b);
    assert_eq!(a.denoiser.net.params(), b.denoiser.net.params());
    assert_eq!(la, lb);
}
