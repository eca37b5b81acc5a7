//! Oracle suites: analytic scores against finite differences, distribution
//! matching gradients against quadrature, cotangent proportionality, ratio
//! calibration of a trained discriminator head, and quadrature convergence.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adversarial::{train_head_on_samples, Discriminator, DiscriminatorSpec};
use crate::denoiser::DenoiserSpec;
use crate::dmd::{
    dmd_cotangent_rkl, dmd_cotangent_soften, location_gradient, reverse_kl_value, soften_rkl_value, Quadrature, RatioSource, ScoreProvider,
    ScoreSource, WeightMode,
};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState};
use crate::rng::{normal_matrix, stream, uniform_steps};
use crate::schedule::Schedule;
use crate::teacher::{train_teacher_denoiser, DenoiseTraining, MixtureSpec, TeacherBundle};

pub const SUITES: [&str; 5] = ["scores", "gradients", "proportionality", "ratio", "quadrature"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn below(suite: &str, name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            suite: suite.into(),
            name: name.into(),
            measured,
            tolerance,
            passed: measured < tolerance,
        }
    }
}

pub fn run_suite(name: &str) -> Result<Vec<CheckResult>> {
    match name {
        "scores" => verify_scores(),
        "gradients" => verify_gradients(),
        "proportionality" => verify_proportionality(),
        "ratio" => verify_ratio(&RatioCalibration::default()).map(|r| vec![r.check]),
        "quadrature" => verify_quadrature(),
        other => Err(Error::InvalidArgument(format!(
            "unknown suite `{other}`; valid suites: {}",
            SUITES.join(", ")
        ))),
    }
}

fn score_mixtures() -> Vec<MixtureSpec> {
    vec![
        MixtureSpec::diagonal(vec![0.3, 0.7], vec![vec![-1.5], vec![1.0]], vec![vec![0.04], vec![0.25]]).expect("valid"),
        MixtureSpec::ring(8, 2.0, 0.1, None).expect("valid"),
    ]
}

/// Box around every noised component holding at least 99% of its mass.
fn mass_box(mix: &MixtureSpec, t: usize, sched: &Schedule) -> (f64, f64) {
    let a = sched.sqrt_alpha_bar(t);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for k in 0..mix.num_components() {
        let cov = mix.covariance_matrix(k);
        for (j, m) in mix.means()[k].iter().enumerate() {
            let sd = (a * a * cov[(j, j)] + 1.0 - a * a).sqrt();
            lo = lo.min(a * m - 2.576 * sd);
            hi = hi.max(a * m + 2.576 * sd);
        }
    }
    (lo, hi)
}

/// Worst relative error of the analytic score against central differences of
/// the noisy log density, over 100 grid points for each `t` and dimension.
pub fn verify_scores() -> Result<Vec<CheckResult>> {
    let sched = Schedule::linear(1000)?;
    let t_max = sched.num_steps();
    let mut out = Vec::new();
    for mix in score_mixtures() {
        let d = mix.dim();
        for t in [1, t_max / 4, t_max / 2, t_max] {
            let (lo, hi) = mass_box(&mix, t, &sched);
            let points: Vec<Vec<f64>> = if d == 1 {
                (0..100).map(|i| vec![lo + (hi - lo) * i as f64 / 99.0]).collect()
            } else {
                (0..100)
                    .map(|i| vec![lo + (hi - lo) * (i / 10) as f64 / 9.0, lo + (hi - lo) * (i % 10) as f64 / 9.0])
                    .collect()
            };
            let scale = (sched.alpha_bar(t) * 0.01 + 1.0 - sched.alpha_bar(t)).sqrt();
            let h = 1e-4 * scale;
            let mut worst = 0.0f64;
            for x in &points {
                let g = mix.analytic_score(x, t, &sched);
                let fd: Vec<f64> = (0..d)
                    .map(|j| {
                        let (mut p, mut m) = (x.clone(), x.clone());
                        p[j] += h;
                        m[j] -= h;
                        (mix.noisy_log_density(&p, t, &sched) - mix.noisy_log_density(&m, t, &sched)) / (2.0 * h)
                    })
                    .collect();
                let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max(diff / norm.max(1e-6));
            }
            out.push(CheckResult::below("scores", format!("d={d} t={t}"), worst, 1e-3));
        }
    }
    Ok(out)
}

fn two_mode_1d() -> MixtureSpec {
    MixtureSpec::diagonal(vec![0.3, 0.7], vec![vec![-1.5], vec![1.0]], vec![vec![0.25], vec![0.5]]).expect("valid")
}

/// Pulled-back cotangents of the plain and softened objectives on a
/// location-family student against finite differences of the quadrature
/// divergence values.
pub fn verify_gradients() -> Result<Vec<CheckResult>> {
    let sched = Schedule::linear(1000)?;
    let teacher = two_mode_1d();
    let grid = Quadrature::new(-12.0, 12.0, 4001)?;
    let spread = 0.5;
    let mut worst = [0.0f64; 2];
    for (theta, tau) in [(0.4, 250), (-0.8, 500), (2.0, 100), (-2.5, 750)] {
        for (slot, soften) in [(0, false), (1, true)] {
            let g = location_gradient(&teacher, theta, spread, tau, &sched, soften.then_some(WeightMode::OnePlusR), &grid)?;
            let value = |th: f64| -> Result<f64> {
                let student = MixtureSpec::gaussian(vec![th], spread * spread)?;
                let lp = |x: f64| teacher.noisy_log_density(&[x], tau, &sched);
                let lq = |x: f64| student.noisy_log_density(&[x], tau, &sched);
                if soften {
                    soften_rkl_value(lp, lq, &grid)
                } else {
                    reverse_kl_value(lp, lq, &grid)
                }
            };
            let h = 1e-4;
            let fd = (value(theta + h)? - value(theta - h)?) / (2.0 * h);
            worst[slot] = worst[slot].max((g - fd).abs() / fd.abs());
        }
    }
    Ok(vec![
        CheckResult::below("gradients", "reverse KL vs quadrature FD", worst[0], 1e-2),
        CheckResult::below("gradients", "softened (1/(1+r)) vs quadrature FD", worst[1], 1e-2),
    ])
}

/// Softened cotangent equals `1/(1+r)` times the plain one, per sample, on a
/// 1000-sample batch with a randomly initialised discriminator head.
pub fn verify_proportionality() -> Result<Vec<CheckResult>> {
    let sched = Schedule::linear(1000)?;
    let mix = MixtureSpec::ring(8, 2.0, 0.1, None)?;
    let mut rng = stream(11, "proportionality");
    let spec = DenoiserSpec {
        hidden: vec![32, 32],
        ..Default::default()
    };
    let teacher = TeacherBundle::new(mix.clone(), &spec, sched.clone(), false, &mut rng)?;
    let mut disc = Discriminator::new(&teacher.denoiser, &DiscriminatorSpec::default(), &mut rng)?;
    disc.head.init_uniform(&mut rng);
    for p in disc.head.params_mut() {
        *p *= 8.0;
    }
    let fake = crate::denoiser::Denoiser::new(&spec, 2, 0, &mut rng)?;
    let sp = ScoreProvider {
        real: ScoreSource::analytic(mix),
        fake: ScoreSource::Neural(fake),
    };
    let n = 1000;
    let x0 = normal_matrix(&mut rng, n, 2) * 2.0;
    let eps = normal_matrix(&mut rng, n, 2);
    let taus = uniform_steps(&mut rng, n, 1, sched.num_steps());
    let plain = dmd_cotangent_rkl(&sp, x0.view(), &taus, eps.view(), None, &sched, false)?;
    let soft = dmd_cotangent_soften(&sp, RatioSource::Discriminator(&disc), x0.view(), &taus, eps.view(), None, &sched, WeightMode::OnePlusR, false)?;
    let mut worst_rel = 0.0f64;
    let mut weight_ok = true;
    for i in 0..n {
        let w = 1.0 / (1.0 + soft.ratios[i]);
        weight_ok &= w > 0.0 && w < 1.0;
        for j in 0..2 {
            let expect = w * plain[[i, j]];
            let got = soft.cotangents[[i, j]];
            if expect != 0.0 {
                worst_rel = worst_rel.max((got - expect).abs() / expect.abs());
            } else {
                worst_rel = worst_rel.max(got.abs());
            }
        }
    }
    let spread = soft.ratios.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    log::debug!("ratio range {spread:?}");
    Ok(vec![
        CheckResult::below("proportionality", "max relative deviation from w(r) x plain", worst_rel, 1e-12),
        CheckResult {
            suite: "proportionality".into(),
            name: "w(r) strictly inside (0, 1)".into(),
            measured: if weight_ok { 1.0 } else { 0.0 },
            tolerance: 1.0,
            passed: weight_ok,
        },
    ])
}

/// Settings of the ratio-calibration experiment: a head on frozen teacher
/// features separates `N(0,1)` data from a fixed `N(2,1)` fake distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioCalibration {
    pub teacher_iters: usize,
    pub head_iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_t: usize,
    pub seed: u64,
}

impl Default for RatioCalibration {
    fn default() -> Self {
        Self {
            teacher_iters: 2000,
            head_iters: 3000,
            batch: 256,
            lr: 1e-3,
            eval_t: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioOutcome {
    pub check: CheckResult,
    pub interval: (f64, f64),
    pub final_real_prob: f64,
    pub final_fake_prob: f64,
}

/// Central interval holding 90% of the mass of `(p + q) / 2`.
fn central_interval(lp: impl Fn(f64) -> f64, lq: impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let n = 20_001;
    let h = (hi - lo) / (n - 1) as f64;
    let dens: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).map(|x| 0.5 * (lp(x).exp() + lq(x).exp())).collect();
    let mut cdf = vec![0.0; n];
    for i in 1..n {
        cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i] + dens[i - 1]);
    }
    let total = cdf[n - 1];
    let at = |q: f64| lo + h * cdf.iter().position(|&c| c >= q * total).unwrap_or(n - 1) as f64;
    (at(0.05), at(0.95))
}

pub fn verify_ratio(cfg: &RatioCalibration) -> Result<RatioOutcome> {
    let sched = Schedule::linear(1000)?;
    let real = MixtureSpec::gaussian(vec![0.0], 1.0)?;
    let fake = MixtureSpec::gaussian(vec![2.0], 1.0)?;
    let mut teacher = TeacherBundle::new(real.clone(), &DenoiserSpec::default(), sched.clone(), false, &mut stream(cfg.seed, "teacher-init"))?;
    train_teacher_denoiser(
        &mut teacher,
        DenoiseTraining {
            iters: cfg.teacher_iters,
            batch: cfg.batch,
            adam: AdamConfig::with_lr(1e-3),
        },
        &mut stream(cfg.seed, "teacher-train"),
    )?;
    let mut disc = Discriminator::new(&teacher.denoiser, &DiscriminatorSpec::default(), &mut stream(cfg.seed, "init"))?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), disc.head.num_params());
    let mut data = stream(cfg.seed, "data");
    let mut noise = stream(cfg.seed, "noise");
    let mut probs = (0.0, 0.0);
    for _ in 0..cfg.head_iters {
        let (r, _) = real.sample(cfg.batch, &mut data);
        let (f, _) = fake.sample(cfg.batch, &mut data);
        probs = train_head_on_samples(&mut disc, &mut adam, r.view(), f.view(), None, &sched, &mut noise)?;
    }
    let t = cfg.eval_t;
    let lp = |x: f64| real.noisy_log_density(&[x], t, &sched);
    let lq = |x: f64| fake.noisy_log_density(&[x], t, &sched);
    let (a, b) = central_interval(lp, lq, -10.0, 12.0);
    let m = 401;
    let xs = Array2::from_shape_fn((m, 1), |(i, _)| a + (b - a) * i as f64 / (m - 1) as f64);
    let est = disc.log_ratio_batch(xs.view(), &vec![t; m], None, &sched)?;
    let err = xs
        .column(0)
        .iter()
        .zip(&est)
        .map(|(&x, e)| (e - (lp(x) - lq(x))).abs())
        .sum::<f64>()
        / m as f64;
    Ok(RatioOutcome {
        check: CheckResult::below("ratio", format!("mean |log r_est - log r_true| at t={t}"), err, 0.2),
        interval: (a, b),
        final_real_prob: probs.0,
        final_fake_prob: probs.1,
    })
}

/// Quadrature values vanish on identical densities and agree across two
/// resolutions.
pub fn verify_quadrature() -> Result<Vec<CheckResult>> {
    let ln = |mu: f64| move |x: f64| -0.5 * (x - mu).powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let coarse = Quadrature::new(-10.0, 11.0, 4001)?;
    let fine = Quadrature::new(-10.0, 11.0, 8001)?;
    let same = soften_rkl_value(ln(0.0), ln(0.0), &coarse)?.abs();
    let a = soften_rkl_value(ln(0.0), ln(1.0), &coarse)?;
    let b = soften_rkl_value(ln(0.0), ln(1.0), &fine)?;
    let ra = reverse_kl_value(ln(0.0), ln(1.0), &coarse)?;
    Ok(vec![
        CheckResult::below("quadrature", "p = q gives 0", same, 1e-8),
        CheckResult::below("quadrature", "softened value, 4001 vs 8001 nodes", (a - b).abs(), 1e-6),
        CheckResult::below("quadrature", "reverse KL of unit shift vs 1/2", (ra - 0.5).abs(), 1e-9),
    ])
}
