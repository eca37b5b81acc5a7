//! Sample-quality diagnostics: mode coverage, two-sample distances, score
//! error maps and sampler cost accounting.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dmd::ScoreSource;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::schedule::Schedule;
use crate::teacher::MixtureSpec;

pub const DEFAULT_RADIUS: f64 = 3.0;
pub const DEFAULT_DIRECTIONS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub hits: Vec<usize>,
    pub coverage: f64,
    pub radius: f64,
    pub min_hits: usize,
    pub samples: usize,
}

/// `max(5, 0.1 n / K)`.
pub fn default_min_hits(n: usize, k: usize) -> usize {
    5.max((0.1 * n as f64 / k as f64).floor() as usize)
}

/// Assign each sample to its Mahalanobis-nearest component; a component is
/// covered once `min_hits` samples land within `radius` of it.
pub fn mode_coverage(samples: ArrayView2<f64>, mix: &MixtureSpec, radius: f64, min_hits: Option<usize>) -> Result<CoverageReport> {
    let n = samples.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("coverage needs at least one sample".into()));
    }
    crate::error::check_len("sample dimension", mix.dim(), samples.ncols())?;
    let k = mix.num_components();
    let min_hits = min_hits.unwrap_or_else(|| default_min_hits(n, k));
    let mut hits = vec![0; k];
    let r2 = radius * radius;
    for row in samples.rows() {
        let x = row.to_vec();
        let (best, d2) = (0..k)
            .map(|j| (j, mix.mahalanobis_sq(&x, j)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one component");
        if d2 <= r2 {
            hits[best] += 1;
        }
    }
    let covered = hits.iter().filter(|&&h| h >= min_hits).count();
    Ok(CoverageReport {
        hits,
        coverage: covered as f64 / k as f64,
        radius,
        min_hits,
        samples: n,
    })
}

fn mean_pair_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut acc = 0.0;
    for x in a.rows() {
        let mut row = 0.0;
        for y in b.rows() {
            row += x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
        acc += row;
    }
    acc / (a.nrows() * b.nrows()) as f64
}

fn canonical_cmp(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Ordering {
    a.dim().cmp(&b.dim()).then_with(|| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

fn subsample<R: Rng + ?Sized>(x: ArrayView2<f64>, cap: Option<usize>, rng: &mut R) -> Array2<f64> {
    match cap {
        Some(c) if x.nrows() > c => {
            let mut idx = sample_indices(rng, x.nrows(), c).into_vec();
            idx.sort_unstable();
            x.select(Axis(0), &idx)
        }
        _ => x.to_owned(),
    }
}

/// V-statistic energy distance `2 E|a-b| - E|a-a'| - E|b-b'|`, with each
/// set first subsampled to at most `cap` rows. The two arguments are put in
/// a canonical order before any arithmetic, so swapping them gives the same
/// bits.
pub fn energy_distance<R: Rng + ?Sized>(a: ArrayView2<f64>, b: ArrayView2<f64>, cap: Option<usize>, rng: &mut R) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InvalidArgument("energy distance needs at least two samples per set".into()));
    }
    crate::error::check_len("sample dimension", a.ncols(), b.ncols())?;
    let (a, b) = if canonical_cmp(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let a = subsample(a, cap, rng);
    let b = subsample(b, cap, rng);
    let ab = mean_pair_distance(a.view(), b.view());
    let aa = mean_pair_distance(a.view(), a.view());
    let bb = mean_pair_distance(b.view(), b.view());
    Ok((2.0 * ab - (aa + bb)).max(0.0))
}

/// Exact W1 between two empirical 1D distributions.
fn wasserstein_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        prev = x;
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
    }
    total
}

/// Mean 1D Wasserstein-1 distance over `directions` random unit projections
/// drawn from `seed`.
pub fn sliced_wasserstein(a: ArrayView2<f64>, b: ArrayView2<f64>, directions: usize, seed: u64) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 || directions == 0 {
        return Err(Error::InvalidArgument("sliced Wasserstein needs samples and directions".into()));
    }
    crate::error::check_len("sample dimension", a.ncols(), b.ncols())?;
    let d = a.ncols();
    let mut rng = stream(seed, "sliced-directions");
    let mut total = 0.0;
    for _ in 0..directions {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        let v = ndarray::Array1::from(v);
        total += wasserstein_1d(a.dot(&v).to_vec(), b.dot(&v).to_vec());
    }
    Ok(total / directions as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub energy: f64,
    pub sliced_wasserstein: f64,
    pub directions: usize,
    pub n_a: usize,
    pub n_b: usize,
}

pub fn distance_report(a: ArrayView2<f64>, b: ArrayView2<f64>, cap: Option<usize>, seed: u64) -> Result<DistanceReport> {
    let mut rng = stream(seed, "energy-subsample");
    Ok(DistanceReport {
        energy: energy_distance(a, b, cap, &mut rng)?,
        sliced_wasserstein: sliced_wasserstein(a, b, DEFAULT_DIRECTIONS, seed)?,
        directions: DEFAULT_DIRECTIONS,
        n_a: a.nrows(),
        n_b: b.nrows(),
    })
}

/// Axis-aligned evaluation grid with `per_axis` points on `[lo, hi]` in
/// every dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub per_axis: usize,
}

impl GridSpec {
    pub fn points(&self, dim: usize) -> Array2<f64> {
        let m = self.per_axis;
        let step = if m > 1 { (self.hi - self.lo) / (m - 1) as f64 } else { 0.0 };
        let total = m.pow(dim as u32);
        Array2::from_shape_fn((total, dim), |(i, j)| {
            let idx = (i / m.pow((dim - 1 - j) as u32)) % m;
            self.lo + idx as f64 * step
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreErrorMap {
    pub t: usize,
    pub points: Array2<f64>,
    pub errors: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

impl ScoreErrorMap {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let d = self.points.ncols();
        let header: Vec<String> = (0..d).map(|j| format!("dim_{j}")).chain(["error".to_string()]).collect();
        let mut body = header.join(",") + "\n";
        for (row, e) in self.points.rows().into_iter().zip(&self.errors) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).chain([e.to_string()]).collect();
            body += &(cells.join(",") + "\n");
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Euclidean error of `provider`'s score against the analytic mixture score
/// at every grid point.
pub fn score_error_map(provider: &ScoreSource, mix: &MixtureSpec, grid: GridSpec, t: usize, sched: &Schedule) -> Result<ScoreErrorMap> {
    if t == 0 {
        return Err(Error::InvalidArgument("score error map needs t >= 1".into()));
    }
    let points = grid.points(mix.dim());
    let ts = vec![t; points.nrows()];
    let got = provider.scores(points.view(), &ts, None, sched)?;
    let want = mix.analytic_score_batch(points.view(), &ts, sched);
    let errors: Vec<f64> = (&got - &want).rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let max = errors.iter().copied().fold(0.0, f64::max);
    Ok(ScoreErrorMap {
        t,
        points,
        errors,
        mean,
        max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub student_evals: usize,
    pub teacher_evals: usize,
    pub eval_ratio: f64,
    /// Fraction of evaluations saved, `1 - student / teacher`.
    pub eval_reduction: f64,
    pub wall_student_secs: f64,
    pub wall_teacher_secs: f64,
    pub wall_ratio: f64,
    pub count_ratio_at_least_10: bool,
}

pub fn speedup_report(student_evals: usize, teacher_evals: usize, wall_student: f64, wall_teacher: f64) -> Result<SpeedupReport> {
    if student_evals == 0 || teacher_evals == 0 {
        return Err(Error::InvalidArgument("evaluation counts must be positive".into()));
    }
    let eval_ratio = teacher_evals as f64 / student_evals as f64;
    Ok(SpeedupReport {
        student_evals,
        teacher_evals,
        eval_ratio,
        eval_reduction: 1.0 - student_evals as f64 / teacher_evals as f64,
        wall_student_secs: wall_student,
        wall_teacher_secs: wall_teacher,
        wall_ratio: if wall_student > 0.0 { wall_teacher / wall_student } else { f64::INFINITY },
        count_ratio_at_least_10: eval_ratio >= 10.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_matrix;
    use proptest::prelude::*;

    fn ring() -> MixtureSpec {
        MixtureSpec::ring(8, 2.0, 0.1, None).unwrap()
    }

    #[test]
    fn mixture_samples_cover_every_mode() {
        let m = ring();
        let (x, _) = m.sample(10_000, &mut stream(0, "data"));
        let r = mode_coverage(x.view(), &m, DEFAULT_RADIUS, None).unwrap();
        assert_eq!(r.coverage, 1.0);
        assert_eq!(r.min_hits, 125);
        assert!(r.hits.iter().sum::<usize>() <= r.samples);
    }

    #[test]
    fn point_mass_covers_one_mode() {
        let m = ring();
        let x = Array2::from_shape_fn((500, 2), |(_, j)| m.means()[3][j]);
        assert_eq!(mode_coverage(x.view(), &m, 3.0, None).unwrap().coverage, 1.0 / 8.0);
        let far = Array2::from_elem((500, 2), 50.0);
        assert_eq!(mode_coverage(far.view(), &m, 3.0, None).unwrap().coverage, 0.0);
        assert!(mode_coverage(far.slice(ndarray::s![..0, ..]), &m, 3.0, None).is_err());
    }

    #[test]
    fn min_hits_default() {
        assert_eq!(default_min_hits(100, 8), 5);
        assert_eq!(default_min_hits(10_000, 8), 125);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn coverage_permutation_invariant_and_monotone(seed in 0u64..1000, n in 50usize..400) {
            let m = ring();
            let (x, _) = m.sample(n, &mut stream(seed, "data"));
            let r1 = mode_coverage(x.view(), &m, 3.0, Some(5)).unwrap();
            let mut rev = x.clone();
            rev.invert_axis(Axis(0));
            let r2 = mode_coverage(rev.view(), &m, 3.0, Some(5)).unwrap();
            prop_assert_eq!(&r1, &r2);
            let half = mode_coverage(x.slice(ndarray::s![..n / 2, ..]), &m, 3.0, Some(5)).unwrap();
            prop_assert!(half.coverage <= r1.coverage);
        }

        #[test]
        fn energy_distance_symmetric(seed in 0u64..1000) {
            let a = normal_matrix(&mut stream(seed, "a"), 40, 2);
            let b = normal_matrix(&mut stream(seed, "b"), 30, 2) + 0.5;
            let x = energy_distance(a.view(), b.view(), None, &mut stream(0, "s")).unwrap();
            let y = energy_distance(b.view(), a.view(), None, &mut stream(0, "s")).unwrap();
            prop_assert_eq!(x.to_bits(), y.to_bits());
            prop_assert!(x >= 0.0);
        }
    }

    #[test]
    fn energy_distance_identical_sets_is_zero() {
        let a = normal_matrix(&mut stream(1, "a"), 100, 2);
        assert_eq!(energy_distance(a.view(), a.view(), None, &mut stream(0, "s")).unwrap(), 0.0);
        assert!(energy_distance(a.slice(ndarray::s![..1, ..]), a.view(), None, &mut stream(0, "s")).is_err());
    }

    #[test]
    fn energy_distance_calibration() {
        let a = normal_matrix(&mut stream(2, "a"), 10_000, 1);
        let b = normal_matrix(&mut stream(2, "b"), 10_000, 1);
        let same = energy_distance(a.view(), b.view(), None, &mut stream(0, "s")).unwrap();
        assert!(same < 0.02, "{same}");
        let shifted = b + 3.0;
        let far = energy_distance(a.view(), shifted.view(), Some(2000), &mut stream(0, "s")).unwrap();
        assert!(far > 1.0, "{far}");
    }

    #[test]
    fn wasserstein_1d_known_values() {
        assert!((wasserstein_1d(vec![0.0, 1.0], vec![0.5, 1.5]) - 0.5).abs() < 1e-15);
        assert!((wasserstein_1d(vec![0.0], vec![0.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(wasserstein_1d(vec![3.0, 1.0], vec![1.0, 3.0]), 0.0);
    }

    #[test]
    fn sliced_wasserstein_deterministic_and_stable() {
        let a = normal_matrix(&mut stream(3, "a"), 2000, 2);
        let b = normal_matrix(&mut stream(3, "b"), 2000, 2) + 1.0;
        let s64 = sliced_wasserstein(a.view(), b.view(), 64, 7).unwrap();
        assert_eq!(s64, sliced_wasserstein(a.view(), b.view(), 64, 7).unwrap());
        let s128 = sliced_wasserstein(a.view(), b.view(), 128, 7).unwrap();
        assert!((s128 - s64).abs() < 0.1 * s64, "{s64} {s128}");
    }

    #[test]
    fn analytic_provider_has_zero_error() {
        let m = ring();
        let s = Schedule::linear(1000).unwrap();
        let map = score_error_map(&ScoreSource::analytic(m.clone()), &m, GridSpec { lo: -3.0, hi: 3.0, per_axis: 7 }, 100, &s).unwrap();
        assert_eq!(map.points.nrows(), 49);
        assert!(map.errors.iter().all(|&e| e == 0.0));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.csv");
        map.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("dim_0,dim_1,error\n"));
        assert_eq!(text.lines().count(), 50);
    }

    #[test]
    fn speedup_arithmetic() {
        let r = speedup_report(4, 50, 1.0, 10.0).unwrap();
        assert!((r.eval_reduction - 0.92).abs() < 1e-12);
        assert!(r.count_ratio_at_least_10);
        assert_eq!(speedup_report(4, 4, 1.0, 1.0).unwrap().eval_reduction, 0.0);
        assert!(speedup_report(0, 4, 1.0, 1.0).is_err());
    }
}
