//! Ablation matrix over component switches and seeds. Rows that share the
//! adversarial phase reuse one trained state per seed.

use serde::{Deserialize, Serialize};

use super::{Ablation, LoadedConfig, RunConfig, Stage, TeacherCache, Trainer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub name: String,
    pub ablation: Ablation,
}

impl RowSpec {
    /// No adversarial init, GAN only, GAN + plain reverse KL, full method.
    pub fn standard() -> Vec<Self> {
        let row = |name: &str, gan_init, dmd, soften| Self {
            name: name.into(),
            ablation: Ablation { gan_init, dmd, soften },
        };
        vec![
            row("no-gan-init", false, true, true),
            row("gan-only", true, false, true),
            row("gan+dmd-plain", true, true, false),
            row("full", true, true, true),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub coverage: Option<f64>,
    pub energy: Option<f64>,
    pub sliced_wasserstein: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ablation: Ablation,
    pub runs: Vec<AblationRun>,
    pub median_coverage: Option<f64>,
    pub median_energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| row | median coverage | median energy | failed runs |\n|---|---|---|---|\n");
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        for r in &self.rows {
            let failed = r.runs.iter().filter(|x| x.error.is_some()).count();
            s += &format!("| {} | {} | {} | {failed} |\n", r.name, f(r.median_coverage), f(r.median_energy));
        }
        s
    }
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn finish(trainer: &mut Trainer, seed: u64) -> AblationRun {
    let outcome = trainer.run_to_end().and_then(|_| trainer.evaluate());
    match outcome {
        Ok(e) => AblationRun {
            seed,
            coverage: Some(e.student.coverage.coverage),
            energy: Some(e.student.distances.energy),
            sliced_wasserstein: Some(e.student.distances.sliced_wasserstein),
            error: None,
        },
        Err(e) => failed(seed, &e),
    }
}

fn failed(seed: u64, e: &Error) -> AblationRun {
    AblationRun {
        seed,
        coverage: None,
        energy: None,
        sliced_wasserstein: None,
        error: Some(e.to_string()),
    }
}

/// One run per `(row, seed)`. Failed runs are recorded and skipped in the
/// medians; the matrix carries on.
pub fn run_ablation_matrix(base: &LoadedConfig, seeds: &[u64], rows: &[RowSpec], cache: &mut TeacherCache) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(Error::InvalidArgument(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one row".into()));
    }
    let mut runs: Vec<Vec<AblationRun>> = vec![Vec::new(); rows.len()];
    for &seed in seeds {
        let mut cfg: RunConfig = base.config.clone();
        cfg.seeds.train = seed;
        // One adversarial phase per seed, shared by every row that wants it.
        let mut shared: Option<Result<Trainer>> = None;
        for (i, row) in rows.iter().enumerate() {
            let mut row_cfg = cfg.clone();
            row_cfg.ablation = row.ablation;
            log::info!("ablation row {} seed {seed}", row.name);
            let run = if row.ablation.gan_init {
                let base_trainer = shared.get_or_insert_with(|| {
                    let mut c = cfg.clone();
                    c.ablation = Ablation {
                        gan_init: true,
                        dmd: false,
                        soften: true,
                    };
                    let mut t = Trainer::new(c, cache)?;
                    while t.stage() == Stage::Gan {
                        t.step()?;
                    }
                    Ok(t)
                });
                match base_trainer {
                    Ok(t) => {
                        let mut t = t.clone();
                        t.config.ablation = row.ablation;
                        finish(&mut t, seed)
                    }
                    Err(e) => failed(seed, e),
                }
            } else {
                match Trainer::new(row_cfg, cache) {
                    Ok(mut t) => finish(&mut t, seed),
                    Err(e) => failed(seed, &e),
                }
            };
            runs[i].push(run);
        }
    }
    let rows = rows
        .iter()
        .zip(runs)
        .map(|(spec, runs)| {
            let mut cov: Vec<f64> = runs.iter().filter_map(|r| r.coverage).collect();
            let mut en: Vec<f64> = runs.iter().filter_map(|r| r.energy).collect();
            AblationRow {
                name: spec.name.clone(),
                ablation: spec.ablation,
                median_coverage: median(&mut cov),
                median_energy: median(&mut en),
                runs,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}
