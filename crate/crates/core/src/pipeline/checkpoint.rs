//! Checkpoints: raw little-endian `f64` blobs plus a JSON manifest holding
//! shapes, checksums, optimizer steps, RNG positions and phase counters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{blank_teacher, PhaseStamps, RunConfig, Trainer};
use crate::adversarial::GanBatchReport;
use crate::dmd::{DmdRow, ScoreSource};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, NetShape};
use crate::rng::RngState;

const FORMAT: u32 = 1;

/// FNV-1a over raw bytes.
pub fn blob_checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3))
}

fn encode(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_f64_blob(path: &Path, values: &[f64]) -> Result<()> {
    std::fs::write(path, encode(values)).map_err(|e| Error::io(path, e))
}

pub fn read_f64_blob(path: &Path, section: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
        section: section.into(),
        message: format!("{}: {e}", path.display()),
    })?;
    decode(&bytes, section, expected)
}

fn decode(bytes: &[u8], section: &str, expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != 8 * expected {
        return Err(Error::Checkpoint {
            section: section.into(),
            message: format!("expected {} bytes, found {}", 8 * expected, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    file: String,
    len: usize,
    fnv1a: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetEntry {
    shape: NetShape,
    blob: BlobEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamEntry {
    step: u64,
    m: BlobEntry,
    v: BlobEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Logs {
    teacher: Vec<f64>,
    pretrain: Vec<f64>,
    gan: Vec<GanBatchReport>,
    dmd: Vec<DmdRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: RunConfig,
    networks: BTreeMap<String, NetEntry>,
    optimizers: BTreeMap<String, AdamEntry>,
    rng: BTreeMap<String, RngState>,
    gan_iter: usize,
    collapse_streak: usize,
    dmd_iter: usize,
    fake_guard: (Option<f64>, usize),
    stamps: PhaseStamps,
    teacher_cached: bool,
    logs: BlobEntry,
}

struct Writer<'a> {
    dir: &'a Path,
}

impl Writer<'_> {
    fn blob(&self, name: &str, bytes: &[u8], len: usize) -> Result<BlobEntry> {
        let p = self.dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(BlobEntry {
            file: name.into(),
            len,
            fnv1a: format!("{:016x}", blob_checksum(bytes)),
        })
    }

    fn f64s(&self, name: &str, v: &[f64]) -> Result<BlobEntry> {
        self.blob(name, &encode(v), v.len())
    }

    fn adam(&self, name: &str, a: &AdamState) -> Result<AdamEntry> {
        Ok(AdamEntry {
            step: a.step,
            m: self.f64s(&format!("{name}.m.bin"), &a.m)?,
            v: self.f64s(&format!("{name}.v.bin"), &a.v)?,
        })
    }
}

fn read_checked(dir: &Path, section: &str, e: &BlobEntry) -> Result<Vec<u8>> {
    let p = dir.join(&e.file);
    let bytes = std::fs::read(&p).map_err(|err| Error::Checkpoint {
        section: section.into(),
        message: format!("{}: {err}", p.display()),
    })?;
    let sum = format!("{:016x}", blob_checksum(&bytes));
    if sum != e.fnv1a {
        return Err(Error::Checkpoint {
            section: section.into(),
            message: format!("checksum {sum} does not match manifest {}", e.fnv1a),
        });
    }
    Ok(bytes)
}

fn read_f64s(dir: &Path, section: &str, e: &BlobEntry, expected: usize) -> Result<Vec<f64>> {
    if e.len != expected {
        return Err(Error::Shape {
            what: "checkpoint tensor",
            expected,
            got: e.len,
        });
    }
    decode(&read_checked(dir, section, e)?, section, expected)
}

fn restore_adam(dir: &Path, section: &str, e: &AdamEntry, into: &mut AdamState) -> Result<()> {
    let n = into.m.len();
    into.m = read_f64s(dir, section, &e.m, n)?;
    into.v = read_f64s(dir, section, &e.v, n)?;
    into.step = e.step;
    Ok(())
}

fn fake_net_mut(t: &mut Trainer) -> &mut crate::numerics::DenseNet {
    match &mut t.scores.fake {
        ScoreSource::Neural(d) => &mut d.net,
        ScoreSource::Analytic { .. } => unreachable!("trainer fake score is always neural"),
    }
}

impl Trainer {
    fn networks(&self) -> Vec<(&'static str, &crate::numerics::DenseNet)> {
        let fake = match &self.scores.fake {
            ScoreSource::Neural(d) => &d.net,
            ScoreSource::Analytic { .. } => unreachable!("trainer fake score is always neural"),
        };
        vec![
            ("teacher", &self.teacher.denoiser.net),
            ("student", &self.student.denoiser.net),
            ("fake", fake),
            ("head", &self.disc.head),
        ]
    }

    fn optimizers(&self) -> Vec<(&'static str, &AdamState)> {
        vec![
            ("gan_student", &self.gan.student_adam),
            ("gan_head", &self.gan.head_adam),
            ("dmd_student", &self.dmd.student_adam),
            ("dmd_fake", &self.dmd.fake_adam),
            ("dmd_head", &self.dmd.head_adam),
        ]
    }

    /// Write every piece of state needed to continue bit-exactly.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let w = Writer { dir };
        let mut networks = BTreeMap::new();
        for (name, net) in self.networks() {
            networks.insert(
                name.to_string(),
                NetEntry {
                    shape: net.shape().clone(),
                    blob: w.f64s(&format!("{name}.bin"), net.params())?,
                },
            );
        }
        let mut optimizers = BTreeMap::new();
        for (name, a) in self.optimizers() {
            optimizers.insert(name.to_string(), w.adam(name, a)?);
        }
        let logs = Logs {
            teacher: self.teacher_log.clone(),
            pretrain: self.pretrain_log.clone(),
            gan: self.gan_log.clone(),
            dmd: self.dmd_log.clone(),
        };
        let log_bytes = serde_json::to_vec(&logs)?;
        let manifest = Manifest {
            format: FORMAT,
            config: self.config.clone(),
            networks,
            optimizers,
            rng: BTreeMap::from([
                ("data".to_string(), RngState::capture(&self.data_rng)),
                ("noise".to_string(), RngState::capture(&self.noise_rng)),
            ]),
            gan_iter: self.gan.iter,
            collapse_streak: self.gan.guard.streak,
            dmd_iter: self.dmd.iter,
            fake_guard: self.dmd.fake_guard.state(),
            stamps: self.stamps.clone(),
            teacher_cached: self.teacher_cached,
            logs: w.blob("logs.json", &log_bytes, log_bytes.len())?,
        };
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))
    }

    fn read_manifest(dir: &Path) -> Result<Manifest> {
        let p = dir.join("manifest.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::Checkpoint {
            section: "manifest".into(),
            message: format!("{}: {e}", p.display()),
        })?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            section: "manifest".into(),
            message: e.to_string(),
        })?;
        if m.format != FORMAT {
            return Err(Error::Checkpoint {
                section: "manifest".into(),
                message: format!("unsupported format {}", m.format),
            });
        }
        Ok(m)
    }

    /// Rebuild a trainer from a checkpoint alone.
    pub fn restore(dir: &Path) -> Result<Self> {
        let m = Self::read_manifest(dir)?;
        let mut t = Self::assemble(m.config.clone(), blank_teacher(&m.config)?)?;
        t.load_manifest(dir, &m)?;
        Ok(t)
    }

    /// Load checkpointed state into this trainer, whose architecture must
    /// match the checkpoint's.
    pub fn restore_into(&mut self, dir: &Path) -> Result<()> {
        let m = Self::read_manifest(dir)?;
        self.load_manifest(dir, &m)
    }

    fn load_manifest(&mut self, dir: &Path, m: &Manifest) -> Result<()> {
        let section = |name: &str| -> Result<&NetEntry> {
            m.networks.get(name).ok_or_else(|| Error::Checkpoint {
                section: name.into(),
                message: "missing from manifest".into(),
            })
        };
        for name in ["teacher", "student", "fake", "head"] {
            let e = section(name)?;
            let net = match name {
                "teacher" => &mut self.teacher.denoiser.net,
                "student" => &mut self.student.denoiser.net,
                "fake" => fake_net_mut(self),
                _ => &mut self.disc.head,
            };
            if net.shape() != &e.shape {
                let (want, got) = (net.num_params(), e.blob.len);
                return Err(Error::Shape {
                    what: "checkpoint network architecture",
                    expected: want,
                    got,
                });
            }
            let params = read_f64s(dir, name, &e.blob, net.num_params())?;
            net.set_params(&params)?;
        }
        self.disc.set_backbone(&self.teacher.denoiser)?;
        if let ScoreSource::Neural(d) = &mut self.scores.real {
            *d = self.teacher.denoiser.clone();
        }
        for (name, state) in [
            ("gan_student", &mut self.gan.student_adam),
            ("gan_head", &mut self.gan.head_adam),
            ("dmd_student", &mut self.dmd.student_adam),
            ("dmd_fake", &mut self.dmd.fake_adam),
            ("dmd_head", &mut self.dmd.head_adam),
        ] {
            let e = m.optimizers.get(name).ok_or_else(|| Error::Checkpoint {
                section: name.into(),
                message: "missing from manifest".into(),
            })?;
            restore_adam(dir, name, e, state)?;
        }
        let rng = |name: &str| -> Result<_> {
            m.rng
                .get(name)
                .ok_or_else(|| Error::Checkpoint {
                    section: "rng".into(),
                    message: format!("missing stream {name}"),
                })?
                .restore()
        };
        self.data_rng = rng("data")?;
        self.noise_rng = rng("noise")?;
        self.gan.iter = m.gan_iter;
        self.gan.guard.streak = m.collapse_streak;
        self.dmd.iter = m.dmd_iter;
        self.dmd.fake_guard.restore_state(m.fake_guard.0, m.fake_guard.1);
        self.stamps = m.stamps.clone();
        self.teacher_cached = m.teacher_cached;
        let logs: Logs = serde_json::from_slice(&read_checked(dir, "logs", &m.logs)?).map_err(|e| Error::Checkpoint {
            section: "logs".into(),
            message: e.to_string(),
        })?;
        self.teacher_log = logs.teacher;
        self.pretrain_log = logs.pretrain;
        self.gan_log = logs.gan;
        self.dmd_log = logs.dmd;
        self.config = m.config.clone();
        Ok(())
    }
}
