//! Dataset generation and the on-disk layout: `manifest.toml` describing
//! every record plus `records.bin` holding points and targets as
//! little-endian float64.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use splineop_core::network::{laplacian_modes, REFERENCE_LAPLACIAN};
use splineop_core::pde::{solve_pde, PdeSettings};
use splineop_core::stochastic::{random_sine_dynamics, recovery_truth, RECOVERY_PANELS};
use splineop_core::training::{Dataset, Record, Split};
use splineop_core::{ProblemKind, SystemSpec};

use crate::error::{CliError, Result};
use crate::io::{read_text, write_bytes, write_text};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Case {
    SineRecovery,
    MultiAgentMode,
}

impl Case {
    pub fn kind(self) -> ProblemKind {
        match self {
            Case::SineRecovery => ProblemKind::Recovery,
            Case::MultiAgentMode => ProblemKind::Safety,
        }
    }
}

fn ten() -> f64 {
    10.0
}
fn panels() -> usize {
    RECOVERY_PANELS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineData {
    #[serde(default = "panels")]
    pub panels: usize,
}

impl Default for SineData {
    fn default() -> Self {
        Self { panels: panels() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeData {
    pub beta1: f64,
    pub sigma: f64,
    pub beta2_range: [f64; 2],
    pub alpha_range: [f64; 2],
    pub pde_nodes: Vec<usize>,
    pub pde_time_levels: usize,
    pub pde_dt: Option<f64>,
}

impl Default for ModeData {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            sigma: 0.2,
            beta2_range: [0.5, 2.0],
            alpha_range: [1.0, 2.0],
            pde_nodes: vec![81, 81],
            pde_time_levels: 101,
            pde_dt: Some(1e-2),
        }
    }
}

impl ModeData {
    pub fn pde_settings(&self) -> PdeSettings {
        PdeSettings { nodes: self.pde_nodes.clone(), time_levels: self.pde_time_levels, dt: self.pde_dt }
    }
}

/// Generator configuration. For the sine case the split counts are
/// records; for the mode case they are network systems, each giving one
/// record per Laplacian mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub case: Case,
    pub seed: u64,
    pub train: usize,
    #[serde(default)]
    pub validation: usize,
    pub test: usize,
    #[serde(default = "ten")]
    pub horizon: f64,
    /// Evaluation lattice per axis (x…, t).
    pub eval_nodes: Vec<usize>,
    #[serde(default)]
    pub sine: SineData,
    #[serde(default)]
    pub mode: ModeData,
}

impl DataConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let dims = match self.case {
            Case::SineRecovery => 2,
            Case::MultiAgentMode => 3,
        };
        if self.eval_nodes.len() != dims || self.eval_nodes.iter().any(|&n| n < 2) {
            return Err(format!("eval_nodes needs {dims} entries of at least 2"));
        }
        if !(self.horizon > 0.0) {
            return Err("horizon must be positive".into());
        }
        if self.train + self.validation + self.test == 0 {
            return Err("no records requested".into());
        }
        let m = &self.mode;
        if m.beta2_range[0] > m.beta2_range[1] || m.alpha_range[0] > m.alpha_range[1] || !(m.alpha_range[0] > 0.0) {
            return Err("mode ranges must be ordered with positive thresholds".into());
        }
        Ok(())
    }

    fn splits(&self) -> Vec<Split> {
        let mut s = vec![Split::Train; self.train];
        s.extend(std::iter::repeat_n(Split::Validation, self.validation));
        s.extend(std::iter::repeat_n(Split::Test, self.test));
        s
    }
}

/// Regular lattice over `domain` in row-major order, flattened.
pub fn lattice(domain: &[(f64, f64)], nodes: &[usize]) -> Vec<f64> {
    let total: usize = nodes.iter().product();
    let mut out = Vec::with_capacity(total * nodes.len());
    let mut idx = vec![0usize; nodes.len()];
    for flat in 0..total {
        splineop_core::tensor::unravel(flat, nodes, &mut idx);
        for (a, &i) in idx.iter().enumerate() {
            let (lo, hi) = domain[a];
            out.push(if i + 1 == nodes[a] { hi } else { lo + (hi - lo) * i as f64 / (nodes[a] - 1) as f64 });
        }
    }
    out
}

/// Closed-form recovery targets for one random sine system.
pub fn sine_record(system_seed: u64, horizon: f64, eval_nodes: &[usize], panels: usize, split: Split) -> Record {
    let system = random_sine_dynamics(system_seed);
    let params = system.sine_params().expect("sine family");
    let iv = system.domain[0];
    let points = lattice(&[(iv.lo, iv.hi), (0.0, horizon)], eval_nodes);
    let targets = points.chunks(2).map(|p| recovery_truth(&params, p[0], p[1], panels)).collect();
    Record { system, alpha: vec![], horizon, points, targets, split }
}

/// Finite-difference targets for one mode subsystem, interpolated onto the
/// evaluation lattice.
pub fn mode_record(system: SystemSpec, alpha: f64, horizon: f64, settings: &PdeSettings, eval_nodes: &[usize], split: Split) -> splineop_core::Result<Record> {
    let sol = solve_pde(&system, settings, horizon)?;
    let points = lattice(&[(-alpha, alpha), (-alpha, alpha), (0.0, horizon)], eval_nodes);
    let targets = points
        .chunks(3)
        .map(|p| sol.value_at(&p[..2], p[2]).map(|v| v.clamp(0.0, 1.0)))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| splineop_core::Error::Numerical("evaluation point outside the solved grid".into()))?;
    Ok(Record { system, alpha: vec![alpha], horizon, points, targets, split })
}

/// `(β₂, α)` for each network system, drawn uniformly from the ranges.
pub fn mode_draws(seed: u64, count: usize, m: &ModeData) -> Vec<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents = REFERENCE_LAPLACIAN.len();
    (0..count)
        .map(|_| {
            let b = rng.random_range(m.beta2_range[0]..=m.beta2_range[1]);
            let a = (0..agents).map(|_| rng.random_range(m.alpha_range[0]..=m.alpha_range[1])).collect();
            (b, a)
        })
        .collect()
}

/// Generate every record of `cfg`; identical output for identical input.
pub fn generate(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate().map_err(|msg| CliError::Config { path: "data".into(), msg })?;
    let splits = cfg.splits();
    let records = match cfg.case {
        Case::SineRecovery => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let seeds: Vec<u64> = splits.iter().map(|_| rng.random()).collect();
            seeds
                .par_iter()
                .zip(&splits)
                .map(|(&s, &split)| sine_record(s, cfg.horizon, &cfg.eval_nodes, cfg.sine.panels, split))
                .collect()
        }
        Case::MultiAgentMode => {
            let m = &cfg.mode;
            let l = splineop_core::network::MultiAgentSpec::reference(m.beta1, 1.0, m.sigma, vec![1.0; REFERENCE_LAPLACIAN.len()])?;
            let (lambda, _) = laplacian_modes(&l.laplacian_matrix())?;
            let settings = m.pde_settings();
            let jobs: Vec<(f64, f64, f64, Split)> = mode_draws(cfg.seed, splits.len(), m)
                .into_iter()
                .zip(&splits)
                .flat_map(|((b, a), &split)| lambda.iter().zip(a).map(move |(&lk, ak)| (lk, b, ak, split)).collect::<Vec<_>>())
                .collect();
            jobs.par_iter()
                .map(|&(lk, b, ak, split)| {
                    let sys = SystemSpec::mode_safety(m.beta1, lk, b, m.sigma, ak)?;
                    mode_record(sys, ak, cfg.horizon, &settings, &cfg.eval_nodes, split)
                })
                .collect::<splineop_core::Result<Vec<_>>>()?
        }
    };
    Ok(Dataset { records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub split: Split,
    pub horizon: f64,
    pub alpha: Vec<f64>,
    /// Coordinates per point.
    pub dims: usize,
    pub points: usize,
    /// Byte offset of this record in `records.bin`.
    pub offset: u64,
    pub system: SystemSpec,
}

impl RecordEntry {
    fn byte_len(&self) -> u64 {
        (self.points * (self.dims + 1) * 8) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: u32,
    pub case: Case,
    pub kind: ProblemKind,
    pub record_count: usize,
    pub generator: DataConfig,
    pub records: Vec<RecordEntry>,
}

pub const MANIFEST: &str = "manifest.toml";
pub const RECORDS: &str = "records.bin";

/// Write `manifest.toml` and `records.bin` into `dir`.
pub fn write_dataset(dir: &Path, cfg: &DataConfig, data: &Dataset) -> Result<DatasetManifest> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(data.records.len());
    for r in &data.records {
        let dims = r.system.state_dims() + 1;
        entries.push(RecordEntry {
            split: r.split,
            horizon: r.horizon,
            alpha: r.alpha.clone(),
            dims,
            points: r.point_count(),
            offset: bytes.len() as u64,
            system: r.system.clone(),
        });
        for v in r.points.iter().chain(&r.targets) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = DatasetManifest {
        schema: SCHEMA_VERSION,
        case: cfg.case,
        kind: cfg.case.kind(),
        record_count: entries.len(),
        generator: cfg.clone(),
        records: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Dataset(e.to_string()))?;
    write_bytes(&dir.join(RECORDS), &bytes)?;
    write_text(&dir.join(MANIFEST), &text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let m: DatasetManifest =
        toml::from_str(&read_text(&path)?).map_err(|e| CliError::Dataset(format!("{}: {e}", path.display())))?;
    if m.schema != SCHEMA_VERSION {
        return Err(CliError::Dataset(format!("unsupported schema version {}", m.schema)));
    }
    if m.record_count != m.records.len() {
        return Err(CliError::Dataset(format!("record_count {} but {} entries", m.record_count, m.records.len())));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    let m = read_manifest(dir)?;
    let path = dir.join(RECORDS);
    let bytes = fs::read(&path).map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
    let mut at = 0u64;
    let mut records = Vec::with_capacity(m.records.len());
    for (i, e) in m.records.iter().enumerate() {
        if e.offset != at || e.dims != e.system.state_dims() + 1 {
            return Err(CliError::Dataset(format!("record {i}: offset {} or dims {} inconsistent", e.offset, e.dims)));
        }
        let end = at + e.byte_len();
        if end > bytes.len() as u64 {
            return Err(CliError::Dataset(format!("record {i} runs past the end of {RECORDS}")));
        }
        let vals: Vec<f64> = bytes[at as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (points, targets) = vals.split_at(e.points * e.dims);
        let rec = Record {
            system: e.system.clone(),
            alpha: e.alpha.clone(),
            horizon: e.horizon,
            points: points.to_vec(),
            targets: targets.to_vec(),
            split: e.split,
        };
        rec.validate().map_err(|err| CliError::Dataset(format!("record {i}: {err}")))?;
        records.push(rec);
        at = end;
    }
    if at != bytes.len() as u64 {
        return Err(CliError::Dataset(format!("{RECORDS} has {} trailing bytes", bytes.len() as u64 - at)));
    }
    Ok((m, Dataset { records }))
}
