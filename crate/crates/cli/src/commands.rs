//! One function per subcommand. Each writes into a fresh run directory and
//! echoes its resolved configuration there.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use splineop_core::format::write_framed;
use splineop_core::functional::{sample_input, Checkpoint, GridSpec, Model};
use splineop_core::network::{laplacian_modes, product_safety, MultiAgentSpec, ModalBox};
use splineop_core::pde::solve_subsystem_pde;
use splineop_core::stochastic::{mc_curve, McSettings};
use splineop_core::surrogate::{l2_project, l2_residual, ControlTensor};
use splineop_core::training::{train as train_model, Dataset, EpochStats, Metrics, Prepared, Record, Split, TrainConfig, HISTORY_HEADER};
use splineop_core::{BasisSpec, Interval, ProblemKind, SystemSpec};

use crate::data::{generate, lattice, read_dataset, write_dataset, DataConfig, ModeData};
use crate::error::{CliError, Result};
use crate::io::{fresh_dir, load_toml, read_checkpoint, read_text, write_bytes, write_checkpoint, write_text};

fn echo<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| CliError::Config { path: "resolved".into(), msg: e.to_string() })?;
    write_text(&dir.join("config.toml"), &text)
}

/// Seconds spent generating a dataset, kept apart from the manifest so the
/// manifest stays byte-reproducible.
#[derive(Debug, Default, Serialize, Deserialize)]
struct Timing {
    seconds: f64,
}

pub fn gen_data(config: &Path, seed: Option<u64>, out: &Path) -> Result<Dataset> {
    let mut cfg: DataConfig = load_toml(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|msg| CliError::Config { path: config.display().to_string(), msg })?;
    let dir = fresh_dir(out)?;
    let t0 = Instant::now();
    let data = generate(&cfg)?;
    write_dataset(&dir, &cfg, &data)?;
    let t = Timing { seconds: t0.elapsed().as_secs_f64() };
    write_text(&dir.join("timing.toml"), &toml::to_string(&t).expect("timing serializes"))?;
    Ok(data)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_loss: f64,
    pub train_seconds: f64,
    pub data_seconds: f64,
    /// Data generation plus training.
    pub offline_seconds: f64,
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub dataset: &'a Path,
    pub out: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub baseline: bool,
    pub seed: Option<u64>,
}

pub fn train(a: TrainArgs) -> Result<TrainSummary> {
    let mut cfg: TrainConfig = load_toml(a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.baseline |= a.baseline;
    cfg.validate().map_err(|e| CliError::Config { path: a.config.display().to_string(), msg: e.to_string() })?;
    let (manifest, data) = read_dataset(a.dataset)?;
    if manifest.kind != cfg.model.kind {
        return Err(CliError::Mismatch(format!(
            "refusing to train a {} model on {} data",
            cfg.model.kind.as_str(),
            manifest.kind.as_str()
        )));
    }
    let resume = a.checkpoint.map(read_checkpoint).transpose()?;
    let dir = fresh_dir(a.out)?;
    echo(&dir, &cfg)?;
    let t0 = Instant::now();
    let run = match train_model(&cfg, &data, resume.as_ref()) {
        Ok(run) => run,
        Err(abort) => {
            write_history(&dir, &abort.history)?;
            return Err(abort.error.into());
        }
    };
    let train_seconds = t0.elapsed().as_secs_f64();
    write_history(&dir, &run.history)?;
    write_checkpoint(&dir.join("best.ckpt"), &run.best)?;
    write_checkpoint(&dir.join("last.ckpt"), &run.last)?;
    let data_seconds = read_text(&a.dataset.join("timing.toml"))
        .ok()
        .and_then(|t| toml::from_str::<Timing>(&t).ok())
        .map_or(0.0, |t| t.seconds);
    let summary = TrainSummary {
        epochs: cfg.epochs,
        best_epoch: run.best.epoch,
        final_loss: run.history.last().map_or(f64::NAN, |h| h.loss),
        train_seconds,
        data_seconds,
        offline_seconds: train_seconds + data_seconds,
    };
    write_text(&dir.join("summary.toml"), &toml::to_string(&summary).expect("summary serializes"))?;
    Ok(summary)
}

fn write_history(dir: &Path, history: &[EpochStats]) -> Result<()> {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for h in history {
        s.push_str(&h.csv_row());
        s.push('\n');
    }
    write_text(&dir.join("history.csv"), &s)
}

fn check_kind(ck: &Checkpoint, kind: ProblemKind) -> Result<()> {
    if ck.config.kind != kind {
        return Err(CliError::Mismatch(format!(
            "refusing to apply a {} model to {} data",
            ck.config.kind.as_str(),
            kind.as_str()
        )));
    }
    Ok(())
}

/// Metrics over the held-out records; one row per record plus a pooled row.
pub fn eval(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<Metrics> {
    let ck = read_checkpoint(checkpoint)?;
    let (manifest, data) = read_dataset(dataset)?;
    check_kind(&ck, manifest.kind)?;
    let model = Model::new(ck.config.clone())?;
    let held: Vec<(usize, &Record)> = data.records.iter().enumerate().filter(|(_, r)| r.split == Split::Test).collect();
    if held.is_empty() {
        return Err(CliError::Dataset("no test records to evaluate".into()));
    }
    let dir = fresh_dir(out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        checkpoint: &'a str,
        dataset: &'a str,
    }
    echo(&dir, &Resolved { checkpoint: &checkpoint.display().to_string(), dataset: &dataset.display().to_string() })?;
    let mut rows = Vec::with_capacity(held.len());
    let mut csv = String::from("record,mse,mae,rel_err\n");
    for (i, r) in held {
        let m = Metrics::new(&predict_record(&model, &ck.params, r)?, &r.targets);
        writeln!(csv, "{i},{:e},{:e},{:e}", m.mse, m.mae, m.rel_err).expect("string write");
        rows.push(m);
    }
    let all = Metrics::pooled(&rows);
    writeln!(csv, "all,{:e},{:e},{:e}", all.mse, all.mae, all.rel_err).expect("string write");
    write_text(&dir.join("metrics.csv"), &csv)?;
    Ok(all)
}

pub fn predict_record(model: &Model, params: &[f64], record: &Record) -> Result<Vec<f64>> {
    let p = Prepared::new(model, record)?;
    let (out, _) = model.forward(params, &p.input)?;
    Ok(p.predict(&out))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictConfig {
    pub system: SystemSpec,
    #[serde(default)]
    pub alpha: Vec<f64>,
    pub horizon: f64,
    /// Export lattice per axis (x…, t).
    pub nodes: Vec<usize>,
}

/// Evaluate the surrogate on a lattice; writes `field.csv`, `field.bin`
/// and, for spline models, `control.bin`.
pub fn predict(checkpoint: &Path, config: &Path, out: &Path) -> Result<Vec<f64>> {
    let ck = read_checkpoint(checkpoint)?;
    let cfg: PredictConfig = load_toml(config)?;
    check_kind(&ck, cfg.system.kind)?;
    let n = cfg.system.state_dims();
    if cfg.nodes.len() != n + 1 || cfg.nodes.iter().any(|&m| m < 2) {
        return Err(CliError::Config { path: config.display().to_string(), msg: format!("nodes needs {} entries of at least 2", n + 1) });
    }
    let model = Model::new(ck.config.clone())?;
    let mut dom: Vec<(f64, f64)> = cfg.system.domain.iter().map(|iv| (iv.lo, iv.hi)).collect();
    dom.push((0.0, cfg.horizon));
    let points = lattice(&dom, &cfg.nodes);
    let count = points.len() / (n + 1);
    let record = Record {
        system: cfg.system.clone(),
        alpha: cfg.alpha.clone(),
        horizon: cfg.horizon,
        points: points.clone(),
        targets: vec![0.0; count],
        split: Split::Test,
    };
    let values = predict_record(&model, &ck.params, &record)?;
    let dir = fresh_dir(out)?;
    echo(&dir, &cfg)?;
    let mut csv = String::new();
    for a in 0..n {
        write!(csv, "x{a},").expect("string write");
    }
    csv.push_str("t,probability\n");
    for (p, v) in points.chunks(n + 1).zip(&values) {
        for c in p {
            write!(csv, "{c},").expect("string write");
        }
        writeln!(csv, "{v}").expect("string write");
    }
    write_text(&dir.join("field.csv"), &csv)?;
    let mut header = vec!["field 1".to_string(), format!("nodes {}", cfg.nodes.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(" "))];
    header.extend(dom.iter().map(|(lo, hi)| format!("axis {lo:e} {hi:e}")));
    let mut buf = Vec::new();
    write_framed(&mut buf, &header, &values)?;
    write_bytes(&dir.join("field.bin"), &buf)?;
    if !ck.config.is_baseline() {
        let grid = GridSpec { domain: record.domain(), nodes: ck.config.grid.clone() };
        let input = sample_input(&cfg.system, &grid, &cfg.alpha)?;
        let c = model.forward_control(&ck.params, &input)?;
        let mut buf = Vec::new();
        c.write_to(&mut buf)?;
        write_bytes(&dir.join("control.bin"), &buf)?;
    }
    Ok(values)
}

fn ten() -> f64 {
    10.0
}
fn three() -> usize {
    3
}
fn eleven() -> usize {
    11
}
fn four() -> usize {
    4
}
fn quarter() -> f64 {
    0.25
}
fn thousand() -> usize {
    1000
}
fn milli() -> f64 {
    1e-3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seed: u64,
    #[serde(default = "three")]
    pub systems: usize,
    #[serde(default = "ten")]
    pub horizon: f64,
    /// Evaluation times, uniform on `[0, horizon]`.
    #[serde(default = "eleven")]
    pub times: usize,
    /// Probe states per system, uniform in `[-spread, spread]` per coordinate.
    #[serde(default = "four")]
    pub probes: usize,
    #[serde(default = "quarter")]
    pub probe_spread: f64,
    #[serde(default = "thousand")]
    pub mc_trajectories: usize,
    #[serde(default = "milli")]
    pub mc_dt: f64,
    #[serde(default)]
    pub mode: ModeData,
    /// Data generation plus training time; read from the checkpoint's
    /// `summary.toml` when absent.
    pub offline_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub systems: usize,
    pub mc_seconds: f64,
    pub pde_seconds: f64,
    pub neso_seconds: f64,
    pub offline_seconds: f64,
    /// Smallest system count where offline cost plus surrogate inference beats the
    /// baseline; `None` when it never does.
    pub crossover_mc: Option<u64>,
    pub crossover_pde: Option<u64>,
    /// `(system, probe, t, mc, mc_stderr, pde, neso)`.
    pub rows: Vec<(usize, usize, f64, f64, f64, f64, f64)>,
}

/// `n* = ⌊offline / (t_base − t_neso)⌋ + 1` per system.
pub fn crossover(offline: f64, per_neso: f64, per_base: f64) -> Option<u64> {
    if per_base > per_neso && offline.is_finite() && offline >= 0.0 {
        Some((offline / (per_base - per_neso)).floor() as u64 + 1)
    } else {
        None
    }
}

pub fn benchmark(config: &Path, checkpoint: &Path, out: &Path, seed: Option<u64>) -> Result<BenchReport> {
    let mut cfg: BenchConfig = load_toml(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ck = read_checkpoint(checkpoint)?;
    check_kind(&ck, ProblemKind::Safety)?;
    let offline = match cfg.offline_seconds {
        Some(v) => v,
        None => {
            let path = checkpoint.with_file_name("summary.toml");
            load_toml::<TrainSummary>(&path)?.offline_seconds
        }
    };
    let dir = fresh_dir(out)?;
    echo(&dir, &cfg)?;
    let report = run_benchmark(&cfg, &ck, offline)?;
    let mut csv = String::from("method,n_systems,seconds\n");
    for (m, s) in [("mc", report.mc_seconds), ("pde", report.pde_seconds), ("neso", report.neso_seconds)] {
        writeln!(csv, "{m},{},{s:.6}", report.systems).expect("string write");
    }
    write_text(&dir.join("timing.csv"), &csv)?;
    let mut csv = String::from("baseline,offline_seconds,per_system_baseline,per_system_neso,n_star\n");
    let n = report.systems as f64;
    for (m, s, c) in [("mc", report.mc_seconds, report.crossover_mc), ("pde", report.pde_seconds, report.crossover_pde)] {
        let star = c.map_or("inf".to_string(), |v| v.to_string());
        writeln!(csv, "{m},{offline:.3},{:.6},{:.6},{star}", s / n, report.neso_seconds / n).expect("string write");
    }
    write_text(&dir.join("crossover.csv"), &csv)?;
    let mut csv = String::from("system,probe,t,mc,mc_stderr,pde,neso\n");
    for r in &report.rows {
        writeln!(csv, "{},{},{},{},{},{},{}", r.0, r.1, r.2, r.3, r.4, r.5, r.6).expect("string write");
    }
    write_text(&dir.join("probabilities.csv"), &csv)?;
    Ok(report)
}

/// Time the three estimators on `cfg.systems` random networks.
pub fn run_benchmark(cfg: &BenchConfig, ck: &Checkpoint, offline: f64) -> Result<BenchReport> {
    let model = Model::new(ck.config.clone())?;
    let m = &cfg.mode;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let times: Vec<f64> = (0..cfg.times).map(|k| cfg.horizon * k as f64 / (cfg.times.max(2) - 1) as f64).collect();
    let draws = crate::data::mode_draws(rng.random(), cfg.systems, m);
    let settings = m.pde_settings();
    let (mut t_mc, mut t_pde, mut t_neso) = (0.0, 0.0, 0.0);
    let mut rows = Vec::new();
    for (si, (beta2, alpha)) in draws.into_iter().enumerate() {
        let spec = MultiAgentSpec::reference(m.beta1, beta2, m.sigma, alpha.clone())?;
        let agents = spec.agents();
        let probes: Vec<Vec<f64>> = (0..cfg.probes)
            .map(|_| (0..2 * agents).map(|_| rng.random_range(-cfg.probe_spread..=cfg.probe_spread)).collect())
            .collect();
        let (_, vectors) = laplacian_modes(&spec.laplacian_matrix())?;
        let modes = spec.mode_systems()?;

        let t0 = Instant::now();
        let region = ModalBox::new(&spec)?;
        let mc: Vec<_> = probes
            .iter()
            .enumerate()
            .map(|(pi, x0)| {
                let mc = McSettings { trajectories: cfg.mc_trajectories, dt: cfg.mc_dt, seed: rng.random::<u64>() ^ pi as u64 };
                mc_curve(&spec.full_drift(), &vec![m.sigma; 2 * agents], &region, ProblemKind::Safety, x0, &times, mc)
            })
            .collect();
        t_mc += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let sols = modes
            .iter()
            .zip(&alpha)
            .map(|(sys, &a)| match sys.drift {
                splineop_core::Drift::Mode { beta1, lambda, beta2 } => solve_subsystem_pde(beta1 + lambda, beta2, m.sigma, a, &settings, cfg.horizon),
                _ => unreachable!("mode systems carry mode drift"),
            })
            .collect::<splineop_core::Result<Vec<_>>>()?;
        let pde: Vec<Vec<f64>> = probes.iter().map(|x| times.iter().map(|&t| product_safety(&sols, &vectors, x, t)).collect()).collect();
        t_pde += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let surfaces = modes
            .iter()
            .zip(&alpha)
            .map(|(sys, &a)| {
                let mut domain = sys.domain.clone();
                domain.push(Interval { lo: 0.0, hi: cfg.horizon });
                let input = sample_input(sys, &GridSpec { domain, nodes: ck.config.grid.clone() }, &[a])?;
                model.forward_control(&ck.params, &input)
            })
            .collect::<splineop_core::Result<Vec<ControlTensor>>>()?;
        let neso: Vec<Vec<f64>> = probes.iter().map(|x| times.iter().map(|&t| product_safety(&surfaces, &vectors, x, t)).collect()).collect();
        t_neso += t0.elapsed().as_secs_f64();

        for pi in 0..probes.len() {
            for (k, &t) in times.iter().enumerate() {
                rows.push((si, pi, t, mc[pi][k].estimate, mc[pi][k].stderr, pde[pi][k], neso[pi][k]));
            }
        }
    }
    let n = cfg.systems.max(1) as f64;
    Ok(BenchReport {
        systems: cfg.systems,
        mc_seconds: t_mc,
        pde_seconds: t_pde,
        neso_seconds: t_neso,
        offline_seconds: offline,
        crossover_mc: crossover(offline, t_neso / n, t_mc / n),
        crossover_pde: crossover(offline, t_neso / n, t_pde / n),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectTarget {
    Constant,
    Linear,
    /// `Π_a sin(2π u_a)`.
    Sine,
}

fn project_dims() -> usize {
    1
}
fn project_per_span() -> usize {
    6
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub target: ProjectTarget,
    #[serde(default = "project_dims")]
    pub dims: usize,
    pub degree: usize,
    /// Control points per axis, one projection per entry.
    pub levels: Vec<usize>,
    #[serde(default = "project_per_span")]
    pub per_span: usize,
}

/// L2 projection of a reference function on the unit cube at each level;
/// returns `(count, residual)` and writes the control tensors.
pub fn project(config: &Path, out: &Path) -> Result<Vec<(usize, f64)>> {
    let cfg: ProjectConfig = load_toml(config)?;
    if cfg.dims == 0 || cfg.levels.is_empty() {
        return Err(CliError::Config { path: config.display().to_string(), msg: "dims and levels must be non-empty".into() });
    }
    let target = move |u: &[f64]| -> f64 {
        match cfg.target {
            ProjectTarget::Constant => 0.75,
            ProjectTarget::Linear => 0.5 + u.iter().enumerate().map(|(a, v)| (a + 1) as f64 * v).sum::<f64>(),
            ProjectTarget::Sine => u.iter().map(|v| (2.0 * std::f64::consts::PI * v).sin()).product(),
        }
    };
    let dir = fresh_dir(out)?;
    echo(&dir, &cfg)?;
    let unit = Interval { lo: 0.0, hi: 1.0 };
    let mut csv = String::from("count,residual\n");
    let mut res = Vec::new();
    for &l in &cfg.levels {
        let basis = BasisSpec::uniform(&vec![(l, cfg.degree, unit); cfg.dims])?;
        let c = l2_project(target, &basis, cfg.per_span)?;
        let r = l2_residual(target, &c, cfg.per_span)?;
        writeln!(csv, "{l},{r:e}").expect("string write");
        let mut buf = Vec::new();
        c.write_to(&mut buf)?;
        write_bytes(&dir.join(format!("control_{l}.bin")), &buf)?;
        res.push((l, r));
    }
    write_text(&dir.join("residual.csv"), &csv)?;
    Ok(res)
}
