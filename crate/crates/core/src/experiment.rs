//! Experiment configuration and the commands behind the CLI.
//!
//! Every command is a deterministic function of its configuration and root
//! seed. Outputs go under a root directory with one subdirectory per kind:
//!
//! ```text
//! <root>/checkpoints/  <label>-<hash>.ckpt
//! <root>/manifests/    <label>-<hash>.json
//! <root>/metrics/      <label>-<hash>.csv / .json
//! <root>/heatmaps/     <label>-<hash>.txt / .pgm
//! ```
//!
//! `<hash>` is the first 16 hex digits of a SHA-256 over the file's
//! deterministic content (wall time excluded), so reruns land on the same
//! names.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::datagen::{self, LengthDistribution, SamplerConfig, TokenSequence};
use crate::diversity::{self, LpInstance};
use crate::error::{LabError, Result};
use crate::evalkit::{self, BlockSpec, MetricsRecord};
use crate::model::ModelParams;
use crate::oracle::{self, exact};
use crate::rng::streams;
use crate::trainer::{self, TrainConfig};

pub const OUTPUT_ROOT_ENV: &str = "LAB_OUTPUT_ROOT";
pub const WORKERS_ENV: &str = "LAB_WORKERS";

/// Named length-distribution family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum DistSpec {
    Point {
        ell: usize,
    },
    Uniform {
        lo: usize,
        hi: usize,
    },
    Explicit {
        support: Vec<usize>,
        masses: Vec<f64>,
    },
    /// Linear optimum of the cost LP; `u` defaults to `N_trg`.
    Optimal {
        u: Option<usize>,
    },
}

impl DistSpec {
    pub fn build(&self, cfg: &SamplerConfig) -> Result<LengthDistribution> {
        match self {
            DistSpec::Point { ell } => LengthDistribution::point(*ell),
            DistSpec::Uniform { lo, hi } => LengthDistribution::uniform(*lo, *hi),
            DistSpec::Explicit { support, masses } => LengthDistribution::new(support.clone(), masses.clone()),
            DistSpec::Optimal { u } => diversity::optimal_distribution(cfg.n_trg, u.unwrap_or(cfg.n_trg)),
        }
    }
}

/// Parses `point:3`, `uniform:3:8`, `optimal`, `optimal:5` or `explicit:3=0.5,4=0.5`.
impl FromStr for DistSpec {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            LabError::InvalidConfig(format!(
                "cannot parse distribution '{s}'; expected point:ELL, uniform:LO:HI, optimal[:U] or explicit:ELL=MASS,..."
            ))
        };
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let (family, rest) = s.split_once(':').unwrap_or((s, ""));
        match family.trim() {
            "point" => Ok(DistSpec::Point { ell: num(rest)? }),
            "uniform" => {
                let (lo, hi) = rest.split_once(':').ok_or_else(bad)?;
                Ok(DistSpec::Uniform {
                    lo: num(lo)?,
                    hi: num(hi)?,
                })
            }
            "optimal" if rest.is_empty() => Ok(DistSpec::Optimal { u: None }),
            "optimal" => Ok(DistSpec::Optimal { u: Some(num(rest)?) }),
            "explicit" => {
                let mut support = Vec::new();
                let mut masses = Vec::new();
                for item in rest.split(',') {
                    let (l, m) = item.split_once('=').ok_or_else(bad)?;
                    support.push(num(l)?);
                    masses.push(m.trim().parse::<f64>().map_err(|_| bad())?);
                }
                Ok(DistSpec::Explicit { support, masses })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub eta_v: f64,
    pub eta_kq: f64,
    pub m_v: usize,
    pub m_kq: usize,
    /// Feed the stage-one sequences to stage two as well.
    pub reuse_samples: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            eta_v: t.eta_v,
            eta_kq: t.eta_kq,
            m_v: t.m_v,
            m_kq: t.m_kq,
            reuse_samples: t.reuse_samples,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            eta_v: self.eta_v,
            eta_kq: self.eta_kq,
            m_v: self.m_v,
            m_kq: self.m_kq,
            seed,
            reuse_samples: self.reuse_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ell_min: usize,
    pub ell_max: usize,
    pub n_test: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ell_min: 3,
            ell_max: 8,
            n_test: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub ell_min: Vec<usize>,
    pub ell_max: Vec<usize>,
    pub n_trg: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ell_min: (3..=15).collect(),
            ell_max: (3..=15).collect(),
            n_trg: vec![4, 8],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcentrationSection {
    pub m_list: Vec<usize>,
    pub seeds: usize,
    /// Kept small so the output softmax stays near uniform and the linearized
    /// `W_KQ` expectation is the limit of the empirical step.
    pub eta_v: f64,
    pub eta_kq: f64,
}

impl Default for ConcentrationSection {
    fn default() -> Self {
        Self {
            m_list: vec![1_000, 10_000, 100_000],
            seeds: 5,
            eta_v: 0.01,
            eta_kq: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output root; `LAB_OUTPUT_ROOT` and the command line take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Sweep worker threads; `LAB_WORKERS` and the command line take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub dist: DistSpec,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub concentration: ConcentrationSection,
}

impl ExperimentConfig {
    /// Defaults of the two-trigger heatmap setting: `N = 16`, `N_trg = 2`, `L = 40`, `Unif({3..8})`.
    pub fn example() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            workers: None,
            sampler: SamplerConfig { n: 16, n_trg: 2, l: 40 },
            train: TrainSection::default(),
            dist: DistSpec::Uniform { lo: 3, hi: 8 },
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            concentration: ConcentrationSection::default(),
        }
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::parse(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::parse(path, e.to_string()))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        let dist = self.dist.build(&self.sampler)?;
        self.sampler.check_distribution(&dist)?;
        self.train.with_seed(self.seed).validate()?;
        if self.eval.ell_min + 1 > self.eval.ell_max {
            return Err(LabError::InvalidConfig(format!(
                "eval needs ell_min < ell_max, got {} and {}",
                self.eval.ell_min, self.eval.ell_max
            )));
        }
        self.sampler
            .check_fits(self.eval.ell_max, self.eval.ell_max)
            .map_err(|_| {
                LabError::InvalidConfig(format!(
                    "eval ell_max = {} needs L >= {}, but L = {}",
                    self.eval.ell_max,
                    2 * self.eval.ell_max + 5,
                    self.sampler.l
                ))
            })?;
        Ok(())
    }

    /// Checks the sweep axes; only `sweep` needs them.
    pub fn validate_sweep(&self) -> Result<()> {
        for &nt in &self.sweep.n_trg {
            SamplerConfig::new(self.sampler.n, nt, self.sampler.l)
                .map_err(|e| LabError::InvalidConfig(format!("sweep N_trg = {nt}: {e}")))?;
        }
        Ok(())
    }

    pub fn distribution(&self) -> Result<LengthDistribution> {
        self.dist.build(&self.sampler)
    }
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn short(hash: &str) -> &str {
    &hash[..16]
}

/// Output directory layout rooted at one path.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["checkpoints", "manifests", "metrics", "heatmaps"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn dir(&self, kind: &str) -> PathBuf {
        self.root.join(kind)
    }

    /// Writes `content` to `<kind>/<label>-<hash>.<ext>` and returns the path.
    pub fn write_addressed(&self, kind: &str, label: &str, ext: &str, content: &[u8]) -> Result<PathBuf> {
        let hash = sha256_hex(content);
        let path = self.dir(kind).join(format!("{label}-{}.{ext}", short(&hash)));
        fs::write(&path, content)?;
        Ok(path)
    }
}

/// Run manifest. `content_hash` covers every field except `wall_time_ms` and the
/// output placement.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    /// How the pretraining samples were split between the two stages.
    pub sample_split: String,
    pub outputs: Vec<(String, String)>,
    pub summary: serde_json::Value,
    pub content_hash: String,
    pub wall_time_ms: Option<u128>,
}

impl Manifest {
    fn new(
        command: &str,
        config: &ExperimentConfig,
        outputs: Vec<(String, String)>,
        summary: serde_json::Value,
    ) -> Self {
        let t = &config.train;
        let sample_split = if t.reuse_samples {
            format!(
                "reused: stage two takes the first {} of {} stage-one sequences",
                t.m_kq, t.m_v
            )
        } else {
            format!("disjoint: {} for W_V, {} for W_KQ", t.m_v, t.m_kq)
        };
        let mut m = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            seed: config.seed,
            sample_split,
            outputs,
            summary,
            content_hash: String::new(),
            wall_time_ms: None,
        };
        // Placement fields do not change results, so they stay out of the hash.
        let mut hashed = m.clone();
        hashed.config.output_dir = None;
        hashed.config.workers = None;
        m.content_hash = sha256_hex(serde_json::to_string(&hashed).expect("manifest serializes").as_bytes());
        m
    }

    fn write(mut self, layout: &OutputLayout, label: &str, started: Instant) -> Result<PathBuf> {
        self.wall_time_ms = Some(started.elapsed().as_millis());
        let path = layout
            .dir("manifests")
            .join(format!("{label}-{}.json", short(&self.content_hash)));
        fs::write(&path, serde_json::to_string_pretty(&self)?)?;
        Ok(path)
    }
}

fn rel(layout: &OutputLayout, p: &Path) -> String {
    p.strip_prefix(&layout.root).unwrap_or(p).display().to_string()
}

// ---------------------------------------------------------------- generate

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Train,
    Ood,
}

pub fn generate(config: &ExperimentConfig, kind: DatasetKind, count: usize) -> Result<Vec<TokenSequence>> {
    let cfg = config.sampler;
    match kind {
        DatasetKind::Train => {
            let dist = config.distribution()?;
            datagen::generate_train_dataset(&cfg, &dist, config.seed, streams::GENERATE, count)
        }
        DatasetKind::Ood => datagen::generate_ood_dataset(
            &cfg,
            config.eval.ell_min,
            config.eval.ell_max,
            config.seed,
            streams::GENERATE,
            count,
        ),
    }
}

pub fn cmd_generate<W: Write>(config: &ExperimentConfig, kind: DatasetKind, count: usize, out: W) -> Result<usize> {
    let seqs = generate(config, kind, count)?;
    datagen::write_dataset(BufWriter::new(out), &seqs)?;
    Ok(seqs.len())
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub manifest_hash: String,
    pub probe: evalkit::MechanismProbe,
    pub in_distribution_accuracy: f64,
    pub warnings: Vec<String>,
}

pub fn cmd_train(config: &ExperimentConfig, layout: &OutputLayout) -> Result<TrainOutcome> {
    let started = Instant::now();
    config.validate()?;
    let cfg = config.sampler;
    let dist = config.distribution()?;
    let params = trainer::run_algorithm1(&cfg, &dist, &config.train.with_seed(config.seed))?;
    let text = checkpoint::to_string(&params);
    let ckpt = layout.write_addressed("checkpoints", "train", "ckpt", text.as_bytes())?;
    let probe = evalkit::probe_mechanism(&params, &dist)?;
    let acc = evalkit::eval_in_distribution(&params, &dist, config.eval.n_test, config.seed)?;
    let summary = serde_json::json!({
        "checkpoint_sha256": sha256_hex(text.as_bytes()),
        "distribution": dist.to_string(),
        "max_sum_ratio": diversity::max_sum_ratio(&dist),
        "dominant_mechanism": probe.dominant,
        "induction_strength": probe.induction_strength,
        "max_positional_strength": probe.max_positional(),
        "in_distribution_accuracy": acc,
    });
    let manifest = Manifest::new(
        "train",
        config,
        vec![("checkpoint".into(), rel(layout, &ckpt))],
        summary,
    );
    let hash = manifest.content_hash.clone();
    let mpath = manifest.write(layout, "train", started)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        manifest: mpath,
        manifest_hash: hash,
        probe,
        in_distribution_accuracy: acc,
        warnings: cfg.scaling_warnings(&dist).iter().map(|w| w.to_string()).collect(),
    })
}

// ---------------------------------------------------------------- eval

pub fn cmd_eval(
    params: &ModelParams,
    ell_min: usize,
    ell_max: usize,
    n_test: usize,
    seed: u64,
    dist: Option<&LengthDistribution>,
) -> Result<MetricsRecord> {
    let mut rec = evalkit::eval_ood(params, ell_min, ell_max, n_test, seed)?;
    if let Some(d) = dist {
        rec.dominant_mechanism = Some(evalkit::probe_mechanism(params, d)?.dominant);
    }
    Ok(rec)
}

pub fn write_metrics<W: Write>(out: W, records: &[MetricsRecord], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(BufReader::new(fs::File::open(path)?));
    r.deserialize().map(|row| row.map_err(LabError::from)).collect()
}

// ---------------------------------------------------------------- sweep

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub ell_min: usize,
    pub ell_max: usize,
    pub n_trg: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellFailure {
    pub ell_min: usize,
    pub ell_max: usize,
    #[serde(rename = "N_trg")]
    pub n_trg: usize,
    pub seed: u64,
    pub error: String,
}

/// Cells with `ell_min < ell_max`, ordered by `(N_trg, ell_min, ell_max, seed)`.
pub fn sweep_cells(s: &SweepSection) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &n_trg in &s.n_trg {
        for &ell_min in &s.ell_min {
            for &ell_max in &s.ell_max {
                if ell_min < ell_max {
                    for &seed in &s.seeds {
                        cells.push(Cell {
                            ell_min,
                            ell_max,
                            n_trg,
                            seed,
                        });
                    }
                }
            }
        }
    }
    cells
}

/// Trains on `Unif([ell_min, ell_max])` and evaluates on the matching OOD sampler.
pub fn run_cell(config: &ExperimentConfig, cell: Cell) -> Result<MetricsRecord> {
    let cfg = SamplerConfig::new(config.sampler.n, cell.n_trg, config.sampler.l)?;
    let dist = LengthDistribution::uniform(cell.ell_min, cell.ell_max)?;
    let params = trainer::run_algorithm1(&cfg, &dist, &config.train.with_seed(cell.seed))?;
    cmd_eval(
        &params,
        cell.ell_min,
        cell.ell_max,
        config.eval.n_test,
        cell.seed,
        Some(&dist),
    )
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub metrics: PathBuf,
    pub failures: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub failed: Vec<CellFailure>,
    pub computed: usize,
    pub skipped: usize,
}

/// Runs every sweep cell not yet present in the metrics table and appends its row.
///
/// The table path depends only on the configuration, so a rerun resumes it;
/// `force` discards existing rows first.
pub fn cmd_sweep(config: &ExperimentConfig, layout: &OutputLayout, force: bool) -> Result<SweepOutcome> {
    config.validate_sweep()?;
    let key =
        sha256_hex(serde_json::to_string(&(&config.sampler, &config.train, &config.eval, &config.sweep))?.as_bytes());
    let metrics = layout.dir("metrics").join(format!("sweep-{}.csv", short(&key)));
    let failures = layout
        .dir("metrics")
        .join(format!("sweep-{}-failures.csv", short(&key)));
    if force {
        for p in [&metrics, &failures] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
    }
    let existing = if metrics.exists() {
        read_metrics(&metrics)?
    } else {
        Vec::new()
    };
    let done: BTreeSet<Cell> = existing
        .iter()
        .map(|r| Cell {
            ell_min: r.ell_min,
            ell_max: r.ell_max,
            n_trg: r.n_trg,
            seed: r.seed,
        })
        .collect();
    let todo: Vec<Cell> = sweep_cells(&config.sweep)
        .into_iter()
        .filter(|c| !done.contains(c))
        .collect();
    let skipped = sweep_cells(&config.sweep).len() - todo.len();
    let results: Vec<(Cell, Result<MetricsRecord>)> = todo.par_iter().map(|&c| (c, run_cell(config, c))).collect();

    let mut new_rows = Vec::new();
    let mut failed = Vec::new();
    for (c, r) in results {
        match r {
            Ok(rec) => new_rows.push(rec),
            Err(e) => failed.push(CellFailure {
                ell_min: c.ell_min,
                ell_max: c.ell_max,
                n_trg: c.n_trg,
                seed: c.seed,
                error: e.to_string(),
            }),
        }
    }
    let header = !metrics.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(&metrics)?;
    write_metrics(file, &new_rows, header)?;
    if !failed.is_empty() {
        let header = !failures.exists();
        let file = fs::OpenOptions::new().create(true).append(true).open(&failures)?;
        let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(file);
        for f in &failed {
            w.serialize(f)?;
        }
        w.flush()?;
    }
    let computed = new_rows.len();
    let mut records = existing;
    records.extend(new_rows);
    Ok(SweepOutcome {
        metrics,
        failures,
        records,
        failed,
        computed,
        skipped,
    })
}

// ---------------------------------------------------------------- concentration

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConcentrationRow {
    pub m: usize,
    pub wv_error: f64,
    pub wkq_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConcentrationReport {
    pub rows: Vec<ConcentrationRow>,
    /// Least-squares slope of `log error` against `log M`; absent when an error is zero.
    pub wv_slope: Option<f64>,
    pub wkq_slope: Option<f64>,
    pub seeds: usize,
    pub eta_v: f64,
    pub eta_kq: f64,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || ys.iter().any(|y| *y <= 0.0 || !y.is_finite()) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Some(sxy / sxx)
}

/// Frobenius distance of the empirical one-step matrices to their population limits,
/// averaged over seeds `seed .. seed + seeds`.
pub fn concentration(config: &ExperimentConfig) -> Result<ConcentrationReport> {
    let cfg = config.sampler;
    let dist = config.distribution()?;
    cfg.check_distribution(&dist)?;
    let c = &config.concentration;
    if c.seeds == 0 || c.m_list.is_empty() {
        return Err(LabError::InvalidConfig(
            "concentration needs seeds > 0 and a non-empty m_list".into(),
        ));
    }
    let wv_pop = oracle::population_wv(&dist, &cfg, c.eta_v / cfg.n as f64);
    let wkq_pop = exact::population_wkq_linearized(&dist, &cfg, &wv_pop, c.eta_kq)?;
    let mut rows = Vec::new();
    for &m in &c.m_list {
        let (mut ev, mut ek) = (0.0, 0.0);
        for s in 0..c.seeds as u64 {
            let tc = TrainConfig {
                eta_v: c.eta_v,
                eta_kq: c.eta_kq,
                m_v: m,
                m_kq: m,
                seed: config.seed + s,
                reuse_samples: false,
            };
            let p = trainer::run_algorithm1(&cfg, &dist, &tc)?;
            ev += p.w_v.sub(&wv_pop).frobenius_norm();
            ek += p.w_kq.sub(&wkq_pop).frobenius_norm();
        }
        rows.push(ConcentrationRow {
            m,
            wv_error: ev / c.seeds as f64,
            wkq_error: ek / c.seeds as f64,
        });
    }
    let ms: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
    let ev: Vec<f64> = rows.iter().map(|r| r.wv_error).collect();
    let ek: Vec<f64> = rows.iter().map(|r| r.wkq_error).collect();
    Ok(ConcentrationReport {
        wv_slope: log_log_slope(&ms, &ev),
        wkq_slope: log_log_slope(&ms, &ek),
        rows,
        seeds: c.seeds,
        eta_v: c.eta_v,
        eta_kq: c.eta_kq,
    })
}

pub fn cmd_concentration(config: &ExperimentConfig, layout: &OutputLayout) -> Result<(ConcentrationReport, PathBuf)> {
    let report = concentration(config)?;
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in &report.rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    layout.write_addressed("metrics", "concentration", "csv", &buf)?;
    let json = serde_json::to_string_pretty(&report)?;
    let path = layout.write_addressed("metrics", "concentration", "json", json.as_bytes())?;
    Ok((report, path))
}

// ---------------------------------------------------------------- oracle

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub distribution: String,
    pub max_sum_ratio: f64,
    pub max_sum_ratio_t: f64,
    pub eta_tilde_v: f64,
    pub eta_tilde: f64,
    pub wkq_error_bound: f64,
    pub certificate: oracle::Certificate,
}

/// Population matrices for the configured distribution and learning rates.
pub fn oracle_params(config: &ExperimentConfig) -> Result<(ModelParams, OracleReport)> {
    let cfg = config.sampler;
    let dist = config.distribution()?;
    cfg.check_distribution(&dist)?;
    let eta_tilde_v = config.train.eta_v / cfg.n as f64;
    let stats = oracle::population_stats(&dist, cfg.l);
    let eta_tilde = eta_tilde_v * config.train.eta_kq * stats.expected_inv_t;
    let w_v = oracle::population_wv(&dist, &cfg, eta_tilde_v);
    let wkq = oracle::population_wkq(&dist, &cfg, eta_tilde);
    let params = ModelParams::new(cfg, wkq.matrix, w_v)?;
    let certificate = oracle::certify_ood(&dist, &cfg);
    Ok((
        params,
        OracleReport {
            distribution: dist.to_string(),
            max_sum_ratio: certificate.max_sum_ratio,
            max_sum_ratio_t: certificate.max_sum_ratio_t,
            eta_tilde_v,
            eta_tilde,
            wkq_error_bound: wkq.error_bound,
            certificate,
        },
    ))
}

pub fn cmd_oracle(config: &ExperimentConfig, layout: &OutputLayout) -> Result<(OracleReport, PathBuf, PathBuf)> {
    let (params, report) = oracle_params(config)?;
    let ckpt = layout.write_addressed(
        "checkpoints",
        "oracle",
        "ckpt",
        checkpoint::to_string(&params).as_bytes(),
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    let rpath = layout.write_addressed("metrics", "oracle", "json", json.as_bytes())?;
    Ok((report, ckpt, rpath))
}

// ---------------------------------------------------------------- lp

#[derive(Clone, Debug, Serialize)]
pub struct LpReport {
    pub n_trg: usize,
    pub u: usize,
    pub resolution: u64,
    pub closed_form: Vec<f64>,
    pub closed_form_objective: f64,
    pub closed_form_ratio: f64,
    pub brute_force: diversity::LpSolution,
    pub kkt: diversity::KktReport,
    /// No grid point beats the closed form by more than `1e-9`.
    pub agree: bool,
}

pub fn cmd_lp(n_trg: usize, u: usize, resolution: u64) -> Result<LpReport> {
    let inst = LpInstance::new(n_trg, u)?;
    let dist = diversity::optimal_distribution(n_trg, u)?;
    let q = diversity::masses_on_horizon(&inst, &dist)?;
    let obj = inst.objective(&q);
    let brute = diversity::brute_force_lp(&inst, resolution)?;
    let kkt = diversity::check_kkt(&inst, &dist)?;
    Ok(LpReport {
        n_trg,
        u,
        resolution,
        closed_form_ratio: diversity::max_sum_ratio(&dist),
        agree: brute.best_objective >= obj - 1e-9,
        closed_form: q,
        closed_form_objective: obj,
        brute_force: brute,
        kkt,
    })
}

// ---------------------------------------------------------------- heatmap

pub fn cmd_heatmap(
    params: &ModelParams,
    spec: BlockSpec,
    spec_text: &str,
    layout: &OutputLayout,
    pgm: bool,
) -> Result<(PathBuf, Option<PathBuf>)> {
    let m = evalkit::export_heatmap(params, spec);
    let mut grid = Vec::new();
    evalkit::write_grid(&mut grid, &m)?;
    let label = format!("wkq-{}", spec_text.replace(':', "-"));
    let gpath = layout.write_addressed("heatmaps", &label, "txt", &grid)?;
    let ipath = if pgm {
        let mut img = Vec::new();
        evalkit::write_pgm(&mut img, &m)?;
        Some(layout.write_addressed("heatmaps", &label, "pgm", &img)?)
    } else {
        None
    };
    Ok((gpath, ipath))
}

/// Runs `f` on a pool of `workers` threads, or the global pool when `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| LabError::Resource(e.to_string()))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}
