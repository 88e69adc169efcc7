//! Command-line harness for the induction-head length-generalization experiments.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use induction_lab::checkpoint;
use induction_lab::evalkit::BlockSpec;
use induction_lab::experiment::{self, DatasetKind, DistSpec, ExperimentConfig, OutputLayout};

#[derive(Parser)]
#[command(
    name = "induction-lab",
    version,
    about = "One-step training of a single-layer attention model on the two-trigger copying task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write sampled sequences as JSON lines.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "train")]
        kind: Kind,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the two-stage one-step training and write a checkpoint and manifest.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on out-of-distribution sequences.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every (ell_min < ell_max, N_trg) cell of the sweep grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Sweep workers; overrides LAB_WORKERS and the config.
        #[arg(long)]
        workers: Option<usize>,
        /// Discard existing rows and recompute every cell.
        #[arg(long)]
        force: bool,
        #[arg(long, value_delimiter = ',')]
        sweep_ell_min: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sweep_ell_max: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sweep_n_trg: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sweep_seeds: Option<Vec<u64>>,
    },
    /// Write the population-limit checkpoint and the OOD certificate.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// Measure how fast empirical one-step matrices approach their population limits.
    Concentration {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        m_list: Option<Vec<usize>>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Solve the length-distribution cost LP in closed form and check it by enumeration.
    Lp {
        #[arg(long)]
        n_trg: usize,
        #[arg(long)]
        u: usize,
        #[arg(long, default_value_t = 60)]
        resolution: u64,
    },
    /// Export a block of W_KQ as a numeric grid and optionally a PGM image.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Row and column blocks, e.g. `pos:pos`, `prev:token` or `all`.
        #[arg(long, default_value = "pos:pos")]
        block: String,
        #[arg(long)]
        pgm: bool,
        #[arg(long, env = experiment::OUTPUT_ROOT_ENV)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Train,
    Ood,
}

/// Config file plus per-field overrides.
#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; overrides the config.
    #[arg(long, env = experiment::OUTPUT_ROOT_ENV)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_trg: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    /// point:ELL, uniform:LO:HI, optimal[:U] or explicit:ELL=MASS,...
    #[arg(long)]
    dist: Option<DistSpec>,
    #[arg(long)]
    eta_v: Option<f64>,
    #[arg(long)]
    eta_kq: Option<f64>,
    #[arg(long)]
    m_v: Option<usize>,
    #[arg(long)]
    m_kq: Option<usize>,
    /// Reuse the stage-one sequences for stage two.
    #[arg(long)]
    reuse_samples: bool,
    #[arg(long)]
    ell_min: Option<usize>,
    #[arg(long)]
    ell_max: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::example(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.output {
            c.output_dir = Some(v.clone());
        }
        if let Some(v) = self.n {
            c.sampler.n = v;
        }
        if let Some(v) = self.n_trg {
            c.sampler.n_trg = v;
        }
        if let Some(v) = self.l {
            c.sampler.l = v;
        }
        if let Some(v) = &self.dist {
            c.dist = v.clone();
        }
        if let Some(v) = self.eta_v {
            c.train.eta_v = v;
        }
        if let Some(v) = self.eta_kq {
            c.train.eta_kq = v;
        }
        if let Some(v) = self.m_v {
            c.train.m_v = v;
        }
        if let Some(v) = self.m_kq {
            c.train.m_kq = v;
        }
        if self.reuse_samples {
            c.train.reuse_samples = true;
        }
        if let Some(v) = self.ell_min {
            c.eval.ell_min = v;
        }
        if let Some(v) = self.ell_max {
            c.eval.ell_max = v;
        }
        if let Some(v) = self.n_test {
            c.eval.n_test = v;
        }
        c.validate().context("invalid experiment configuration")?;
        Ok(c)
    }
}

fn layout(config: &ExperimentConfig) -> Result<OutputLayout> {
    let root = config.output_dir.clone().unwrap_or_else(|| PathBuf::from("lab-output"));
    OutputLayout::new(&root).with_context(|| format!("cannot create output root {}", root.display()))
}

fn workers(flag: Option<usize>, config: &ExperimentConfig) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(experiment::WORKERS_ENV) {
        Ok(v) => Ok(Some(v.parse().with_context(|| {
            format!("{} must be a positive integer, got '{v}'", experiment::WORKERS_ENV)
        })?)),
        Err(_) => Ok(config.workers),
    }
}

fn load_checkpoint(path: &Path) -> Result<induction_lab::ModelParams> {
    checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            common,
            kind,
            count,
            out,
        } => {
            let config = common.resolve()?;
            let kind = match kind {
                Kind::Train => DatasetKind::Train,
                Kind::Ood => DatasetKind::Ood,
            };
            match out {
                Some(path) => {
                    let file = fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
                    let n = experiment::cmd_generate(&config, kind, count, file)?;
                    eprintln!("wrote {n} sequences to {}", path.display());
                }
                None => {
                    experiment::cmd_generate(&config, kind, count, io::stdout().lock())?;
                }
            }
        }
        Command::Train { common } => {
            let config = common.resolve()?;
            let dist = config.distribution()?;
            for w in config.sampler.scaling_warnings(&dist) {
                eprintln!("warning: {w}");
            }
            let out = experiment::cmd_train(&config, &layout(&config)?)?;
            println!("checkpoint: {}", out.checkpoint.display());
            println!("manifest:   {}", out.manifest.display());
            println!("manifest hash: {}", out.manifest_hash);
            println!(
                "dominant mechanism: {} (induction {:.6e}, max positional {:.6e})",
                out.probe.dominant,
                out.probe.induction_strength,
                out.probe.max_positional()
            );
            println!("in-distribution accuracy: {:.4}", out.in_distribution_accuracy);
        }
        Command::Eval { common, checkpoint } => {
            let config = common.resolve()?;
            let params = load_checkpoint(&checkpoint)?;
            let dist = config.distribution().ok();
            let rec = experiment::cmd_eval(
                &params,
                config.eval.ell_min,
                config.eval.ell_max,
                config.eval.n_test,
                config.seed,
                dist.as_ref().filter(|d| params.cfg.check_distribution(d).is_ok()),
            )?;
            let mut buf = Vec::new();
            experiment::write_metrics(&mut buf, std::slice::from_ref(&rec), true)?;
            let lay = layout(&config)?;
            let path = lay.write_addressed("metrics", "eval", "csv", &buf)?;
            io::stdout().write_all(&buf)?;
            eprintln!("metrics: {}", path.display());
        }
        Command::Sweep {
            common,
            workers: flag,
            force,
            sweep_ell_min,
            sweep_ell_max,
            sweep_n_trg,
            sweep_seeds,
        } => {
            let mut config = common.resolve()?;
            if let Some(v) = sweep_ell_min {
                config.sweep.ell_min = v;
            }
            if let Some(v) = sweep_ell_max {
                config.sweep.ell_max = v;
            }
            if let Some(v) = sweep_n_trg {
                config.sweep.n_trg = v;
            }
            if let Some(v) = sweep_seeds {
                config.sweep.seeds = v;
            }
            config.validate()?;
            let lay = layout(&config)?;
            let n_workers = workers(flag, &config)?;
            let out = experiment::with_workers(n_workers, || experiment::cmd_sweep(&config, &lay, force))??;
            println!("metrics:  {}", out.metrics.display());
            println!(
                "computed {} cells, skipped {} already present",
                out.computed, out.skipped
            );
            if !out.failed.is_empty() {
                println!("{} cells failed; see {}", out.failed.len(), out.failures.display());
            }
        }
        Command::Oracle { common } => {
            let config = common.resolve()?;
            let (report, ckpt, rpath) = experiment::cmd_oracle(&config, &layout(&config)?)?;
            print_json(&report)?;
            eprintln!("checkpoint: {}", ckpt.display());
            eprintln!("report:     {}", rpath.display());
        }
        Command::Concentration { common, m_list, seeds } => {
            let mut config = common.resolve()?;
            if let Some(v) = m_list {
                config.concentration.m_list = v;
            }
            if let Some(v) = seeds {
                config.concentration.seeds = v;
            }
            let (report, path) = experiment::cmd_concentration(&config, &layout(&config)?)?;
            print_json(&report)?;
            eprintln!("report: {}", path.display());
        }
        Command::Lp { n_trg, u, resolution } => {
            let report = experiment::cmd_lp(n_trg, u, resolution)?;
            print_json(&report)?;
            if !report.agree || !report.kkt.satisfied {
                bail!(
                    "closed form not confirmed (agree = {}, kkt = {})",
                    report.agree,
                    report.kkt.satisfied
                );
            }
        }
        Command::Heatmap {
            checkpoint,
            block,
            pgm,
            output,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let spec: BlockSpec = block.parse()?;
            let root = output.unwrap_or_else(|| PathBuf::from("lab-output"));
            let lay = OutputLayout::new(&root)?;
            let (grid, image) = experiment::cmd_heatmap(&params, spec, &block, &lay, pgm)?;
            println!("grid:  {}", grid.display());
            if let Some(p) = image {
                println!("image: {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
