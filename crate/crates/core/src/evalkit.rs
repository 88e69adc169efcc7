//! OOD metrics, the mechanism probe on `W_KQ`, and heatmap export.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, total_length, LengthDistribution, SamplerConfig};
use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::model::{self, ModelParams};
use crate::rng::streams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Positional,
    Induction,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Positional => "positional",
            Mechanism::Induction => "induction",
        })
    }
}

/// One row of a metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub ell_min: usize,
    pub ell_max: usize,
    #[serde(rename = "N_trg")]
    pub n_trg: usize,
    pub seed: u64,
    pub ood_accuracy: f64,
    pub pseudo_rate: f64,
    pub leftmost_rate: f64,
    pub dominant_mechanism: Option<Mechanism>,
    pub n_samples: usize,
}

#[derive(Default, Clone, Copy)]
struct Counts {
    correct: usize,
    pseudo: usize,
    leftmost: usize,
}

/// OOD accuracy and the two shortcut error rates over `n` test sequences.
///
/// Sequence `i` comes from the OOD evaluation stream of `seed`. The pseudo
/// event is a prediction equal to `z_{l~+2}` with `l~ = (l1 + l2) / 2`; the
/// leftmost event is a prediction equal to `z_{ell_min+2}`. Events may
/// overlap with each other and with a correct answer.
pub fn eval_ood(params: &ModelParams, ell_min: usize, ell_max: usize, n: usize, seed: u64) -> Result<MetricsRecord> {
    let cfg = params.cfg;
    let counts = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Counts> {
            let s = datagen::ood_sequence_at(&cfg, ell_min, ell_max, seed, streams::EVAL_OOD, i as u64)?;
            let x = model::embed_prompt(&s, &cfg)?;
            let pred = model::predict_token(&x, params);
            let pseudo_pos = (s.ell1 + s.ell2) / 2 + 2;
            Ok(Counts {
                correct: (pred == s.target()) as usize,
                pseudo: (pred == s.token(pseudo_pos)) as usize,
                leftmost: (pred == s.token(ell_min + 2)) as usize,
            })
        })
        .try_reduce(Counts::default, |a, b| {
            Ok(Counts {
                correct: a.correct + b.correct,
                pseudo: a.pseudo + b.pseudo,
                leftmost: a.leftmost + b.leftmost,
            })
        })?;
    let nf = n.max(1) as f64;
    Ok(MetricsRecord {
        ell_min,
        ell_max,
        n_trg: cfg.n_trg,
        seed,
        ood_accuracy: counts.correct as f64 / nf,
        pseudo_rate: counts.pseudo as f64 / nf,
        leftmost_rate: counts.leftmost as f64 / nf,
        dominant_mechanism: None,
        n_samples: n,
    })
}

/// Next-token accuracy on fresh pretraining-distribution sequences.
pub fn eval_in_distribution(params: &ModelParams, dist: &LengthDistribution, n: usize, seed: u64) -> Result<f64> {
    let cfg = params.cfg;
    cfg.check_distribution(dist)?;
    let correct = (0..n)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let s = datagen::train_sequence_at(&cfg, dist, seed, streams::EVAL_IN, i as u64)?;
            let x = model::embed_prompt(&s, &cfg)?;
            Ok((model::predict_token(&x, params) == s.target()) as usize)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / n.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MechanismProbe {
    /// Mean over triggers `w` of the entry (previous-token `w`, token `w`).
    pub induction_strength: f64,
    /// `(ell, entry (position ell+2, position T(ell)))` for each supported length.
    pub positional_strengths: Vec<(usize, f64)>,
    pub dominant: Mechanism,
}

impl MechanismProbe {
    pub fn max_positional(&self) -> f64 {
        self.positional_strengths
            .iter()
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Reads the induction and positional entries of `W_KQ`; ties count as positional.
pub fn probe_mechanism(params: &ModelParams, dist: &LengthDistribution) -> Result<MechanismProbe> {
    let cfg = params.cfg;
    cfg.check_distribution(dist)?;
    let (n, nt, l) = (cfg.n, cfg.n_trg, cfg.l);
    let w = &params.w_kq;
    let induction_strength = (0..nt).map(|t| w[(l + n + t, l + t)]).sum::<f64>() / nt as f64;
    let positional_strengths: Vec<(usize, f64)> = dist
        .support()
        .iter()
        .map(|&ell| (ell, w[(ell + 1, total_length(ell) - 1)]))
        .collect();
    let max_pos = positional_strengths
        .iter()
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(MechanismProbe {
        induction_strength,
        positional_strengths,
        dominant: if induction_strength > max_pos {
            Mechanism::Induction
        } else {
            Mechanism::Positional
        },
    })
}

/// Mean attention placed on the induction target `l1 + 2` and on the shortcut
/// position `l~ + 2` over OOD test sequences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttentionMass {
    pub induction: f64,
    pub shortcut: f64,
}

pub fn attention_mass(
    params: &ModelParams,
    ell_min: usize,
    ell_max: usize,
    n: usize,
    seed: u64,
) -> Result<AttentionMass> {
    let cfg = params.cfg;
    let parts: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let s = datagen::ood_sequence_at(&cfg, ell_min, ell_max, seed, streams::PROBE, i as u64)?;
            let x = model::embed_prompt(&s, &cfg)?;
            let a = model::attention_weights(&x, params);
            Ok((a[s.ell1 + 1], a[(s.ell1 + s.ell2) / 2 + 1]))
        })
        .collect::<Result<_>>()?;
    let nf = n.max(1) as f64;
    Ok(AttentionMass {
        induction: parts.iter().map(|p| p.0).sum::<f64>() / nf,
        shortcut: parts.iter().map(|p| p.1).sum::<f64>() / nf,
    })
}

/// Row or column block of the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Position,
    Token,
    Previous,
    All,
}

impl Block {
    fn range(self, cfg: &SamplerConfig) -> std::ops::Range<usize> {
        let (l, n) = (cfg.l, cfg.n);
        match self {
            Block::Position => 0..l,
            Block::Token => l..l + n,
            Block::Previous => l + n..l + 2 * n,
            Block::All => 0..l + 2 * n,
        }
    }
}

impl FromStr for Block {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" | "pos" => Ok(Block::Position),
            "token" | "tok" => Ok(Block::Token),
            "previous" | "prev" => Ok(Block::Previous),
            "all" | "full" => Ok(Block::All),
            other => Err(LabError::UnknownBlock(other.to_string())),
        }
    }
}

/// `rows:cols` selection of `W_KQ`, e.g. `position:position` or `previous:token`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub rows: Block,
    pub cols: Block,
}

impl FromStr for BlockSpec {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((r, c)) => Ok(BlockSpec {
                rows: r.parse()?,
                cols: c.parse()?,
            }),
            None => {
                let b: Block = s.parse()?;
                Ok(BlockSpec { rows: b, cols: b })
            }
        }
    }
}

pub fn export_heatmap(params: &ModelParams, spec: BlockSpec) -> Matrix {
    params
        .w_kq
        .submatrix(spec.rows.range(&params.cfg), spec.cols.range(&params.cfg))
}

/// Whitespace-separated grid, one matrix row per line, shortest round-trip floats.
pub fn write_grid<W: Write>(mut out: W, m: &Matrix) -> Result<()> {
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn read_grid<R: BufRead>(input: R, path: &Path) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (no, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| LabError::parse(path, format!("line {}: {e}", no + 1)))?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(LabError::parse(path, format!("line {}: ragged row", no + 1)));
            }
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}

/// Plain (ASCII) PGM with min-max normalization: `round(255 (v - min) / (max - min))`,
/// and all zeros for a constant matrix.
pub fn write_pgm<W: Write>(mut out: W, m: &Matrix) -> Result<()> {
    let min = m.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let max = m.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    writeln!(out, "P2\n{} {}\n255", m.cols(), m.rows())?;
    for i in 0..m.rows() {
        let row: Vec<String> = m
            .row(i)
            .iter()
            .map(|v| {
                let g = if span > 0.0 {
                    (255.0 * (v - min) / span).round()
                } else {
                    0.0
                };
                (g as u8).to_string()
            })
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}
