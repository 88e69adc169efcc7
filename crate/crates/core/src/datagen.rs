//! Trigger-output sequences and pretraining length distributions.
//!
//! Token ids are 1-indexed everywhere: triggers are `1..=n_trg`, all other
//! tokens are `n_trg+1..=n`. Positions are 1-indexed as well.
//!
//! Draw order for one sequence (each item is one call on the generator):
//! the length (training sequences only, one `f64`), then for OOD sequences
//! `ell` and `ell1` (one integer each), then the trigger, the output, and
//! finally the irrelevant tokens from left to right.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{self, LabRng};

const MASS_TOLERANCE: f64 = 1e-12;

/// Discrete distribution over subtext lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct LengthDistribution {
    support: Vec<usize>,
    masses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawDistribution {
    support: Vec<usize>,
    masses: Vec<f64>,
}

impl TryFrom<RawDistribution> for LengthDistribution {
    type Error = LabError;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        LengthDistribution::new(raw.support, raw.masses)
    }
}

impl From<LengthDistribution> for RawDistribution {
    fn from(d: LengthDistribution) -> Self {
        RawDistribution {
            support: d.support,
            masses: d.masses,
        }
    }
}

impl LengthDistribution {
    pub fn new(support: Vec<usize>, masses: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(LabError::InvalidDistribution("empty support".into()));
        }
        if support.len() != masses.len() {
            return Err(LabError::InvalidDistribution(format!(
                "{} support points but {} masses",
                support.len(),
                masses.len()
            )));
        }
        if support[0] == 0 {
            return Err(LabError::InvalidDistribution("lengths must be at least 1".into()));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LabError::InvalidDistribution(
                "support must be strictly increasing".into(),
            ));
        }
        if let Some(q) = masses.iter().find(|q| !q.is_finite() || **q < 0.0) {
            return Err(LabError::InvalidDistribution(format!(
                "mass {q} is negative or not finite"
            )));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(LabError::InvalidDistribution(format!(
                "masses sum to {total}, expected 1"
            )));
        }
        Ok(Self { support, masses })
    }

    /// Point mass on `ell`.
    pub fn point(ell: usize) -> Result<Self> {
        Self::new(vec![ell], vec![1.0])
    }

    /// Uniform on `lo..=hi`.
    pub fn uniform(lo: usize, hi: usize) -> Result<Self> {
        if lo > hi {
            return Err(LabError::InvalidDistribution(format!(
                "empty uniform range {lo}..={hi}"
            )));
        }
        let k = hi - lo + 1;
        Self::new((lo..=hi).collect(), vec![1.0 / k as f64; k])
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// `(ell, q_ell)` pairs with positive mass.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.support
            .iter()
            .copied()
            .zip(self.masses.iter().copied())
            .filter(|(_, q)| *q > 0.0)
    }

    pub fn mass(&self, ell: usize) -> f64 {
        self.support.binary_search(&ell).map(|i| self.masses[i]).unwrap_or(0.0)
    }

    /// Smallest length with positive mass.
    pub fn min_len(&self) -> usize {
        self.iter().map(|(l, _)| l).next().expect("nonempty")
    }

    /// Largest length with positive mass.
    pub fn max_len(&self) -> usize {
        self.iter().map(|(l, _)| l).last().expect("nonempty")
    }

    /// Inverse-CDF draw; consumes one `f64`.
    pub fn sample(&self, rng: &mut LabRng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (ell, q) in self.iter() {
            acc += q;
            if u < acc {
                return ell;
            }
        }
        self.max_len()
    }
}

impl fmt::Display for LengthDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|(l, q)| format!("{l}:{q:.6}")).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

pub fn sample_length(dist: &LengthDistribution, rng: &mut LabRng) -> usize {
    dist.sample(rng)
}

/// Total length `T(ell) = 2 ell + 3` of a training sequence (the position of the second trigger).
pub fn total_length(ell: usize) -> usize {
    2 * ell + 3
}

/// A scaling assumption of the analysis that a configuration violates.
#[derive(Clone, Debug, PartialEq)]
pub enum ScalingWarning {
    /// `n_trg >= n^(1/3)`.
    TooManyTriggers { n: usize, n_trg: usize },
    /// Some pretraining length is below 4, which the asymptotic analysis excludes.
    ShortLength { ell: usize },
}

impl fmt::Display for ScalingWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalingWarning::TooManyTriggers { n, n_trg } => write!(
                f,
                "N_trg = {n_trg} is not small against N^(1/3) = {:.3}; results may leave the asymptotic regime",
                (*n as f64).cbrt()
            ),
            ScalingWarning::ShortLength { ell } => write!(
                f,
                "pretraining length {ell} < 4 is outside the asymptotic regime (ell >= 4); the population oracles remain exact"
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Vocabulary size.
    pub n: usize,
    /// Number of trigger tokens.
    pub n_trg: usize,
    /// Maximum sequence length (number of positional embeddings).
    pub l: usize,
}

impl SamplerConfig {
    pub fn new(n: usize, n_trg: usize, l: usize) -> Result<Self> {
        let cfg = Self { n, n_trg, l };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trg == 0 || self.n_trg >= self.n {
            return Err(LabError::InvalidConfig(format!(
                "need 1 <= N_trg < N, got N_trg = {} and N = {}",
                self.n_trg, self.n
            )));
        }
        if self.l < 6 {
            return Err(LabError::InvalidConfig(format!(
                "L = {} cannot hold the shortest sequence (needs L >= 6)",
                self.l
            )));
        }
        Ok(())
    }

    /// Embedding dimension `D = L + 2N`.
    pub fn d(&self) -> usize {
        self.l + 2 * self.n
    }

    pub fn n_other(&self) -> usize {
        self.n - self.n_trg
    }

    /// Largest `ell1 + ell2` such that the sequence (with its target) fits.
    pub fn max_subtext_total(&self) -> usize {
        self.l - 5
    }

    pub fn check_fits(&self, ell1: usize, ell2: usize) -> Result<()> {
        let needed = ell1 + ell2 + 4;
        if needed > self.l - 1 {
            return Err(LabError::LengthOverflow {
                ell1,
                ell2,
                needed,
                available: self.l - 1,
            });
        }
        Ok(())
    }

    /// Every length of `dist` must produce a sequence that fits.
    pub fn check_distribution(&self, dist: &LengthDistribution) -> Result<()> {
        for &ell in dist.support() {
            self.check_fits(ell, ell).map_err(|_| {
                LabError::InvalidConfig(format!(
                    "length {ell} needs 2*{ell}+4 <= L-1 but L = {}; raise L to at least {}",
                    self.l,
                    2 * ell + 5
                ))
            })?;
        }
        Ok(())
    }

    pub fn scaling_warnings(&self, dist: &LengthDistribution) -> Vec<ScalingWarning> {
        let mut out = Vec::new();
        if (self.n_trg as f64) >= (self.n as f64).cbrt() {
            out.push(ScalingWarning::TooManyTriggers {
                n: self.n,
                n_trg: self.n_trg,
            });
        }
        out.extend(
            dist.iter()
                .filter(|(ell, _)| *ell < 4)
                .map(|(ell, _)| ScalingWarning::ShortLength { ell }),
        );
        out
    }
}

/// One sequence `z_1 .. z_{T+1}` with `T = ell1 + ell2 + 3`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub ell1: usize,
    pub ell2: usize,
    pub trigger: usize,
    pub output: usize,
}

impl TokenSequence {
    /// Position of the second trigger (the query), `T`.
    pub fn query_position(&self) -> usize {
        self.ell1 + self.ell2 + 3
    }

    /// Token at 1-indexed position `pos`.
    pub fn token(&self, pos: usize) -> usize {
        self.tokens[pos - 1]
    }

    /// The prompt `z_1 .. z_T`.
    pub fn context(&self) -> &[usize] {
        &self.tokens[..self.query_position()]
    }

    /// The prediction target `z_{T+1}`.
    pub fn target(&self) -> usize {
        self.tokens[self.query_position()]
    }

    /// Builds the layout `[a.., t, o, b.., t, o]` from explicit irrelevant tokens.
    pub fn from_parts(first: &[usize], trigger: usize, output: usize, second: &[usize]) -> TokenSequence {
        let mut tokens = Vec::with_capacity(first.len() + second.len() + 4);
        tokens.extend_from_slice(first);
        tokens.push(trigger);
        tokens.push(output);
        tokens.extend_from_slice(second);
        tokens.push(trigger);
        tokens.push(output);
        TokenSequence {
            tokens,
            ell1: first.len(),
            ell2: second.len(),
            trigger,
            output,
        }
    }

    /// Checks the layout invariants against `cfg`.
    pub fn validate(&self, cfg: &SamplerConfig) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidConfig(format!("malformed sequence: {msg}")));
        let t = self.query_position();
        if self.ell1 == 0 || self.ell2 == 0 {
            return bad("subtext lengths must be positive".into());
        }
        if self.tokens.len() != t + 1 {
            return bad(format!("{} tokens, expected {}", self.tokens.len(), t + 1));
        }
        cfg.check_fits(self.ell1, self.ell2)?;
        if !(1..=cfg.n_trg).contains(&self.trigger) {
            return bad(format!("trigger {} is not a trigger token", self.trigger));
        }
        if !(cfg.n_trg + 1..=cfg.n).contains(&self.output) {
            return bad(format!("output {} is not an ordinary token", self.output));
        }
        for (pos, &tok) in self.tokens.iter().enumerate().map(|(i, z)| (i + 1, z)) {
            let expected = if pos == self.ell1 + 1 || pos == t {
                Some(self.trigger)
            } else if pos == self.ell1 + 2 || pos == t + 1 {
                Some(self.output)
            } else {
                None
            };
            match expected {
                Some(e) if e != tok => return bad(format!("position {pos} holds {tok}, expected {e}")),
                None if !(cfg.n_trg + 1..=cfg.n).contains(&tok) => {
                    return bad(format!(
                        "irrelevant token {tok} at position {pos} collides with triggers"
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn draw_sequence(cfg: &SamplerConfig, ell1: usize, ell2: usize, rng: &mut LabRng) -> TokenSequence {
    let trigger = rng.random_range(1..=cfg.n_trg);
    let output = rng.random_range(cfg.n_trg + 1..=cfg.n);
    let mut draw = |k: usize| -> Vec<usize> { (0..k).map(|_| rng.random_range(cfg.n_trg + 1..=cfg.n)).collect() };
    let first = draw(ell1);
    let second = draw(ell2);
    TokenSequence::from_parts(&first, trigger, output, &second)
}

/// Training sequence with `ell1 = ell2 = ell`.
pub fn sample_train_sequence(cfg: &SamplerConfig, ell: usize, rng: &mut LabRng) -> Result<TokenSequence> {
    sample_general_sequence(cfg, ell, ell, rng)
}

/// Sequence with arbitrary subtext lengths.
pub fn sample_general_sequence(
    cfg: &SamplerConfig,
    ell1: usize,
    ell2: usize,
    rng: &mut LabRng,
) -> Result<TokenSequence> {
    if ell1 == 0 || ell2 == 0 {
        return Err(LabError::InvalidConfig("subtext lengths must be at least 1".into()));
    }
    cfg.check_fits(ell1, ell2)?;
    Ok(draw_sequence(cfg, ell1, ell2, rng))
}

/// OOD test sequence: `ell ~ Unif[ell_min+1, ell_max]`, `ell1 ~ Unif({1..2ell-1} \ {ell})`,
/// `ell2 = 2 ell - ell1`.
pub fn sample_ood_sequence(
    cfg: &SamplerConfig,
    ell_min: usize,
    ell_max: usize,
    rng: &mut LabRng,
) -> Result<TokenSequence> {
    if ell_min + 1 > ell_max {
        return Err(LabError::InvalidRange { ell_min, ell_max });
    }
    cfg.check_fits(ell_max, ell_max)?;
    let ell = rng.random_range(ell_min + 1..=ell_max);
    let j = rng.random_range(1..=2 * ell - 2);
    let ell1 = if j < ell { j } else { j + 1 };
    let ell2 = 2 * ell - ell1;
    Ok(draw_sequence(cfg, ell1, ell2, rng))
}

/// Training sequence `index` of a stream: draws its length, then its tokens.
pub fn train_sequence_at(
    cfg: &SamplerConfig,
    dist: &LengthDistribution,
    root: u64,
    stream: u64,
    index: u64,
) -> Result<TokenSequence> {
    let mut rng = rng::sequence_rng(root, stream, index);
    let ell = dist.sample(&mut rng);
    sample_train_sequence(cfg, ell, &mut rng)
}

pub fn ood_sequence_at(
    cfg: &SamplerConfig,
    ell_min: usize,
    ell_max: usize,
    root: u64,
    stream: u64,
    index: u64,
) -> Result<TokenSequence> {
    let mut rng = rng::sequence_rng(root, stream, index);
    sample_ood_sequence(cfg, ell_min, ell_max, &mut rng)
}

pub fn generate_train_dataset(
    cfg: &SamplerConfig,
    dist: &LengthDistribution,
    root: u64,
    stream: u64,
    count: usize,
) -> Result<Vec<TokenSequence>> {
    cfg.check_distribution(dist)?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| train_sequence_at(cfg, dist, root, stream, i))
        .collect()
}

pub fn generate_ood_dataset(
    cfg: &SamplerConfig,
    ell_min: usize,
    ell_max: usize,
    root: u64,
    stream: u64,
    count: usize,
) -> Result<Vec<TokenSequence>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| ood_sequence_at(cfg, ell_min, ell_max, root, stream, i))
        .collect()
}

/// Writes one JSON object per line: `{"tokens":[..],"ell1":..,"ell2":..,"trigger":..,"output":..}`.
pub fn write_dataset<W: Write>(mut out: W, seqs: &[TokenSequence]) -> Result<()> {
    for s in seqs {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`] and validates every record against `cfg`.
pub fn read_dataset<R: BufRead>(input: R, cfg: &SamplerConfig, path: &Path) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: TokenSequence =
            serde_json::from_str(&line).map_err(|e| LabError::parse(path, format!("line {}: {e}", lineno + 1)))?;
        seq.validate(cfg)
            .map_err(|e| LabError::parse(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(seq);
    }
    Ok(out)
}
