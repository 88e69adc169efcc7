//! Population-limit closed forms for the one-step trained model.
//!
//! * [`population_wv`] is the exact expectation of the stage-one `W_V` step.
//! * [`population_wkq`] is the dominant part of the stage-two `W_KQ` step: a
//!   positional component mapping `p_T(ell)` to `p_{ell+2}, p_{ell+3}` and an
//!   induction component mapping the trigger token to the previous-token
//!   embedding of the same trigger. Terms of relative size `N_trg / N` are
//!   dropped and only their bound is reported.
//! * [`attention_logit_closed_form`] evaluates `x_t^T W_KQ x_T` for the
//!   dominant matrix term by term, and [`certify_ood`] scans adversarial test
//!   sequences with it.
//! * [`exact::population_wkq_linearized`] is the exact expectation of the
//!   stage-two step with the output softmax linearized at the uniform
//!   distribution, used as the convergence target for finite-sample runs.

pub mod exact;

use rayon::prelude::*;
use serde::Serialize;

use crate::datagen::{total_length, LengthDistribution, SamplerConfig, TokenSequence};
use crate::diversity;
use crate::error::{LabError, Result};
use crate::matrix::Matrix;

/// Expectations over the pretraining length distribution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PopulationStats {
    /// `E[T^-1]`.
    pub expected_inv_t: f64,
    /// `E[T^-2]`.
    pub expected_inv_t2: f64,
    /// `alpha[t-1] = E[T^-1 1{t <= T}]` for `t = 1..=L`.
    pub alpha: Vec<f64>,
    /// `alpha_sq[t-1] = E[T^-2 1{t <= T}]` for `t = 1..=L`.
    pub alpha_sq: Vec<f64>,
    /// `(ell, q_ell / T(ell))` for every supported length.
    pub per_ell_terms: Vec<(usize, f64)>,
}

pub fn population_stats(dist: &LengthDistribution, l: usize) -> PopulationStats {
    let mut s = PopulationStats {
        expected_inv_t: 0.0,
        expected_inv_t2: 0.0,
        alpha: vec![0.0; l],
        alpha_sq: vec![0.0; l],
        per_ell_terms: Vec::new(),
    };
    for (ell, q) in dist.iter() {
        let t = total_length(ell) as f64;
        s.expected_inv_t += q / t;
        s.expected_inv_t2 += q / (t * t);
        for pos in 0..total_length(ell).min(l) {
            s.alpha[pos] += q / t;
            s.alpha_sq[pos] += q / (t * t);
        }
        s.per_ell_terms.push((ell, q / t));
    }
    s
}

/// Expected stage-one value matrix when the step size is `N * eta_tilde_v`.
pub fn population_wv(dist: &LengthDistribution, cfg: &SamplerConfig, eta_tilde_v: f64) -> Matrix {
    let stats = population_stats(dist, cfg.l);
    let (n, nt, l) = (cfg.n, cfg.n_trg, cfg.l);
    let m = (n - nt) as f64;
    let (nf, ntf) = (n as f64, nt as f64);
    let e = stats.expected_inv_t;
    let eta = eta_tilde_v;
    let is_trg = |k: usize| k < nt;
    let mut w = Matrix::zeros(n, cfg.d());
    for k in 0..n {
        for t in 0..l {
            w[(k, t)] = if is_trg(k) {
                -stats.alpha[t] * eta
            } else {
                stats.alpha[t] * eta * ntf / m
            };
        }
        let diag = eta * (ntf + e * (nf * (nf - 1.0) - ntf * (nf + 2.0))) / (m * m);
        let off = eta * (ntf - e * (nf + 2.0 * ntf)) / (m * m);
        for j in 0..n {
            let (tok, prev) = match (is_trg(k), is_trg(j)) {
                (true, true) => (-2.0 * eta * e / ntf, -eta * e / ntf),
                (true, false) => (-eta * (1.0 - 2.0 * e) / m, -eta * (1.0 - 2.0 * e) / m),
                (false, true) => (2.0 * eta * e / m, eta * e / m),
                (false, false) if j == k => (diag, diag),
                (false, false) => (off, off),
            };
            w[(k, l + j)] = tok;
            w[(k, l + n + j)] = prev;
        }
    }
    w
}

/// Dominant population `W_KQ` with the bound on the dropped terms.
#[derive(Clone, Debug)]
pub struct WkqOracle {
    pub matrix: Matrix,
    /// Entrywise bound scale `eta_tilde * N_trg / N` of the excluded terms.
    pub error_bound: f64,
}

/// Dominant part of the stage-two `W_KQ`, scaled by `eta_tilde = eta_tilde_v * eta_kq * E[T^-1]`.
///
/// Averaged over triggers `w`, the matrix is
/// `E[{ [(1/T + 2/T^2)(p_{l+2} + p_{l+3}); 0; e_w / T] - (2/T^2) [1_{1:T}; 2 e_w; 0] } [p_T; e_w; 0]^T]`.
pub fn population_wkq(dist: &LengthDistribution, cfg: &SamplerConfig, eta_tilde: f64) -> WkqOracle {
    let (n, nt, l) = (cfg.n, cfg.n_trg, cfg.l);
    let mut w = Matrix::zeros(cfg.d(), cfg.d());
    let inv_nt = 1.0 / nt as f64;
    for (ell, q) in dist.iter() {
        let tt = total_length(ell);
        let t = tt as f64;
        let lead = 1.0 / t + 2.0 / (t * t);
        let base = 2.0 / (t * t);
        for trig in 0..nt {
            let cols = [tt - 1, l + trig];
            let c = eta_tilde * q * inv_nt;
            for &col in &cols {
                w[(ell + 1, col)] += c * lead;
                w[(ell + 2, col)] += c * lead;
                w[(l + n + trig, col)] += c / t;
                for pos in 0..tt {
                    w[(pos, col)] -= c * base;
                }
                w[(l + trig, col)] -= c * 2.0 * base;
            }
        }
    }
    WkqOracle {
        matrix: w,
        error_bound: eta_tilde * nt as f64 / n as f64,
    }
}

/// `T(ell)^-1 + 2 T(ell)^-2` weighted by `q_ell`, or zero outside the support.
fn shortcut_weight(dist: &LengthDistribution, ell: Option<usize>) -> f64 {
    match ell {
        Some(ell) if ell >= 1 => {
            let t = total_length(ell) as f64;
            dist.mass(ell) * (1.0 / t + 2.0 / (t * t))
        }
        _ => 0.0,
    }
}

/// Attention logit `s_t` (per unit `eta_tilde`) of the dominant population `W_KQ`
/// on a test sequence, with the query at its second trigger.
pub fn attention_logit_closed_form(
    test: &TokenSequence,
    dist: &LengthDistribution,
    cfg: &SamplerConfig,
    t: usize,
) -> Result<f64> {
    let t_star = test.query_position();
    if t == 0 || t > t_star {
        return Err(LabError::OutOfRange {
            what: "attention position",
            value: t,
            max: t_star,
        });
    }
    let stats = population_stats(dist, cfg.l.max(t_star));
    let nt = cfg.n_trg as f64;
    let w_star = test.token(t_star);
    let z = |p: usize| if p == 0 { None } else { Some(test.token(p)) };
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    let is_trigger = |tok: Option<usize>| tok.is_some_and(|x| (1..=cfg.n_trg).contains(&x));
    let ts = t_star as f64;

    // Component reached through the positional part of the query, p_{T*}.
    let (q_star, ell_star) = if t_star % 2 == 1 && t_star >= 5 {
        let ell = (t_star - 3) / 2;
        (dist.mass(ell), Some(ell))
    } else {
        (0.0, None)
    };
    let mut s = 0.0;
    if q_star > 0.0 {
        let ell = ell_star.unwrap_or(0);
        s += q_star * (1.0 / ts + 2.0 / (ts * ts)) * (ind(t == ell + 2) + ind(t == ell + 3));
        s += q_star / nt * (1.0 / ts) * ind(is_trigger(z(t - 1)));
        s -= 2.0 * q_star / (ts * ts);
        s -= 4.0 * q_star / nt / (ts * ts) * ind(is_trigger(z(t)));
    }

    // Component reached through the token part of the query, e_{w*}.
    let mut r = shortcut_weight(dist, t.checked_sub(2)) + shortcut_weight(dist, t.checked_sub(3));
    r += stats.expected_inv_t * ind(z(t - 1) == Some(w_star));
    r -= 2.0 * stats.alpha_sq[t - 1];
    r -= 4.0 * stats.expected_inv_t2 * ind(z(t) == Some(w_star));
    Ok(s + r / nt)
}

/// All logits `s_1 .. s_T*` of a test sequence.
pub fn attention_logits_closed_form(test: &TokenSequence, dist: &LengthDistribution, cfg: &SamplerConfig) -> Vec<f64> {
    (1..=test.query_position())
        .map(|t| attention_logit_closed_form(test, dist, cfg, t).expect("position in range"))
        .collect()
}

/// `[u x ell1, w, v, u x ell2, w, v]` with `w = 1`, `u = N_trg + 1`, `v = N_trg + 2`
/// (or `v = u` when only one ordinary token exists).
pub fn adversarial_sequence(cfg: &SamplerConfig, ell1: usize, ell2: usize) -> TokenSequence {
    let u = cfg.n_trg + 1;
    let v = if cfg.n_other() >= 2 { cfg.n_trg + 2 } else { u };
    TokenSequence::from_parts(&vec![u; ell1], 1, v, &vec![u; ell2])
}

#[derive(Clone, Debug, Serialize)]
pub struct PairResult {
    pub ell1: usize,
    pub ell2: usize,
    /// `(s_target - max_{t != target} s_t) / (E[T^-1] / N_trg)`.
    pub margin: f64,
    /// `s_target >= 2 s_t` for every other position.
    pub factor_two: bool,
    /// Position with the largest logit other than the target.
    pub runner_up: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Certificate {
    pub generalizes: bool,
    /// Every admissible pair also clears the factor-two margin.
    pub factor_two: bool,
    /// Smallest normalized margin over all pairs.
    pub margin: f64,
    pub witness: Option<TokenSequence>,
    pub witness_pair: Option<(usize, usize)>,
    pub pairs_checked: usize,
    pub failing_pairs: usize,
    pub max_sum_ratio: f64,
    pub max_sum_ratio_t: f64,
    /// `N_trg / N`, the relative size of the excluded terms.
    pub error_bound: f64,
}

pub fn certify_pair(dist: &LengthDistribution, cfg: &SamplerConfig, ell1: usize, ell2: usize) -> PairResult {
    let seq = adversarial_sequence(cfg, ell1, ell2);
    let s = attention_logits_closed_form(&seq, dist, cfg);
    let target = ell1 + 2;
    let mut best = f64::NEG_INFINITY;
    let mut runner_up = 0;
    let mut factor_two = true;
    for (i, &v) in s.iter().enumerate() {
        if i + 1 == target {
            continue;
        }
        if v > best {
            best = v;
            runner_up = i + 1;
        }
        if s[target - 1] < 2.0 * v {
            factor_two = false;
        }
    }
    let scale = population_stats(dist, cfg.l).expected_inv_t / cfg.n_trg as f64;
    PairResult {
        ell1,
        ell2,
        margin: (s[target - 1] - best) / scale,
        factor_two,
        runner_up,
    }
}

/// Scans every `(ell1, ell2)` with `ell1 + ell2 + 3 <= L - 1` on the adversarial pattern.
///
/// The model generalizes when the induction target `ell1 + 2` strictly has
/// the largest logit for every pair. The witness is the failing pair with the
/// smallest margin, preferring pairs whose `ell1` is not within
/// `{ell*-1, .., ell*+2}` of the length maximizing `q_ell / T(ell)`.
pub fn certify_ood(dist: &LengthDistribution, cfg: &SamplerConfig) -> Certificate {
    let pairs: Vec<(usize, usize)> = (1..cfg.l)
        .flat_map(|a| (1..cfg.l).map(move |b| (a, b)))
        .filter(|(a, b)| a + b + 3 < cfg.l)
        .collect();
    let results: Vec<PairResult> = pairs.par_iter().map(|&(a, b)| certify_pair(dist, cfg, a, b)).collect();
    let ell_star = dist
        .iter()
        .map(|(ell, q)| (ell, q / total_length(ell) as f64))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
        .0;
    let corner = |ell1: usize| ell1 + 1 >= ell_star && ell1 <= ell_star + 2;
    let failing: Vec<&PairResult> = results.iter().filter(|r| r.margin <= 0.0).collect();
    fn worst<'a>(it: impl Iterator<Item = &'a PairResult>) -> Option<&'a PairResult> {
        it.fold(None, |acc: Option<&PairResult>, r| match acc {
            Some(a) if a.margin <= r.margin => Some(a),
            _ => Some(r),
        })
    }
    let witness = worst(failing.iter().copied().filter(|r| !corner(r.ell1))).or_else(|| worst(failing.iter().copied()));
    let margin = results.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    Certificate {
        generalizes: failing.is_empty() && !results.is_empty(),
        factor_two: results.iter().all(|r| r.factor_two),
        margin,
        witness: witness.map(|r| adversarial_sequence(cfg, r.ell1, r.ell2)),
        witness_pair: witness.map(|r| (r.ell1, r.ell2)),
        pairs_checked: results.len(),
        failing_pairs: failing.len(),
        max_sum_ratio: diversity::max_sum_ratio(dist),
        max_sum_ratio_t: diversity::max_sum_ratio_t(dist),
        error_bound: cfg.n_trg as f64 / cfg.n as f64,
    }
}
