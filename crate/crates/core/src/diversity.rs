//! Max-sum ratio and the compute-optimal pretraining distribution.
//!
//! The ratio `R = max_l (q_l / l) / sum_l (q_l / l)` measures how concentrated
//! the trigger distances are. The linear program minimizes the expected
//! squared length `sum_l q_l l^2` subject to `R <= 1 / N_trg`; its solution
//! puts mass `l / Z` on `l = 1..=N_trg`.

use rayon::prelude::*;
use serde::Serialize;

use crate::datagen::{total_length, LengthDistribution};
use crate::error::{LabError, Result};

const KKT_TOL: f64 = 1e-9;

/// Largest grid the brute-force search will enumerate.
pub const MAX_GRID_POINTS: u128 = 50_000_000;

/// `max w / sum w`, computed as `1 / sum (w / max w)` so equal weights give an exact reciprocal.
fn ratio_of(weights: &[f64]) -> f64 {
    let max = weights.iter().copied().fold(0.0, f64::max);
    1.0 / weights.iter().map(|w| w / max).sum::<f64>()
}

pub fn max_sum_ratio(dist: &LengthDistribution) -> f64 {
    ratio_of(&dist.iter().map(|(ell, q)| q / ell as f64).collect::<Vec<_>>())
}

/// Variant weighting by `T(l)^-1 = (2l + 3)^-1` instead of `l^-1`.
pub fn max_sum_ratio_t(dist: &LengthDistribution) -> f64 {
    ratio_of(
        &dist
            .iter()
            .map(|(ell, q)| q / total_length(ell) as f64)
            .collect::<Vec<_>>(),
    )
}

/// Ratio of `Unif({l0, .., l0 + K - 1})`: `l0^-1 / sum_k (l0 + k)^-1`.
pub fn uniform_window_ratio(ell0: usize, k: usize) -> Result<f64> {
    if ell0 == 0 || k == 0 {
        return Err(LabError::InvalidDistribution(format!(
            "uniform window needs l0 >= 1 and K >= 1, got l0 = {ell0}, K = {k}"
        )));
    }
    Ok(max_sum_ratio(&LengthDistribution::uniform(ell0, ell0 + k - 1)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LpInstance {
    pub u: usize,
    pub n_trg: usize,
}

impl LpInstance {
    pub fn new(n_trg: usize, u: usize) -> Result<Self> {
        if n_trg == 0 || u < n_trg {
            return Err(LabError::InvalidLpInstance { u, n_trg });
        }
        Ok(Self { u, n_trg })
    }

    pub fn objective(&self, q: &[f64]) -> f64 {
        q.iter().enumerate().map(|(i, q)| q * ((i + 1) * (i + 1)) as f64).sum()
    }
}

/// `Z = N_trg (N_trg + 1) / 2`.
pub fn normalizer(n_trg: usize) -> usize {
    n_trg * (n_trg + 1) / 2
}

/// `q_l = l / Z` for `l <= N_trg`, zero up to `U`.
pub fn optimal_distribution(n_trg: usize, u: usize) -> Result<LengthDistribution> {
    let inst = LpInstance::new(n_trg, u)?;
    let z = normalizer(n_trg) as f64;
    let masses = (1..=inst.u)
        .map(|ell| if ell <= n_trg { ell as f64 / z } else { 0.0 })
        .collect();
    LengthDistribution::new((1..=inst.u).collect(), masses)
}

/// Masses of `dist` laid out on `1..=U` (zero where unsupported).
pub fn masses_on_horizon(inst: &LpInstance, dist: &LengthDistribution) -> Result<Vec<f64>> {
    if dist.max_len() > inst.u {
        return Err(LabError::InvalidDistribution(format!(
            "support reaches {} beyond U = {}",
            dist.max_len(),
            inst.u
        )));
    }
    Ok((1..=inst.u).map(|ell| dist.mass(ell)).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct LpSolution {
    /// Grid counts `c_l` with `q_l = c_l / resolution`.
    pub best_counts: Vec<u64>,
    pub best_q: Vec<f64>,
    pub best_objective: f64,
    pub points_checked: u64,
    pub feasible_points: u64,
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

fn lcm_upto(u: usize) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    (1..=u as u64).fold(1, |acc, x| acc / gcd(acc, x) * x)
}

#[derive(Clone, Copy, Default)]
struct Best {
    objective: Option<u64>,
    counts_idx: Option<u64>,
    checked: u64,
    feasible: u64,
}

/// Exhaustive search over `q = c / resolution` with integer `c` on the simplex.
///
/// Feasibility `N_trg * max_l (c_l / l) <= sum_l c_l / l` is checked in
/// integers after scaling by `lcm(1..=U)`, so grid points on the constraint
/// boundary are classified exactly. Ties keep the lexicographically first point.
pub fn brute_force_lp(inst: &LpInstance, resolution: u64) -> Result<LpSolution> {
    LpInstance::new(inst.n_trg, inst.u)?;
    if resolution == 0 {
        return Err(LabError::InvalidConfig("resolution must be positive".into()));
    }
    let points = binomial(resolution as u128 + inst.u as u128 - 1, inst.u as u128 - 1);
    if points > MAX_GRID_POINTS {
        return Err(LabError::Resource(format!(
            "{points} grid points for U = {} at resolution {resolution} exceed the limit {MAX_GRID_POINTS}",
            inst.u
        )));
    }
    let lcm = lcm_upto(inst.u);
    let scale: Vec<u64> = (1..=inst.u as u64).map(|ell| lcm / ell).collect();
    let u = inst.u;
    let n_trg = inst.n_trg as u64;

    // Enumerate compositions with the first count fixed per task, then combine in order.
    let search = |first: u64| -> (Best, Vec<u64>) {
        let mut best = Best::default();
        let mut best_counts = Vec::new();
        let mut c = vec![0u64; u];
        c[0] = first;
        let mut visit = |c: &[u64], best: &mut Best, best_counts: &mut Vec<u64>| {
            best.checked += 1;
            let weighted: Vec<u64> = c.iter().zip(&scale).map(|(a, s)| a * s).collect();
            let sum: u64 = weighted.iter().sum();
            let max = *weighted.iter().max().unwrap_or(&0);
            if n_trg * max > sum {
                return;
            }
            best.feasible += 1;
            let obj: u64 = c.iter().enumerate().map(|(i, a)| a * ((i + 1) * (i + 1)) as u64).sum();
            if best.objective.is_none_or(|b| obj < b) {
                best.objective = Some(obj);
                best.counts_idx = Some(best.checked);
                best_counts.clear();
                best_counts.extend_from_slice(c);
            }
        };
        type Visit<'v> = dyn FnMut(&[u64], &mut Best, &mut Vec<u64>) + 'v;
        fn rec(
            c: &mut Vec<u64>,
            pos: usize,
            remaining: u64,
            visit: &mut Visit,
            best: &mut Best,
            best_counts: &mut Vec<u64>,
        ) {
            if pos == c.len() - 1 {
                c[pos] = remaining;
                visit(c, best, best_counts);
                return;
            }
            for a in (0..=remaining).rev() {
                c[pos] = a;
                rec(c, pos + 1, remaining - a, visit, best, best_counts);
            }
            c[pos] = 0;
        }
        if u == 1 {
            c[0] = resolution;
            visit(&c, &mut best, &mut best_counts);
        } else {
            rec(&mut c, 1, resolution - first, &mut visit, &mut best, &mut best_counts);
        }
        (best, best_counts)
    };
    let firsts: Vec<u64> = if u == 1 {
        vec![resolution]
    } else {
        (0..=resolution).rev().collect()
    };
    let parts: Vec<(Best, Vec<u64>)> = firsts.par_iter().map(|&f| search(f)).collect();
    let mut best: Option<(u64, Vec<u64>)> = None;
    let (mut checked, mut feasible) = (0, 0);
    for (b, counts) in parts {
        checked += b.checked;
        feasible += b.feasible;
        if let Some(obj) = b.objective {
            if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                best = Some((obj, counts));
            }
        }
    }
    let (obj, counts) = best.ok_or(LabError::InvalidLpInstance {
        u: inst.u,
        n_trg: inst.n_trg,
    })?;
    let r = resolution as f64;
    Ok(LpSolution {
        best_q: counts.iter().map(|c| *c as f64 / r).collect(),
        best_counts: counts,
        best_objective: obj as f64 / r,
        points_checked: checked,
        feasible_points: feasible,
    })
}

/// Multipliers and the six condition checks.
#[derive(Clone, Debug, Serialize)]
pub struct KktReport {
    pub satisfied: bool,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub nu: f64,
    pub stationarity: bool,
    pub complementary_lambda: bool,
    pub complementary_mu: bool,
    pub max_sum_feasible: bool,
    pub normalized: bool,
    pub nonnegative: bool,
    /// Largest absolute residual across the equality conditions.
    pub max_residual: f64,
}

/// Builds `(lambda, mu, nu)` for the linear candidate and checks all KKT conditions at `q`.
///
/// `lambda_l = lambda_bar - l^3 + Z l` on `l <= N_trg` (shifted so that
/// `lambda_{N_trg} = 1`), `mu_l = l^2 - Z - lambda_bar / l` beyond, and
/// `nu = -Z`, which is the value the stationarity system forces.
pub fn check_kkt(inst: &LpInstance, dist: &LengthDistribution) -> Result<KktReport> {
    let q = masses_on_horizon(inst, dist)?;
    let (u, nt) = (inst.u, inst.n_trg);
    let ntf = nt as f64;
    let z = normalizer(nt) as f64;
    let nu = -z;
    let lambda_bar = 0.5 * ntf.powi(3) - 0.5 * ntf * ntf + 1.0;
    let mut lambda = vec![0.0; u];
    let mut mu = vec![0.0; u];
    for ell in 1..=u {
        let l = ell as f64;
        if ell <= nt {
            lambda[ell - 1] = lambda_bar - l.powi(3) + z * l;
        } else {
            mu[ell - 1] = l * l - z - lambda_bar / l;
        }
    }
    let lambda_sum: f64 = lambda.iter().sum();
    let weighted_sum: f64 = q.iter().enumerate().map(|(i, q)| q / (i + 1) as f64).sum();
    let mut max_residual: f64 = 0.0;
    let mut stationarity = true;
    let mut comp_lambda = true;
    let mut comp_mu = true;
    let mut feasible = true;
    for ell in 1..=u {
        let l = ell as f64;
        let i = ell - 1;
        let st = l * l + (lambda[i] - lambda_sum / ntf) / l - mu[i] + nu;
        let slack = q[i] / l - weighted_sum / ntf;
        let cl = lambda[i] * slack;
        let cm = mu[i] * q[i];
        max_residual = max_residual.max(st.abs()).max(cl.abs()).max(cm.abs());
        stationarity &= st.abs() <= KKT_TOL;
        comp_lambda &= cl.abs() <= KKT_TOL;
        comp_mu &= cm.abs() <= KKT_TOL;
        feasible &= slack <= KKT_TOL;
    }
    let total: f64 = q.iter().sum();
    let normalized = (total - 1.0).abs() <= KKT_TOL && q.iter().all(|x| *x >= -KKT_TOL);
    let nonnegative = lambda.iter().chain(&mu).all(|x| *x >= -1e-12);
    Ok(KktReport {
        satisfied: stationarity && comp_lambda && comp_mu && feasible && normalized && nonnegative,
        lambda,
        mu,
        nu,
        stationarity,
        complementary_lambda: comp_lambda,
        complementary_mu: comp_mu,
        max_sum_feasible: feasible,
        normalized,
        nonnegative,
        max_residual,
    })
}
