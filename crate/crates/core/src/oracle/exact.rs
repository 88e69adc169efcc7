//! Exact expectation of the stage-two `W_KQ` step with `p_hat` fixed at uniform.
//!
//! For a sequence of length `T` with output `o`, the linearized gradient is
//! `sum_{t,s} c_ts a_t x_s x_T^T` with `c_ts = (1{t=s} - 1/T) / T` and
//! `a_t = v_o . x_t`, `v_o = W_V^T (u - e_o)`. Each term depends on the tokens
//! at positions `{t, t-1, s, s-1, T-1}` only, so the expectation over the
//! irrelevant tokens is an exact finite sum over those positions.

use rayon::prelude::*;

use crate::datagen::{total_length, LengthDistribution, SamplerConfig};
use crate::error::{LabError, Result};
use crate::matrix::Matrix;

/// Largest number of token assignments enumerated per `(t, s)` pair.
pub const MAX_ASSIGNMENTS: usize = 2_000_000;

/// `-eta_kq * E[linearized grad_W_KQ]` at value matrix `w_v`.
pub fn population_wkq_linearized(
    dist: &LengthDistribution,
    cfg: &SamplerConfig,
    w_v: &Matrix,
    eta_kq: f64,
) -> Result<Matrix> {
    cfg.check_distribution(dist)?;
    let (n, nt, l) = (cfg.n, cfg.n_trg, cfg.l);
    let d = cfg.d();
    if w_v.shape() != (n, d) {
        return Err(LabError::Shape(format!("W_V must be {n}x{d}, got {:?}", w_v.shape())));
    }
    let m = cfg.n_other();
    if m.checked_pow(5).is_none_or(|x| x > MAX_ASSIGNMENTS) {
        return Err(LabError::Resource(format!(
            "exact enumeration over {m}^5 token assignments is too large"
        )));
    }
    let colmean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|k| w_v[(k, j)]).sum::<f64>() / n as f64)
        .collect();

    let tasks: Vec<(usize, f64, usize, usize)> = dist
        .iter()
        .flat_map(|(ell, q)| (0..nt).flat_map(move |w| (nt..n).map(move |o| (ell, q, w, o))))
        .collect();
    let weight = 1.0 / (nt * m) as f64;
    let parts: Vec<Matrix> = tasks
        .par_iter()
        .map(|&(ell, q, w, o)| {
            let v: Vec<f64> = (0..d).map(|j| colmean[j] - w_v[(o, j)]).collect();
            let mut acc = Matrix::zeros(d, d);
            sequence_expectation(cfg, ell, w, o, &v, &mut acc);
            acc.scale(q * weight);
            acc
        })
        .collect();
    let mut total = Matrix::zeros(d, d);
    for p in &parts {
        total.add_scaled(p, 1.0);
    }
    total.scale(-eta_kq);
    let _ = l;
    Ok(total)
}

/// Adds `E[sum_{t,s} c_ts a_t x_s x_T^T]` for fixed length, trigger and output (0-indexed ids).
fn sequence_expectation(cfg: &SamplerConfig, ell: usize, w: usize, o: usize, v: &[f64], acc: &mut Matrix) {
    let (n, nt, l) = (cfg.n, cfg.n_trg, cfg.l);
    let tt = total_length(ell);
    let m = n - nt;
    // Token at 1-indexed position p: Some(id) when fixed, None when irrelevant.
    let fixed = |p: usize| -> Option<usize> {
        if p == ell + 1 || p == tt {
            Some(w)
        } else if p == ell + 2 {
            Some(o)
        } else {
            None
        }
    };
    let inv_t = 1.0 / tt as f64;
    let mut slots: Vec<usize> = Vec::with_capacity(5);
    let mut vals: Vec<usize> = Vec::with_capacity(5);
    for t in 1..=tt {
        for s in 1..=tt {
            let c = (if t == s { 1.0 } else { 0.0 } - inv_t) * inv_t;
            slots.clear();
            for p in [t, t - 1, s, s - 1, tt - 1] {
                if p >= 1 && fixed(p).is_none() && !slots.contains(&p) {
                    slots.push(p);
                }
            }
            let count = m.pow(slots.len() as u32);
            let c = c / count as f64;
            vals.clear();
            vals.resize(slots.len(), 0);
            for _ in 0..count {
                let tok = |p: usize| -> usize {
                    match fixed(p) {
                        Some(x) => x,
                        None => {
                            let i = slots.iter().position(|&q| q == p).expect("slot enumerated");
                            nt + vals[i]
                        }
                    }
                };
                let mut a = v[t - 1] + v[l + tok(t)];
                if t > 1 {
                    a += v[l + n + tok(t - 1)];
                }
                let coef = c * a;
                let mut rows = [s - 1, l + tok(s), usize::MAX];
                if s > 1 {
                    rows[2] = l + n + tok(s - 1);
                }
                let cols = [tt - 1, l + w, l + n + tok(tt - 1)];
                for &r in rows.iter().filter(|r| **r != usize::MAX) {
                    for &col in &cols {
                        acc[(r, col)] += coef;
                    }
                }
                // Odometer increment over the irrelevant slots.
                for x in vals.iter_mut() {
                    *x += 1;
                    if *x < m {
                        break;
                    }
                    *x = 0;
                }
            }
        }
    }
}
