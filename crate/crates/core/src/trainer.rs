//! Two-stage one-step training from zero initialization.
//!
//! Stage one takes a single gradient step on `W_V` with `W_KQ = 0`; stage two
//! takes a single step on `W_KQ` (still at zero) with `W_V` frozen at the
//! stage-one value. Both gradients are exact closed forms: at `W_KQ = 0` the
//! attention is uniform, so the softmax Jacobian collapses to
//! `(1/T)(x_t - x_bar)`.
//!
//! Reductions run in fixed chunks of [`CHUNK`] samples. Each chunk is summed
//! sequentially and chunk sums are combined in index order, so results are
//! bitwise reproducible regardless of the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, LengthDistribution, SamplerConfig, TokenSequence};
use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::model::{self, EmbeddedSequence, ModelParams};
use crate::rng::streams;

pub const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta_v: f64,
    pub eta_kq: f64,
    pub m_v: usize,
    pub m_kq: usize,
    pub seed: u64,
    /// Use the first `m_kq` stage-one sequences for stage two instead of a fresh stream.
    #[serde(default)]
    pub reuse_samples: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta_v: 1e3,
            eta_kq: 1e4,
            m_v: 4096,
            m_kq: 4096,
            seed: 0,
            reuse_samples: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_v.is_finite() && self.eta_v >= 0.0 && self.eta_kq.is_finite() && self.eta_kq >= 0.0) {
            return Err(LabError::InvalidConfig(format!(
                "learning rates must be finite and non-negative, got eta_V = {} and eta_KQ = {}",
                self.eta_v, self.eta_kq
            )));
        }
        if self.m_v == 0 || self.m_kq == 0 {
            return Err(LabError::InvalidConfig("M_V and M_KQ must be positive".into()));
        }
        if self.reuse_samples && self.m_kq > self.m_v {
            return Err(LabError::InvalidConfig(format!(
                "reusing samples needs M_KQ <= M_V, got {} > {}",
                self.m_kq, self.m_v
            )));
        }
        Ok(())
    }
}

/// Adds `scale * (u - e_target) x_bar^T` into `acc` (`N x D`).
pub fn accumulate_grad_wv(x: &EmbeddedSequence, target: usize, acc: &mut Matrix, scale: f64) {
    let n = acc.rows();
    let u = 1.0 / n as f64;
    let w = scale / x.len() as f64;
    for c in x.columns() {
        for r in c.rows() {
            for k in 0..n {
                let g = if k + 1 == target { u - 1.0 } else { u };
                acc[(k, r)] += w * g;
            }
        }
    }
}

/// Per-sample `W_V` gradient of the loss at zero parameters: `(u - e_target) x_bar^T`.
pub fn grad_wv_sample(x: &EmbeddedSequence, target: usize, n: usize) -> Matrix {
    let mut g = Matrix::zeros(n, x.d());
    accumulate_grad_wv(x, target, &mut g, 1.0);
    g
}

/// The vector `v` with `grad_W_KQ = v x_T^T` at `W_KQ = 0`:
/// `v = (1/T) sum_t a_t (x_t - x_bar)` with `a_t = (p_hat - e_target)^T W_V x_t`.
pub fn wkq_left_factor(x: &EmbeddedSequence, target: usize, w_v: &Matrix) -> Vec<f64> {
    let d = x.d();
    let x_bar = x.mean_column();
    let mut p_hat = model::softmax(&w_v.matvec(&x_bar));
    p_hat[target - 1] -= 1.0;
    // h = W_V^T (p_hat - e_target), so a_t = h . x_t.
    let mut h = vec![0.0; d];
    for (k, &gk) in p_hat.iter().enumerate() {
        if gk != 0.0 {
            for (hj, wj) in h.iter_mut().zip(w_v.row(k)) {
                *hj += gk * wj;
            }
        }
    }
    let inv_t = 1.0 / x.len() as f64;
    let mut v = vec![0.0; d];
    let mut a_sum = 0.0;
    for c in x.columns() {
        let a: f64 = c.rows().map(|r| h[r]).sum();
        a_sum += a;
        for r in c.rows() {
            v[r] += inv_t * a;
        }
    }
    let a_bar = a_sum * inv_t;
    for (vi, xi) in v.iter_mut().zip(&x_bar) {
        *vi -= a_bar * xi;
    }
    v
}

/// Adds `scale * grad_W_KQ` into `acc` (`D x D`); only the columns where `x_T` is one are touched.
pub fn accumulate_grad_wkq(x: &EmbeddedSequence, target: usize, w_v: &Matrix, acc: &mut Matrix, scale: f64) {
    let v = wkq_left_factor(x, target, w_v);
    let q = *x.query();
    for col in q.rows() {
        for (i, vi) in v.iter().enumerate() {
            acc[(i, col)] += scale * vi;
        }
    }
}

/// Per-sample `W_KQ` gradient at `(W_KQ = 0, W_V = w_v)`.
pub fn grad_wkq_sample(x: &EmbeddedSequence, target: usize, w_v: &Matrix) -> Matrix {
    let mut g = Matrix::zeros(x.d(), x.d());
    accumulate_grad_wkq(x, target, w_v, &mut g, 1.0);
    g
}

/// Deterministic parallel sum of `count` per-sample contributions, divided by `count`.
pub fn chunked_mean<F>(count: usize, rows: usize, cols: usize, add: F) -> Result<Matrix>
where
    F: Fn(usize, &mut Matrix) -> Result<()> + Sync,
{
    let chunks: Vec<Matrix> = (0..count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Matrix::zeros(rows, cols);
            for i in c * CHUNK..((c + 1) * CHUNK).min(count) {
                add(i, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = Matrix::zeros(rows, cols);
    for c in &chunks {
        total.add_scaled(c, 1.0);
    }
    total.scale(1.0 / count as f64);
    Ok(total)
}

/// Stage one on explicit sequences: `-eta_V * mean grad_W_V`.
pub fn one_step_wv(cfg: &SamplerConfig, seqs: &[TokenSequence], eta_v: f64) -> Result<Matrix> {
    let mut m = chunked_mean(seqs.len(), cfg.n, cfg.d(), |i, acc| {
        let x = model::embed_prompt(&seqs[i], cfg)?;
        accumulate_grad_wv(&x, seqs[i].target(), acc, 1.0);
        Ok(())
    })?;
    m.scale(-eta_v);
    Ok(m)
}

/// Stage two on explicit sequences: `-eta_KQ * mean grad_W_KQ` with `W_V` fixed.
pub fn one_step_wkq(cfg: &SamplerConfig, seqs: &[TokenSequence], w_v: &Matrix, eta_kq: f64) -> Result<Matrix> {
    let mut m = chunked_mean(seqs.len(), cfg.d(), cfg.d(), |i, acc| {
        let x = model::embed_prompt(&seqs[i], cfg)?;
        accumulate_grad_wkq(&x, seqs[i].target(), w_v, acc, 1.0);
        Ok(())
    })?;
    m.scale(-eta_kq);
    Ok(m)
}

/// Runs both stages, drawing sequence `i` of each stage from its own seed stream.
pub fn run_algorithm1(cfg: &SamplerConfig, dist: &LengthDistribution, tc: &TrainConfig) -> Result<ModelParams> {
    cfg.validate()?;
    tc.validate()?;
    cfg.check_distribution(dist)?;
    let d = cfg.d();
    let mut w_v = chunked_mean(tc.m_v, cfg.n, d, |i, acc| {
        let s = datagen::train_sequence_at(cfg, dist, tc.seed, streams::TRAIN_V, i as u64)?;
        let x = model::embed_prompt(&s, cfg)?;
        accumulate_grad_wv(&x, s.target(), acc, 1.0);
        Ok(())
    })?;
    w_v.scale(-tc.eta_v);
    let kq_stream = if tc.reuse_samples {
        streams::TRAIN_V
    } else {
        streams::TRAIN_KQ
    };
    let mut w_kq = chunked_mean(tc.m_kq, d, d, |i, acc| {
        let s = datagen::train_sequence_at(cfg, dist, tc.seed, kq_stream, i as u64)?;
        let x = model::embed_prompt(&s, cfg)?;
        accumulate_grad_wkq(&x, s.target(), &w_v, acc, 1.0);
        Ok(())
    })?;
    w_kq.scale(-tc.eta_kq);
    ModelParams::new(*cfg, w_kq, w_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::sample_train_sequence;
    use crate::rng::seeded;

    fn small() -> SamplerConfig {
        SamplerConfig::new(6, 2, 12).unwrap()
    }

    #[test]
    fn wv_gradient_rows_sum_to_zero() {
        let c = small();
        let s = sample_train_sequence(&c, 2, &mut seeded(3)).unwrap();
        let x = model::embed_prompt(&s, &c).unwrap();
        let g = grad_wv_sample(&x, s.target(), c.n);
        for j in 0..c.d() {
            let col: f64 = (0..c.n).map(|k| g[(k, j)]).sum();
            assert!(col.abs() < 1e-15);
        }
    }

    #[test]
    fn single_sample_step_sign() {
        let c = small();
        let s = sample_train_sequence(&c, 2, &mut seeded(4)).unwrap();
        let w = one_step_wv(&c, std::slice::from_ref(&s), 1.0).unwrap();
        let x = model::embed_prompt(&s, &c).unwrap();
        let x_bar = x.mean_column();
        for k in 0..c.n {
            let e = if k + 1 == s.target() { 1.0 } else { 0.0 };
            for j in 0..c.d() {
                assert!((w[(k, j)] - (e - 1.0 / c.n as f64) * x_bar[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn wkq_gradient_zero_for_zero_values() {
        let c = small();
        let s = sample_train_sequence(&c, 3, &mut seeded(5)).unwrap();
        let x = model::embed_prompt(&s, &c).unwrap();
        let g = grad_wkq_sample(&x, s.target(), &Matrix::zeros(c.n, c.d()));
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn wkq_gradient_supported_on_query_columns() {
        let c = small();
        let s = sample_train_sequence(&c, 3, &mut seeded(6)).unwrap();
        let w_v = one_step_wv(&c, std::slice::from_ref(&s), 5.0).unwrap();
        let x = model::embed_prompt(&s, &c).unwrap();
        let g = grad_wkq_sample(&x, s.target(), &w_v);
        let q: Vec<usize> = x.query().rows().collect();
        for j in 0..c.d() {
            let norm: f64 = (0..c.d()).map(|i| g[(i, j)].abs()).sum();
            if !q.contains(&j) {
                assert_eq!(norm, 0.0);
            }
        }
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn zero_value_rate_cascades() {
        let c = small();
        let dist = LengthDistribution::point(2).unwrap();
        let tc = TrainConfig {
            eta_v: 0.0,
            m_v: 300,
            m_kq: 300,
            ..TrainConfig::default()
        };
        let p = run_algorithm1(&c, &dist, &tc).unwrap();
        assert_eq!(p.w_v.max_abs(), 0.0);
        assert_eq!(p.w_kq.max_abs(), 0.0);
    }

    #[test]
    fn bitwise_reproducible() {
        let c = small();
        let dist = LengthDistribution::uniform(2, 3).unwrap();
        let tc = TrainConfig {
            m_v: 700,
            m_kq: 600,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = run_algorithm1(&c, &dist, &tc).unwrap();
        let b = run_algorithm1(&c, &dist, &tc).unwrap();
        assert_eq!(a, b);
        let other = run_algorithm1(&c, &dist, &TrainConfig { seed: 12, ..tc }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            m_v: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            eta_kq: f64::NAN,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            reuse_samples: true,
            m_kq: 5000,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
