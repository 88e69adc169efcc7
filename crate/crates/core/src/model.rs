//! Embedding and the single-layer attention model
//! `f(X) = W_V X softmax(X^T W_KQ x_t)`.
//!
//! Embedding rows (0-indexed) are laid out as `[0, L)` positions,
//! `[L, L+N)` current token, `[L+N, L+2N)` previous token. Each embedded
//! column is kept sparse (the indices of its ones); [`dense`] holds the
//! matrix-product reference path.

use crate::datagen::{SamplerConfig, TokenSequence};
use crate::error::{LabError, Result};
use crate::matrix::Matrix;

/// Row indices of the ones in one embedding column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Column {
    pub pos: usize,
    pub tok: usize,
    pub prev: Option<usize>,
}

impl Column {
    pub fn rows(&self) -> impl Iterator<Item = usize> {
        [Some(self.pos), Some(self.tok), self.prev].into_iter().flatten()
    }
}

/// Embedded prefix `x_1 .. x_t` of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSequence {
    l: usize,
    n: usize,
    columns: Vec<Column>,
}

impl EmbeddedSequence {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn d(&self) -> usize {
        self.l + 2 * self.n
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    /// The query column `x_t` (last column).
    pub fn query(&self) -> &Column {
        self.columns.last().expect("nonempty embedding")
    }

    /// Dense `D x t` matrix.
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.d(), self.len());
        for (j, c) in self.columns.iter().enumerate() {
            for r in c.rows() {
                m[(r, j)] += 1.0;
            }
        }
        m
    }

    /// Mean column `(1/t) sum_s x_s` as a dense vector.
    pub fn mean_column(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.d()];
        let w = 1.0 / self.len() as f64;
        for c in &self.columns {
            for r in c.rows() {
                v[r] += w;
            }
        }
        v
    }
}

/// Embeds positions `1..=upto` of `seq`.
pub fn embed(seq: &TokenSequence, upto: usize, cfg: &SamplerConfig) -> Result<EmbeddedSequence> {
    embed_tokens(&seq.tokens, upto, cfg)
}

/// Embeds positions `1..=upto` of a raw token list (1-indexed ids).
pub fn embed_tokens(tokens: &[usize], upto: usize, cfg: &SamplerConfig) -> Result<EmbeddedSequence> {
    let max = tokens.len().min(cfg.l);
    if upto == 0 || upto > max {
        return Err(LabError::OutOfRange {
            what: "embedding position",
            value: upto,
            max,
        });
    }
    let (l, n) = (cfg.l, cfg.n);
    let token_row = |z: usize| -> Result<usize> {
        if z == 0 || z > n {
            return Err(LabError::OutOfRange {
                what: "token id",
                value: z,
                max: n,
            });
        }
        Ok(z - 1)
    };
    let mut columns = Vec::with_capacity(upto);
    for t in 0..upto {
        columns.push(Column {
            pos: t,
            tok: l + token_row(tokens[t])?,
            prev: match t {
                0 => None,
                _ => Some(l + n + token_row(tokens[t - 1])?),
            },
        });
    }
    Ok(EmbeddedSequence { l, n, columns })
}

/// Embeds the prompt `z_1 .. z_T` of a sequence, the input for predicting `z_{T+1}`.
pub fn embed_prompt(seq: &TokenSequence, cfg: &SamplerConfig) -> Result<EmbeddedSequence> {
    embed(seq, seq.query_position(), cfg)
}

/// The trainable pair `(W_KQ, W_V)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub cfg: SamplerConfig,
    pub w_kq: Matrix,
    pub w_v: Matrix,
}

impl ModelParams {
    pub fn zeros(cfg: SamplerConfig) -> Self {
        let d = cfg.d();
        Self {
            cfg,
            w_kq: Matrix::zeros(d, d),
            w_v: Matrix::zeros(cfg.n, d),
        }
    }

    pub fn new(cfg: SamplerConfig, w_kq: Matrix, w_v: Matrix) -> Result<Self> {
        let d = cfg.d();
        if w_kq.shape() != (d, d) || w_v.shape() != (cfg.n, d) {
            return Err(LabError::Shape(format!(
                "expected W_KQ {d}x{d} and W_V {}x{d}, got {:?} and {:?}",
                cfg.n,
                w_kq.shape(),
                w_v.shape()
            )));
        }
        if !w_kq.is_finite() || !w_v.is_finite() {
            return Err(LabError::Shape("parameters contain non-finite entries".into()));
        }
        Ok(Self { cfg, w_kq, w_v })
    }

    pub fn d(&self) -> usize {
        self.cfg.d()
    }
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Attention logits `s_t = x_t^T W_KQ x_query`.
pub fn attention_logits(x: &EmbeddedSequence, w_kq: &Matrix) -> Vec<f64> {
    let q = *x.query();
    x.columns()
        .iter()
        .map(|c| c.rows().map(|a| q.rows().map(|b| w_kq[(a, b)]).sum::<f64>()).sum())
        .collect()
}

pub fn attention_weights(x: &EmbeddedSequence, params: &ModelParams) -> Vec<f64> {
    softmax(&attention_logits(x, &params.w_kq))
}

/// `W_V` times the attention-weighted embedding, computed column by column.
pub fn value_readout(x: &EmbeddedSequence, w_v: &Matrix, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w_v.rows()];
    for (c, &a) in x.columns().iter().zip(weights) {
        for r in c.rows() {
            for (k, o) in out.iter_mut().enumerate() {
                *o += a * w_v[(k, r)];
            }
        }
    }
    out
}

pub fn forward_logits(x: &EmbeddedSequence, params: &ModelParams) -> Vec<f64> {
    let weights = attention_weights(x, params);
    value_readout(x, &params.w_v, &weights)
}

pub fn predict_distribution(x: &EmbeddedSequence, params: &ModelParams) -> Vec<f64> {
    softmax(&forward_logits(x, params))
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Most probable next token (1-indexed). Ties resolve to the smallest token id.
pub fn predict_token(x: &EmbeddedSequence, params: &ModelParams) -> usize {
    argmax(&predict_distribution(x, params)) + 1
}

/// `-log p(target)` for a 1-indexed target token.
pub fn cross_entropy(x: &EmbeddedSequence, params: &ModelParams, target: usize) -> f64 {
    let logits = forward_logits(x, params);
    log_sum_exp(&logits) - logits[target - 1]
}

/// Reference path through full matrix products on the dense embedding.
pub mod dense {
    use super::*;

    pub fn attention_weights(x: &EmbeddedSequence, params: &ModelParams) -> Vec<f64> {
        let xd = x.to_dense();
        let query = xd.column(xd.cols() - 1);
        let kq = params.w_kq.matvec(&query);
        softmax(&xd.transpose().matvec(&kq))
    }

    pub fn forward_logits(x: &EmbeddedSequence, params: &ModelParams) -> Vec<f64> {
        let xd = x.to_dense();
        let attended = xd.matvec(&attention_weights(x, params));
        params.w_v.matvec(&attended)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::sample_train_sequence;
    use crate::rng::seeded;
    use rand::Rng;

    fn cfg() -> SamplerConfig {
        SamplerConfig::new(16, 2, 40).unwrap()
    }

    fn random_params(cfg: SamplerConfig, seed: u64, scale: f64) -> ModelParams {
        let mut rng = seeded(seed);
        let d = cfg.d();
        let w_kq = Matrix::from_fn(d, d, |_, _| scale * (rng.random::<f64>() - 0.5));
        let w_v = Matrix::from_fn(cfg.n, d, |_, _| scale * (rng.random::<f64>() - 0.5));
        ModelParams::new(cfg, w_kq, w_v).unwrap()
    }

    #[test]
    fn first_column_has_no_previous_token() {
        let x = embed_tokens(&[7, 4, 9], 3, &cfg()).unwrap();
        let dense = x.to_dense();
        let col0 = dense.column(0);
        assert_eq!(col0.iter().sum::<f64>(), 2.0);
        assert_eq!(col0[0], 1.0);
        assert_eq!(col0[40 + 7 - 1], 1.0);
        assert!(col0[56..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn second_column_index_arithmetic() {
        // 1-indexed rows 2, L + z_2 = 44, L + N + z_1 = 63.
        let x = embed_tokens(&[7, 4], 2, &cfg()).unwrap();
        let col = x.to_dense().column(1);
        let ones: Vec<usize> = col
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 1.0)
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(ones, vec![2, 44, 63]);
    }

    #[test]
    fn later_columns_sum_to_three() {
        let s = sample_train_sequence(&cfg(), 5, &mut seeded(1)).unwrap();
        let x = embed_prompt(&s, &cfg()).unwrap();
        let d = x.to_dense();
        for j in 1..x.len() {
            assert_eq!(d.column(j).iter().sum::<f64>(), 3.0);
        }
    }

    #[test]
    fn embed_out_of_range() {
        assert!(embed_tokens(&[3, 4], 3, &cfg()).is_err());
        assert!(embed_tokens(&[3, 4], 0, &cfg()).is_err());
        assert!(embed_tokens(&[3, 17], 2, &cfg()).is_err());
    }

    #[test]
    fn zero_params_give_uniform_everything() {
        let p = ModelParams::zeros(cfg());
        let s = sample_train_sequence(&cfg(), 3, &mut seeded(2)).unwrap();
        let x = embed_prompt(&s, &cfg()).unwrap();
        let a = attention_weights(&x, &p);
        assert!(a.iter().all(|w| (w - 1.0 / 9.0).abs() < 1e-15));
        assert!(forward_logits(&x, &p).iter().all(|v| *v == 0.0));
        let pd = predict_distribution(&x, &p);
        assert!(pd.iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-15));
        assert_eq!(predict_token(&x, &p), 1);
        assert!((cross_entropy(&x, &p, s.target()) - (16f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_closed_form_and_shift() {
        let w = softmax(&[0.0, 3f64.ln()]);
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        let shifted = softmax(&[5.0, 5.0 + 3f64.ln()]);
        assert!((shifted[0] - w[0]).abs() < 1e-15);
        let huge = softmax(&[1e7, 0.0, -1e7]);
        assert_eq!(huge, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn argmax_ties_to_smallest() {
        let mut v = vec![0.0; 10];
        v[3] = 1.0;
        v[6] = 1.0;
        assert_eq!(argmax(&v) + 1, 4);
        v[8] = 2.0;
        assert_eq!(argmax(&v) + 1, 9);
    }

    #[test]
    fn target_half_probability_gives_ln2() {
        let c = SamplerConfig::new(3, 1, 8).unwrap();
        let x = embed_tokens(&[2, 3], 2, &c).unwrap();
        let mut p = ModelParams::zeros(c);
        // Uniform attention over two columns: logit_2 = ln 2, others 0, so p_2 = 2/4.
        p.w_v[(1, x.columns()[0].pos)] = 2f64.ln();
        p.w_v[(1, x.columns()[1].pos)] = 2f64.ln();
        assert!((predict_distribution(&x, &p)[1] - 0.5).abs() < 1e-15);
        assert!((cross_entropy(&x, &p, 2) - 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn two_token_hand_computation() {
        let c = SamplerConfig::new(4, 1, 8).unwrap();
        let x = embed_tokens(&[2, 3], 2, &c).unwrap();
        let xd = x.to_dense();
        let x2 = xd.column(1);
        let mut p = ModelParams::zeros(c);
        for (j, v) in x2.iter().enumerate() {
            p.w_v[(0, j)] = *v;
        }
        let x1 = xd.column(0);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let expected = (dot(&x2, &x1) + dot(&x2, &x2)) / 2.0;
        let logits = forward_logits(&x, &p);
        assert!((logits[0] - expected).abs() < 1e-15);
        assert_eq!(expected, 1.5);
    }

    #[test]
    fn sparse_matches_dense_reference() {
        let c = cfg();
        for seed in 0..10 {
            let p = random_params(c, seed, 4.0);
            let s = sample_train_sequence(&c, 3 + (seed as usize % 5), &mut seeded(100 + seed)).unwrap();
            let x = embed_prompt(&s, &c).unwrap();
            let a = attention_weights(&x, &p);
            let ad = dense::attention_weights(&x, &p);
            let f = forward_logits(&x, &p);
            let fd = dense::forward_logits(&x, &p);
            assert!(a.iter().zip(&ad).all(|(u, v)| (u - v).abs() < 1e-10));
            assert!(f.iter().zip(&fd).all(|(u, v)| (u - v).abs() < 1e-10));
        }
    }

    #[test]
    fn swapping_irrelevant_tokens_with_matching_neighbours() {
        // Positions 2 and 4 share neighbours (5 on both sides), so the multiset of
        // (token, previous token) pairs is unchanged by swapping them. With uniform
        // attention and no positional readout the logits must agree exactly.
        let c = cfg();
        let mut p = random_params(c, 9, 2.0);
        p.w_kq = Matrix::zeros(c.d(), c.d());
        for k in 0..c.n {
            for t in 0..c.l {
                p.w_v[(k, t)] = 0.0;
            }
        }
        let a = TokenSequence::from_parts(&[5, 9, 5, 11, 5], 1, 7, &[3, 3, 3, 3, 3]);
        let b = TokenSequence::from_parts(&[5, 11, 5, 9, 5], 1, 7, &[3, 3, 3, 3, 3]);
        let fa = forward_logits(&embed_prompt(&a, &c).unwrap(), &p);
        let fb = forward_logits(&embed_prompt(&b, &c).unwrap(), &p);
        assert!(fa.iter().zip(&fb).all(|(u, v)| (u - v).abs() < 1e-12));
    }

    #[test]
    fn logits_linear_in_value_matrix() {
        let c = cfg();
        let p = random_params(c, 3, 1.0);
        let q = random_params(c, 4, 1.0);
        let s = sample_train_sequence(&c, 4, &mut seeded(5)).unwrap();
        let x = embed_prompt(&s, &c).unwrap();
        let mut mix = p.clone();
        mix.w_v = p.w_v.scaled(2.0);
        mix.w_v.add_scaled(&q.w_v, -0.5);
        let mut q_same_kq = q.clone();
        q_same_kq.w_kq = p.w_kq.clone();
        let fp = forward_logits(&x, &p);
        let fq = forward_logits(&x, &q_same_kq);
        let fm = forward_logits(&x, &mix);
        for k in 0..c.n {
            assert!((fm[k] - (2.0 * fp[k] - 0.5 * fq[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn params_shape_checked() {
        let c = cfg();
        assert!(ModelParams::new(c, Matrix::zeros(3, 3), Matrix::zeros(16, 72)).is_err());
        let mut bad = ModelParams::zeros(c);
        bad.w_v[(0, 0)] = f64::NAN;
        assert!(ModelParams::new(c, bad.w_kq.clone(), bad.w_v.clone()).is_err());
    }
}
