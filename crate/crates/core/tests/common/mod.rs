#![allow(dead_code)]

use induction_lab::datagen::{sample_general_sequence, SamplerConfig};
use induction_lab::model::{cross_entropy, embed_prompt, EmbeddedSequence};
use induction_lab::rng::seeded;
use induction_lab::trainer::{grad_wkq_sample, grad_wv_sample};
use induction_lab::{Matrix, ModelParams};
use rand::Rng;

pub const FD_EPS: f64 = 1e-5;

pub struct FdInstance {
    pub cfg: SamplerConfig,
    pub x: EmbeddedSequence,
    pub target: usize,
    /// Value matrix at which the `W_KQ` gradient is evaluated.
    pub w_v: Matrix,
}

/// Random small instances: `N <= 8`, `T <= 9`, `W_V` with entries in `[-2, 2]`.
pub fn fd_instances(count: usize, seed: u64) -> Vec<FdInstance> {
    let mut rng = seeded(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(3..=8);
            let n_trg = rng.random_range(1..n.min(4));
            let cfg = SamplerConfig::new(n, n_trg, 11).unwrap();
            let ell1 = rng.random_range(1..=3);
            let ell2 = rng.random_range(1..=(6 - ell1).min(3));
            let seq = sample_general_sequence(&cfg, ell1, ell2, &mut rng).unwrap();
            let x = embed_prompt(&seq, &cfg).unwrap();
            assert!(x.len() <= 9);
            let w_v = Matrix::from_fn(n, cfg.d(), |_, _| rng.random_range(-2.0..2.0));
            FdInstance {
                cfg,
                x,
                target: seq.target(),
                w_v,
            }
        })
        .collect()
}

/// Central difference of the loss in every entry of the matrix selected by `pick`.
fn central_difference(
    base: &ModelParams,
    x: &EmbeddedSequence,
    target: usize,
    pick: fn(&mut ModelParams) -> &mut Matrix,
) -> Matrix {
    let mut p = base.clone();
    let (rows, cols) = pick(&mut p).shape();
    Matrix::from_fn(rows, cols, |i, j| {
        let orig = pick(&mut p)[(i, j)];
        pick(&mut p)[(i, j)] = orig + FD_EPS;
        let up = cross_entropy(x, &p, target);
        pick(&mut p)[(i, j)] = orig - FD_EPS;
        let down = cross_entropy(x, &p, target);
        pick(&mut p)[(i, j)] = orig;
        (up - down) / (2.0 * FD_EPS)
    })
}

fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    analytic.sub(numeric).frobenius_norm() / analytic.frobenius_norm().max(numeric.frobenius_norm())
}

/// Relative Frobenius error of the analytic `W_V` gradient at zero parameters.
pub fn wv_gradient_error(inst: &FdInstance) -> f64 {
    let params = ModelParams::zeros(inst.cfg);
    let analytic = grad_wv_sample(&inst.x, inst.target, inst.cfg.n);
    let numeric = central_difference(&params, &inst.x, inst.target, |p| &mut p.w_v);
    relative_error(&analytic, &numeric)
}

/// Relative Frobenius error of the analytic `W_KQ` gradient at `(0, w_v)`.
pub fn wkq_gradient_error(inst: &FdInstance) -> f64 {
    let params = ModelParams::new(inst.cfg, Matrix::zeros(inst.cfg.d(), inst.cfg.d()), inst.w_v.clone()).unwrap();
    let analytic = grad_wkq_sample(&inst.x, inst.target, &inst.w_v);
    let numeric = central_difference(&params, &inst.x, inst.target, |p| &mut p.w_kq);
    relative_error(&analytic, &numeric)
}
