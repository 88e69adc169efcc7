use std::collections::BTreeMap;

use induction_lab::datagen::{generate_ood_dataset, generate_train_dataset, LengthDistribution, SamplerConfig};
use induction_lab::rng::streams;

/// Pearson statistic against expected probabilities.
fn chi_square(counts: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * total as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}

/// Upper `1e-6` quantile of chi-square with `df` degrees of freedom (Wilson-Hilferty).
fn critical(df: usize) -> f64 {
    let k = df as f64;
    let z = 4.753;
    k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3)
}

#[test]
fn train_lengths_follow_the_distribution() {
    let cfg = SamplerConfig::new(10, 3, 30).unwrap();
    let dist = LengthDistribution::new(vec![2, 4, 7, 9], vec![0.1, 0.4, 0.3, 0.2]).unwrap();
    let seqs = generate_train_dataset(&cfg, &dist, 5, streams::GENERATE, 40_000).unwrap();
    let mut counts = BTreeMap::new();
    for s in &seqs {
        assert_eq!(s.ell1, s.ell2);
        *counts.entry(s.ell1).or_insert(0u64) += 1;
    }
    assert_eq!(counts.keys().copied().collect::<Vec<_>>(), vec![2, 4, 7, 9]);
    let c: Vec<u64> = counts.values().copied().collect();
    assert!(chi_square(&c, dist.masses()) < critical(3));
}

#[test]
fn triggers_outputs_and_fillers_are_uniform() {
    let cfg = SamplerConfig::new(10, 3, 30).unwrap();
    let dist = LengthDistribution::uniform(3, 6).unwrap();
    let seqs = generate_train_dataset(&cfg, &dist, 6, streams::GENERATE, 40_000).unwrap();
    let mut trig = vec![0u64; cfg.n_trg];
    let mut out = vec![0u64; cfg.n_other()];
    let mut fill = vec![0u64; cfg.n_other()];
    for s in &seqs {
        trig[s.trigger - 1] += 1;
        out[s.output - cfg.n_trg - 1] += 1;
        for pos in (1..=s.ell1).chain(s.ell1 + 3..s.query_position()) {
            fill[s.token(pos) - cfg.n_trg - 1] += 1;
        }
    }
    let ut = vec![1.0 / cfg.n_trg as f64; cfg.n_trg];
    let uo = vec![1.0 / cfg.n_other() as f64; cfg.n_other()];
    assert!(chi_square(&trig, &ut) < critical(cfg.n_trg - 1));
    assert!(chi_square(&out, &uo) < critical(cfg.n_other() - 1));
    assert!(chi_square(&fill, &uo) < critical(cfg.n_other() - 1));
}

#[test]
fn ood_pairs_are_uniform_within_each_total() {
    let cfg = SamplerConfig::new(10, 2, 30).unwrap();
    let (lo, hi) = (3, 6);
    let seqs = generate_ood_dataset(&cfg, lo, hi, 9, streams::GENERATE, 60_000).unwrap();
    let mut by_ell: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
    for s in &seqs {
        assert_ne!(s.ell1, s.ell2);
        let ell = (s.ell1 + s.ell2) / 2;
        *by_ell.entry(ell).or_default().entry(s.ell1).or_insert(0) += 1;
    }
    // ell is uniform on ell_min+1 ..= ell_max.
    assert_eq!(by_ell.keys().copied().collect::<Vec<_>>(), vec![4, 5, 6]);
    let totals: Vec<u64> = by_ell.values().map(|m| m.values().sum()).collect();
    assert!(chi_square(&totals, &[1.0 / 3.0; 3]) < critical(2));
    for (ell, m) in &by_ell {
        let expect: Vec<usize> = (1..2 * ell).filter(|&a| a != *ell).collect();
        assert_eq!(m.keys().copied().collect::<Vec<_>>(), expect);
        let c: Vec<u64> = m.values().copied().collect();
        let p = vec![1.0 / c.len() as f64; c.len()];
        assert!(chi_square(&c, &p) < critical(c.len() - 1), "ell = {ell}");
    }
}

#[test]
fn streams_and_seeds_give_distinct_data() {
    let cfg = SamplerConfig::new(10, 3, 30).unwrap();
    let dist = LengthDistribution::uniform(3, 6).unwrap();
    let a = generate_train_dataset(&cfg, &dist, 1, streams::TRAIN_V, 64).unwrap();
    let b = generate_train_dataset(&cfg, &dist, 1, streams::TRAIN_KQ, 64).unwrap();
    let c = generate_train_dataset(&cfg, &dist, 2, streams::TRAIN_V, 64).unwrap();
    let again = generate_train_dataset(&cfg, &dist, 1, streams::TRAIN_V, 64).unwrap();
    assert_eq!(a, again);
    assert_ne!(a, b);
    assert_ne!(a, c);
}
