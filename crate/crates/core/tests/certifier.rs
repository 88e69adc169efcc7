use induction_lab::datagen::{LengthDistribution, SamplerConfig};
use induction_lab::diversity;
use induction_lab::oracle::certify_ood;

#[test]
fn diverse_windows_are_certified() {
    for (n_trg, k) in [(2, 7), (4, 14)] {
        let cfg = SamplerConfig::new(64, n_trg, 40).unwrap();
        let wide = certify_ood(&LengthDistribution::uniform(3, k).unwrap(), &cfg);
        assert!(wide.generalizes, "N_trg={n_trg}, Unif(3..{k}): margin {}", wide.margin);
        assert!(wide.witness.is_none());
        let narrow = certify_ood(&LengthDistribution::uniform(3, k - 1).unwrap(), &cfg);
        assert!(!narrow.generalizes, "N_trg={n_trg}, Unif(3..{})", k - 1);
        assert!(narrow.witness.is_some());
    }
}

#[test]
fn margin_grows_with_window_width() {
    let cfg = SamplerConfig::new(64, 4, 40).unwrap();
    let margins: Vec<f64> = (4..=17)
        .map(|k| certify_ood(&LengthDistribution::uniform(3, k).unwrap(), &cfg).margin)
        .collect();
    assert!(margins.windows(2).all(|w| w[1] > w[0]), "{margins:?}");
}

#[test]
fn singletons_fail_with_a_valid_witness() {
    let cfg = SamplerConfig::new(64, 2, 40).unwrap();
    for ell in 1..=17 {
        let c = certify_ood(&LengthDistribution::point(ell).unwrap(), &cfg);
        assert!(!c.generalizes);
        let w = c.witness.expect("witness");
        w.validate(&cfg).unwrap();
        assert_eq!(Some((w.ell1, w.ell2)), c.witness_pair);
        assert_eq!(c.max_sum_ratio, 1.0);
    }
}

#[test]
fn optimal_distribution_sits_on_the_ratio_boundary() {
    for n_trg in [2, 4] {
        let cfg = SamplerConfig::new(64, n_trg, 40).unwrap();
        let opt = diversity::optimal_distribution(n_trg, n_trg).unwrap();
        let c = certify_ood(&opt, &cfg);
        assert_eq!(c.max_sum_ratio, 1.0 / n_trg as f64);
        // Weighting by the full sequence length T pushes the ratio above 1 / N_trg.
        assert!(c.max_sum_ratio_t > 1.0 / n_trg as f64);
    }
}
