use induction_lab::datagen::{LengthDistribution, SamplerConfig};
use induction_lab::experiment::{concentration, DistSpec, ExperimentConfig};
use induction_lab::oracle::{self, exact};
use induction_lab::trainer::{run_algorithm1, TrainConfig};

fn small() -> (SamplerConfig, LengthDistribution) {
    (
        SamplerConfig::new(8, 2, 16).unwrap(),
        LengthDistribution::uniform(4, 5).unwrap(),
    )
}

#[test]
fn value_oracle_matches_monte_carlo_average() {
    let (cfg, dist) = small();
    let seeds = 8;
    // eta_V = N gives unit effective rate.
    let runs: Vec<_> = (0..seeds)
        .map(|s| {
            let tc = TrainConfig {
                eta_v: cfg.n as f64,
                eta_kq: 0.0,
                m_v: 200_000,
                m_kq: 1,
                seed: 40 + s,
                reuse_samples: false,
            };
            run_algorithm1(&cfg, &dist, &tc).unwrap().w_v
        })
        .collect();
    let pop = oracle::population_wv(&dist, &cfg, 1.0);
    let k = seeds as f64;
    for i in 0..cfg.n {
        for j in 0..cfg.d() {
            let mean = runs.iter().map(|w| w[(i, j)]).sum::<f64>() / k;
            let sd = (runs.iter().map(|w| (w[(i, j)] - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
            let dev = (mean - pop[(i, j)]).abs();
            assert!(
                dev <= 5.0 * sd / k.sqrt() + 1e-12,
                "entry ({i}, {j}): deviation {dev:e}, standard error {:e}",
                sd / k.sqrt()
            );
            assert!(dev < 2e-2 * pop.max_abs(), "entry ({i}, {j}): deviation {dev:e}");
        }
    }
}

#[test]
fn dominant_key_query_form_is_within_its_error_bound() {
    for (n, n_trg) in [(8, 1), (8, 2), (10, 2), (10, 3)] {
        let cfg = SamplerConfig::new(n, n_trg, 16).unwrap();
        let dist = LengthDistribution::uniform(4, 5).unwrap();
        let stats = oracle::population_stats(&dist, cfg.l);
        let wv = oracle::population_wv(&dist, &cfg, 1.0);
        let exact = exact::population_wkq_linearized(&dist, &cfg, &wv, 1.0).unwrap();
        let dom = oracle::population_wkq(&dist, &cfg, stats.expected_inv_t);
        let diff = exact.sub(&dom.matrix).max_abs();
        assert!(
            diff <= dom.error_bound,
            "N={n} N_trg={n_trg}: {diff:e} > {:e}",
            dom.error_bound
        );
    }
}

fn concentration_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::example();
    c.sampler = SamplerConfig::new(8, 2, 16).unwrap();
    c.dist = DistSpec::Uniform { lo: 4, hi: 5 };
    c.eval.ell_min = 3;
    c.eval.ell_max = 5;
    c
}

#[test]
fn zero_learning_rates_give_zero_error() {
    let mut c = concentration_config();
    c.concentration.eta_v = 0.0;
    c.concentration.eta_kq = 0.0;
    c.concentration.m_list = vec![100, 1000];
    c.concentration.seeds = 2;
    let r = concentration(&c).unwrap();
    for row in &r.rows {
        assert_eq!((row.wv_error, row.wkq_error), (0.0, 0.0));
    }
    assert!(r.wv_slope.is_none() && r.wkq_slope.is_none());
}

#[test]
fn doubling_samples_shrinks_error_by_root_two() {
    let mut c = concentration_config();
    c.concentration.m_list = vec![20_000, 40_000];
    c.concentration.seeds = 12;
    let r = concentration(&c).unwrap();
    let target = 1.0 / 2f64.sqrt();
    for (name, ratio) in [
        ("W_V", r.rows[1].wv_error / r.rows[0].wv_error),
        ("W_KQ", r.rows[1].wkq_error / r.rows[0].wkq_error),
    ] {
        assert!((ratio / target - 1.0).abs() < 0.2, "{name}: ratio {ratio}");
    }
}
