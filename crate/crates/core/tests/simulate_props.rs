use latticeglm::evaluation::estimate_rho;
use latticeglm::fit::{fit_model, FitConfig, ModelSpec};
use latticeglm::glm::Family;
use latticeglm::regularization::Scheme;
use latticeglm::simulate::{
    gen_hierarchical, replication_rng, run_regularization_comparison, run_replica_check,
    train_test_split, SimConfig,
};
use proptest::prelude::*;

proptest! {
    #[test]
    fn split_is_disjoint_and_exhaustive(n in 1usize..500, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let (train, test) = train_test_split(n, frac, &mut replication_rng(seed, 0));
        prop_assert!(!train.is_empty());
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn generator_is_seed_deterministic(seed in any::<u64>()) {
        let a = gen_hierarchical(2, 3, 50, 0.3, 1.0, 2, Family::BernoulliLogit, seed).unwrap();
        let b = gen_hierarchical(2, 3, 50, 0.3, 1.0, 2, Family::BernoulliLogit, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn effect_variance_decays_geometrically() {
    let rho = 0.4;
    for seed in 0..3 {
        let (_, truth) = gen_hierarchical(3, 10, 1, rho, 1.0, 1, Family::Gaussian, seed).unwrap();
        for k in 2..=3 {
            let vals: Vec<f64> = truth
                .truth
                .components
                .iter()
                .filter(|c| c.id.order() == k)
                .flat_map(|c| c.values.clone())
                .collect();
            let m2 = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
            let want = rho.powi(k as i32);
            assert!((m2 / want - 1.0).abs() < 0.25, "order {k}: {m2} vs {want}");
        }
    }
}

#[test]
fn gaussian_noise_has_the_requested_scale() {
    let (data, truth) = gen_hierarchical(1, 2, 20_000, 0.3, 0.7, 1, Family::Gaussian, 4).unwrap();
    let resid: Vec<f64> = (0..data.n())
        .map(|i| data.y[i] - truth.truth.materialize_cell_params(&data.cells[i]).unwrap()[0])
        .collect();
    let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
    assert!((var.sqrt() - 0.7).abs() < 0.02);
}

#[test]
fn comparison_is_reproducible() {
    let cfg = SimConfig {
        d: 2,
        levels: 3,
        n: 400,
        max_order: 1,
        waic_draws: 100,
        fit: FitConfig { max_steps: 200, ..FitConfig::default() },
        ..SimConfig::default()
    };
    let a = run_regularization_comparison(&cfg, 2, 17).unwrap();
    let b = run_regularization_comparison(&cfg, 2, 17).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2 * 2 * cfg.schemes.len());
    let c = run_regularization_comparison(&cfg, 2, 18).unwrap();
    assert_ne!(a.rows, c.rows);
}

#[test]
fn replica_check_rejects_bad_shapes() {
    assert!(run_replica_check(10, 10, 1e-3, 1.0, 10, 0).is_err());
    assert!(run_replica_check(5, 100, 0.0, 1.0, 10, 0).is_err());
    let r = run_replica_check(5, 100, 1e-2, 1.0, 50, 0).unwrap();
    assert!(r.mc_mean > 0.0 && r.mc_mean < 5.0);
}

#[test]
fn decay_rate_estimate_on_wide_designs() {
    // With many coefficients per tensor the order-0 second moment is well determined.
    let mut hits = 0;
    for seed in 0..5 {
        let (data, truth) = gen_hierarchical(3, 4, 20_000, 0.3, 1.0, 12, Family::Gaussian, seed).unwrap();
        let fits: Vec<_> = (0..=1)
            .map(|k| {
                let mut spec = ModelSpec::new(k, Scheme::Fixed { tau: 1.0 });
                spec.sigma2 = Some(1.0);
                fit_model(&data, &truth.lattice, &spec, Family::Gaussian, &FitConfig::default(), None).unwrap()
            })
            .collect();
        let rho = estimate_rho(&fits).unwrap();
        hits += (0.15..0.5).contains(&rho) as usize;
    }
    assert!(hits >= 4, "{hits}/5 estimates inside (0.15, 0.5)");
}
