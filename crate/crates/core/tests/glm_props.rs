use latticeglm::glm::{sigmoid, softplus, FamilySpec};
use proptest::prelude::*;

fn families() -> Vec<FamilySpec> {
    vec![
        FamilySpec::gaussian(0.7).unwrap(),
        FamilySpec::bernoulli(),
        FamilySpec::poisson(),
    ]
}

fn response(f: &FamilySpec, u: f64) -> f64 {
    match f.family.name() {
        "gaussian" => 4.0 * u - 2.0,
        "bernoulli-logit" => (u > 0.5) as u8 as f64,
        _ => (u * 6.0).floor(),
    }
}

proptest! {
    #[test]
    fn score_matches_finite_difference(eta in -4.0f64..4.0, u in 0.0f64..1.0) {
        for f in families() {
            let y = response(&f, u);
            let h = 1e-5;
            let fd = (f.nll(y, eta + h).unwrap() - f.nll(y, eta - h).unwrap()) / (2.0 * h);
            let g = f.dnll_deta(y, eta);
            prop_assert!((g - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{} {} vs {}", f.family.name(), g, fd);
        }
    }

    #[test]
    fn fisher_weight_is_the_curvature(eta in -4.0f64..4.0, u in 0.0f64..1.0) {
        for f in families() {
            let y = response(&f, u);
            let h = 1e-4;
            let fd = (f.dnll_deta(y, eta + h) - f.dnll_deta(y, eta - h)) / (2.0 * h);
            let w = f.fisher_weight_eta(eta);
            prop_assert!(w > 0.0);
            prop_assert!((w - fd).abs() <= 1e-6 * w.max(1.0));
        }
    }

    #[test]
    fn link_inverts_mean(eta in -8.0f64..8.0) {
        for f in families() {
            prop_assert!((f.link(f.mean(eta)) - eta).abs() <= 1e-8);
        }
    }

    #[test]
    fn stable_logistic_helpers(eta in -30.0f64..30.0) {
        let naive = (1.0 + eta.exp()).ln();
        prop_assert!((softplus(eta) - naive).abs() <= 1e-12 * naive.max(1e-300).max(1.0));
        prop_assert!((sigmoid(eta) + sigmoid(-eta) - 1.0).abs() <= 1e-15);
    }
}

#[test]
fn extreme_predictors_stay_finite() {
    let b = FamilySpec::bernoulli();
    for eta in [-800.0, 800.0] {
        assert!(b.nll(1.0, eta).unwrap().is_finite());
        assert!(b.nll(0.0, eta).unwrap().is_finite());
        assert!(b.fisher_weight_eta(eta) >= 0.0);
    }
    assert_eq!(softplus(800.0), 800.0);
}

#[test]
fn invalid_responses_rejected() {
    assert!(FamilySpec::bernoulli().nll(0.5, 0.0).is_err());
    assert!(FamilySpec::poisson().nll(-1.0, 0.0).is_err());
    assert!(FamilySpec::poisson().nll(1.5, 0.0).is_err());
    assert!(FamilySpec::gaussian(1.0).unwrap().nll(f64::NAN, 0.0).is_err());
    assert!(FamilySpec::gaussian(0.0).is_err());
}
