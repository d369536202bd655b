use latticeglm::fit::{
    fit_model, laplace_covariance, predict, Baseline, Dataset, FitConfig, ModelSpec, PredictorRow,
};
use latticeglm::glm::Family;
use latticeglm::lattice::{CellIndex, LatticeSpec};
use latticeglm::regularization::Scheme;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn long_fit() -> FitConfig {
    FitConfig {
        max_steps: 20_000,
        lr_peak: 0.05,
        ..FitConfig::default()
    }
}

/// Two-level single-dimension lattice with an intercept and one slope.
fn toy(n: usize, seed: u64) -> (Dataset, LatticeSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lattice = LatticeSpec::uniform(1, 2).unwrap();
    let mut x = DMatrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    let mut cells = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let xi: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        x[(i, 0)] = 1.0;
        x[(i, 1)] = xi;
        y.push(0.5 + if c == 0 { 0.4 } else { -0.4 } + (1.0 + 0.3 * c as f64) * xi + 0.5 * e);
        cells.push(CellIndex(vec![c]));
    }
    let data = Dataset::new(vec!["intercept".into(), "x1".into()], x, y, cells).unwrap();
    (data, lattice)
}

fn solve(a: DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
    a.cholesky().unwrap().solve(&b)
}

#[test]
fn unregularized_global_fit_is_least_squares() {
    let (data, lattice) = toy(400, 1);
    let mut spec = ModelSpec::new(0, Scheme::Unregularized);
    spec.sigma2 = Some(0.25);
    let model = fit_model(&data, &lattice, &spec, Family::Gaussian, &long_fit(), None).unwrap();
    let xt = data.x.transpose();
    let beta = solve(&xt * &data.x, &xt * DVector::from_vec(data.y.clone()));
    let got = model.params.coefficients.to_flat();
    for j in 0..2 {
        assert!((got[j] - beta[j]).abs() < 1e-5, "{} vs {}", got[j], beta[j]);
    }
}

#[test]
fn fixed_scale_global_mean_shrinks_by_s() {
    let n = 200;
    let lattice = LatticeSpec::uniform(1, 2).unwrap();
    let y: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
    let cells = (0..n).map(|i| CellIndex(vec![i % 2])).collect();
    let data = Dataset::new(vec!["intercept".into()], DMatrix::from_element(n, 1, 1.0), y.clone(), cells).unwrap();
    let (tau, sigma2) = (0.05, 1.0);
    let mut spec = ModelSpec::new(0, Scheme::Fixed { tau });
    spec.baseline = Baseline::Zero;
    spec.sigma2 = Some(sigma2);
    let model = fit_model(&data, &lattice, &spec, Family::Gaussian, &long_fit(), None).unwrap();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let s = n as f64 * tau * tau / (n as f64 * tau * tau + sigma2);
    let got = model.params.coefficients.to_flat()[0];
    assert!((got - s * ybar).abs() < 1e-6, "{got} vs {}", s * ybar);

    let blocks = laplace_covariance(&model, &data).unwrap();
    let var = blocks.coefficients[0][0][(0, 0)];
    let want = 1.0 / (n as f64 / sigma2 + 1.0 / (tau * tau));
    assert!((var - want).abs() < 1e-12 * want.max(1.0), "{var} vs {want}");
    assert!((var - s * sigma2 / n as f64).abs() < 1e-12);
}

#[test]
fn first_order_fixed_scale_matches_ridge() {
    let (data, lattice) = toy(300, 2);
    let (tau, sigma2) = (0.7, 0.25);
    let mut spec = ModelSpec::new(1, Scheme::Fixed { tau });
    spec.baseline = Baseline::Zero;
    spec.sigma2 = Some(sigma2);
    let model = fit_model(&data, &lattice, &spec, Family::Gaussian, &long_fit(), None).unwrap();

    // Expanded design: [global (2) | level 0 (2) | level 1 (2)].
    let n = data.n();
    let mut z = DMatrix::zeros(n, 6);
    for i in 0..n {
        let c = data.cells[i].0[0];
        for j in 0..2 {
            z[(i, j)] = data.x[(i, j)];
            z[(i, 2 + 2 * c + j)] = data.x[(i, j)];
        }
    }
    let zt = z.transpose();
    let a = &zt * &z / sigma2 + DMatrix::identity(6, 6) / (tau * tau);
    let b = &zt * DVector::from_vec(data.y.clone()) / sigma2;
    let beta = solve(a, b);
    let got = model.params.coefficients.to_flat();
    assert_eq!(got.len(), 6);
    for j in 0..6 {
        assert!((got[j] - beta[j]).abs() < 1e-5, "param {j}: {} vs {}", got[j], beta[j]);
    }
}

#[test]
fn predict_agrees_with_dataset_predictor() {
    let (data, lattice) = toy(100, 3);
    let mut spec = ModelSpec::new(1, Scheme::GeneralizationPreserving);
    spec.sigma2 = Some(0.25);
    let model = fit_model(&data, &lattice, &spec, Family::Gaussian, &FitConfig::default(), None).unwrap();
    let rows: Vec<PredictorRow> = (0..data.n())
        .map(|i| PredictorRow {
            x: data.x.row(i).iter().copied().collect(),
            cell: data.cells[i].clone(),
        })
        .collect();
    let eta = model.eta_dataset(&data).unwrap();
    for ((e, m), want) in predict(&model, &rows).unwrap().into_iter().zip(eta) {
        assert!((e - want).abs() < 1e-12);
        assert_eq!(e, m);
    }
}

#[test]
fn order_above_lattice_dimension_is_rejected() {
    let (data, lattice) = toy(20, 4);
    let spec = ModelSpec::new(2, Scheme::GeneralizationPreserving);
    assert!(fit_model(&data, &lattice, &spec, Family::Gaussian, &FitConfig::default(), None).is_err());
}
