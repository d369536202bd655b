//! Prior scales that bound the effective degrees of freedom of each component.
//!
//! A component level-combination with `N` observations, average Fisher weight
//! `w̄` and `p` parameters gets `τ = 1/√(2 p w̄ N)` in per-component mode (total
//! df at most 1/2 per combination) or `τ = 1/√(w̄ N)` in per-parameter mode
//! (at most 1/2 per parameter). For a Gaussian response `w̄ = 1/σ²`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::decomposition::{ComponentId, DecomposedParameter, PopulatedCells};
use crate::error::{Error, Result};

/// Starting Fisher weight for the adaptive loop.
pub const INITIAL_WBAR: f64 = 0.25;
pub const WEIGHT_TOL: f64 = 1e-4;
pub const MAX_OUTER_ITERATIONS: usize = 10;

/// `s = Nτ²/(Nτ² + σ²)`.
pub fn shrinkage(n_alpha: usize, tau: f64, sigma: f64) -> f64 {
    let a = n_alpha as f64 * tau * tau;
    if tau.is_infinite() {
        return if n_alpha == 0 { 0.0 } else { 1.0 };
    }
    a / (a + sigma * sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    pub tau: f64,
    pub empty_component: bool,
}

/// `σ/√(2pN)`; `floor` is returned (and flagged) when `N = 0`.
pub fn tau_gaussian(sigma: f64, p: usize, n_alpha: usize, floor: f64) -> TauEstimate {
    if n_alpha == 0 {
        return TauEstimate {
            tau: floor,
            empty_component: true,
        };
    }
    TauEstimate {
        tau: sigma / (2.0 * p as f64 * n_alpha as f64).sqrt(),
        empty_component: false,
    }
}

/// `1/√(2 p w̄ N)`; `floor` is returned (and flagged) when `w̄ N = 0`.
pub fn tau_glm(p: usize, wbar: f64, n_alpha: usize, floor: f64) -> TauEstimate {
    if n_alpha == 0 || wbar <= 0.0 {
        return TauEstimate {
            tau: floor,
            empty_component: true,
        };
    }
    TauEstimate {
        tau: 1.0 / (2.0 * p as f64 * wbar * n_alpha as f64).sqrt(),
        empty_component: false,
    }
}

/// Effective degrees of freedom `tr[(XᵀWX + τ⁻²I)⁻¹ XᵀWX]`.
pub fn df_eff_ridge(x: &DMatrix<f64>, w: &[f64], tau: f64) -> Result<f64> {
    if w.len() != x.nrows() {
        return Err(Error::DimensionError {
            expected: x.nrows(),
            found: w.len(),
        });
    }
    if x.iter().chain(w).any(|v| !v.is_finite()) || tau.is_nan() || tau <= 0.0 {
        return Err(Error::NumericalError(
            "non-finite design, weights or prior scale".into(),
        ));
    }
    let p = x.ncols();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for (n, &wn) in w.iter().enumerate() {
        let row = x.row(n);
        for i in 0..p {
            let wi = wn * row[i];
            for j in 0..=i {
                a[(i, j)] += wi * row[j];
            }
        }
    }
    a.fill_upper_triangle_with_lower_triangle();
    Ok(df_from_gram(&a, tau))
}

/// Trace formula applied to a precomputed weighted Gram matrix.
pub fn df_from_gram(a: &DMatrix<f64>, tau: f64) -> f64 {
    let p = a.nrows();
    if p == 0 {
        return 0.0;
    }
    if tau.is_infinite() {
        let eig = SymmetricEigen::new(a.clone());
        let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = max * p as f64 * f64::EPSILON * 10.0;
        return eig.eigenvalues.iter().filter(|&&v| v > tol).count() as f64;
    }
    let mut m = a.clone();
    let ridge = 1.0 / (tau * tau);
    for i in 0..p {
        m[(i, i)] += ridge;
    }
    match m.cholesky() {
        Some(ch) => ch.solve(a).trace(),
        None => f64::NAN,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMode {
    PerParameter,
    PerComponent,
}

impl BoundMode {
    /// Denominator factor `c` in `τ = 1/√(c w̄ N)`.
    fn factor(self, p: usize) -> f64 {
        match self {
            BoundMode::PerParameter => 1.0,
            BoundMode::PerComponent => 2.0 * p as f64,
        }
    }
}

/// How prior scales are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scheme {
    GeneralizationPreserving,
    Fixed { tau: f64 },
    /// `τ^(k) = scale · rate^k`.
    Decay { scale: f64, rate: f64 },
    Unregularized,
}

impl Scheme {
    pub fn name(&self) -> String {
        match self {
            Scheme::GeneralizationPreserving => "generalization-preserving".into(),
            Scheme::Fixed { tau } => format!("fixed(tau={tau})"),
            Scheme::Decay { scale, rate } => format!("decay({scale}*{rate}^k)"),
            Scheme::Unregularized => "unregularized".into(),
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, Scheme::GeneralizationPreserving)
    }
}

/// Prior scales for one decomposition: `taus[component][combo]`, plus the
/// prior center of the global term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermScales {
    pub ids: Vec<ComponentId>,
    pub taus: Vec<Vec<f64>>,
    pub empty: Vec<Vec<bool>>,
    pub center: Vec<f64>,
}

impl TermScales {
    pub fn unregularized(param: &DecomposedParameter) -> Self {
        TermScales {
            ids: param.components.iter().map(|c| c.id.clone()).collect(),
            taus: param
                .components
                .iter()
                .map(|c| vec![f64::INFINITY; c.rows()])
                .collect(),
            empty: param
                .components
                .iter()
                .map(|c| vec![false; c.rows()])
                .collect(),
            center: vec![0.0; param.p],
        }
    }

    /// `Σ_α Σ_c ‖θ − center‖² / (2τ²)`, with the center applied to the global term only.
    pub fn penalty(&self, param: &DecomposedParameter) -> f64 {
        let p = param.p;
        let mut total = 0.0;
        for ((comp, taus), id) in param.components.iter().zip(&self.taus).zip(&self.ids) {
            debug_assert_eq!(&comp.id, id);
            for (r, &tau) in taus.iter().enumerate() {
                if tau.is_infinite() {
                    continue;
                }
                let row = comp.row(r, p);
                let sq: f64 = if comp.id.is_global() {
                    row.iter().zip(&self.center).map(|(v, c)| (v - c).powi(2)).sum()
                } else {
                    row.iter().map(|v| v * v).sum()
                };
                total += sq / (2.0 * tau * tau);
            }
        }
        total
    }

    /// Adds the penalty gradient into `grad`.
    pub fn add_penalty_gradient(&self, param: &DecomposedParameter, grad: &mut DecomposedParameter) {
        let p = param.p;
        for ((comp, g), taus) in param
            .components
            .iter()
            .zip(grad.components.iter_mut())
            .zip(&self.taus)
        {
            for (r, &tau) in taus.iter().enumerate() {
                if tau.is_infinite() {
                    continue;
                }
                let inv = 1.0 / (tau * tau);
                let row = comp.row(r, p);
                let grow = g.row_mut(r, p);
                for j in 0..p {
                    let c = if comp.id.is_global() { self.center[j] } else { 0.0 };
                    grow[j] += (row[j] - c) * inv;
                }
            }
        }
    }

    pub fn check_covers(&self, param: &DecomposedParameter) -> Result<()> {
        let ok = self.ids.len() == param.components.len()
            && self
                .ids
                .iter()
                .zip(&param.components)
                .zip(&self.taus)
                .all(|((id, c), t)| id == &c.id && t.len() == c.rows())
            && self.center.len() == param.p;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "regularization plan does not cover every component".into(),
            ))
        }
    }

    pub fn any_empty(&self) -> bool {
        self.empty.iter().flatten().any(|&e| e)
    }
}

/// Inputs for building the scales of one decomposition.
pub struct ScaleInputs<'a> {
    pub param: &'a DecomposedParameter,
    pub counts: &'a [Vec<usize>],
    pub fisher: &'a FisherState,
    pub n_total: usize,
    pub center: Vec<f64>,
}

impl TermScales {
    pub fn build(scheme: &Scheme, mode: BoundMode, inputs: ScaleInputs<'_>) -> Result<Self> {
        let ScaleInputs {
            param,
            counts,
            fisher,
            n_total,
            center,
        } = inputs;
        let p = param.p;
        let c = mode.factor(p);
        let floor = tau_floor(c, fisher.wbar_global, n_total);
        let mut taus = Vec::with_capacity(param.components.len());
        let mut empty = Vec::with_capacity(param.components.len());
        for (ci, comp) in param.components.iter().enumerate() {
            let rows = comp.rows();
            let mut t = Vec::with_capacity(rows);
            let mut e = Vec::with_capacity(rows);
            let wbar = fisher.wbar_for(&comp.id);
            for r in 0..rows {
                let n = counts[ci][r];
                let est = match scheme {
                    Scheme::GeneralizationPreserving => {
                        let w = wbar.map(|w| w[r]).unwrap_or(fisher.wbar_global);
                        if n == 0 || w <= 0.0 {
                            TauEstimate {
                                tau: floor,
                                empty_component: true,
                            }
                        } else {
                            TauEstimate {
                                tau: 1.0 / (c * w * n as f64).sqrt(),
                                empty_component: false,
                            }
                        }
                    }
                    Scheme::Fixed { tau } => TauEstimate {
                        tau: *tau,
                        empty_component: n == 0,
                    },
                    Scheme::Decay { scale, rate } => TauEstimate {
                        tau: scale * rate.powi(comp.id.order() as i32),
                        empty_component: n == 0,
                    },
                    Scheme::Unregularized => TauEstimate {
                        tau: f64::INFINITY,
                        empty_component: n == 0,
                    },
                };
                if est.tau.is_nan() || est.tau <= 0.0 {
                    return Err(Error::Config(format!(
                        "prior scale must be positive, got {}",
                        est.tau
                    )));
                }
                t.push(est.tau);
                e.push(est.empty_component);
            }
            taus.push(t);
            empty.push(e);
        }
        Ok(TermScales {
            ids: param.components.iter().map(|c| c.id.clone()).collect(),
            taus,
            empty,
            center,
        })
    }
}

/// Floor for empty combinations: the bound evaluated at the full sample.
pub fn tau_floor(factor: f64, wbar_global: f64, n_total: usize) -> f64 {
    1.0 / (factor * wbar_global.max(f64::MIN_POSITIVE) * n_total.max(1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationPlan {
    pub scheme: Scheme,
    pub mode: BoundMode,
    pub coefficients: TermScales,
    pub intercept: Option<TermScales>,
}

impl RegularizationPlan {
    pub fn unregularized(coefficients: &DecomposedParameter, intercept: Option<&DecomposedParameter>) -> Self {
        RegularizationPlan {
            scheme: Scheme::Unregularized,
            mode: BoundMode::PerComponent,
            coefficients: TermScales::unregularized(coefficients),
            intercept: intercept.map(TermScales::unregularized),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    pub id: ComponentId,
    pub wbar: Vec<f64>,
}

/// Average Fisher weights per component level-combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherState {
    pub components: Vec<ComponentWeights>,
    pub wbar_global: f64,
    pub iteration: usize,
}

impl FisherState {
    /// Same weight everywhere, e.g. `1/σ²` or the balanced start 0.25.
    pub fn constant(param: &DecomposedParameter, wbar: f64) -> Self {
        FisherState {
            components: param
                .components
                .iter()
                .map(|c| ComponentWeights {
                    id: c.id.clone(),
                    wbar: vec![wbar; c.rows()],
                })
                .collect(),
            wbar_global: wbar,
            iteration: 0,
        }
    }

    /// Averages row weights within every level-combination of `param`'s components.
    pub fn from_row_weights(
        param: &DecomposedParameter,
        cells: &PopulatedCells,
        row_weights: &[f64],
        iteration: usize,
    ) -> Self {
        let mut slot_sum = vec![0.0; cells.len()];
        for (&s, &w) in cells.slot_of_row.iter().zip(row_weights) {
            slot_sum[s] += w;
        }
        let mut sums: Vec<Vec<f64>> = param.components.iter().map(|c| vec![0.0; c.rows()]).collect();
        let counts = combo_counts(param, cells);
        for (slot, rows) in cells.rows.iter().enumerate() {
            for (ci, &r) in rows.iter().enumerate() {
                sums[ci][r] += slot_sum[slot];
            }
        }
        let n = row_weights.len().max(1) as f64;
        let components = param
            .components
            .iter()
            .zip(sums)
            .zip(&counts)
            .map(|((c, s), k)| ComponentWeights {
                id: c.id.clone(),
                wbar: s
                    .iter()
                    .zip(k)
                    .map(|(&s, &k)| if k == 0 { 0.0 } else { s / k as f64 })
                    .collect(),
            })
            .collect();
        FisherState {
            components,
            wbar_global: row_weights.iter().sum::<f64>() / n,
            iteration,
        }
    }

    pub fn wbar_for(&self, id: &ComponentId) -> Option<&[f64]> {
        self.components
            .iter()
            .find(|c| &c.id == id)
            .map(|c| c.wbar.as_slice())
    }

    /// Largest absolute change in any populated combination's weight.
    pub fn max_change(&self, previous: &FisherState) -> f64 {
        let mut delta = (self.wbar_global - previous.wbar_global).abs();
        for c in &self.components {
            if let Some(prev) = previous.wbar_for(&c.id) {
                for (a, b) in c.wbar.iter().zip(prev) {
                    if *a > 0.0 {
                        delta = delta.max((a - b).abs());
                    }
                }
            }
        }
        delta
    }
}

/// Observation counts per component level-combination.
pub fn combo_counts(param: &DecomposedParameter, cells: &PopulatedCells) -> Vec<Vec<usize>> {
    let mut counts: Vec<Vec<usize>> = param.components.iter().map(|c| vec![0; c.rows()]).collect();
    for (slot, rows) in cells.rows.iter().enumerate() {
        for (ci, &r) in rows.iter().enumerate() {
            counts[ci][r] += cells.counts[slot];
        }
    }
    counts
}

/// `Σ_g N_g ‖β_g‖² / (2σ²) > G p / 2`, with `beta_norms` holding `‖β_g‖`.
pub fn signal_improvement_check(
    beta_norms: &[f64],
    n_g: &[usize],
    sigma: f64,
    groups: usize,
    p: usize,
) -> Result<bool> {
    if beta_norms.len() != n_g.len() {
        return Err(Error::DimensionError {
            expected: beta_norms.len(),
            found: n_g.len(),
        });
    }
    let gain: f64 = beta_norms
        .iter()
        .zip(n_g)
        .map(|(b, &n)| n as f64 * b * b / (2.0 * sigma * sigma))
        .sum();
    Ok(gain > (groups * p) as f64 / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn shrinkage_values() {
        assert_relative_eq!(shrinkage(100, 0.1, 1.0), 0.5, epsilon = 1e-15);
        assert_eq!(shrinkage(0, 0.3, 1.0), 0.0);
        let n = 37;
        let sigma = 1.7;
        assert_relative_eq!(shrinkage(n, sigma / (n as f64).sqrt(), sigma), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn tau_values() {
        assert_relative_eq!(tau_gaussian(1.0, 1, 50, 1.0).tau, 0.1, epsilon = 1e-15);
        assert_relative_eq!(tau_gaussian(2.0, 2, 100, 1.0).tau, 0.1, epsilon = 1e-15);
        let e = tau_gaussian(1.0, 1, 0, 0.05);
        assert!(e.empty_component);
        assert_eq!(e.tau, 0.05);
        let (p, n) = (3, 400);
        assert_relative_eq!(
            tau_glm(p, 0.25, n, 1.0).tau,
            2f64.sqrt() / ((p * n) as f64).sqrt(),
            epsilon = 1e-14
        );
        let sigma = 1.3;
        assert_relative_eq!(
            tau_glm(p, 1.0 / (sigma * sigma), n, 1.0).tau,
            tau_gaussian(sigma, p, n, 1.0).tau,
            epsilon = 1e-15
        );
        assert!(tau_glm(2, 0.0, 10, 0.3).empty_component);
    }

    #[test]
    fn order_scaling_of_tau() {
        let (n, l) = (16_384usize, 4usize);
        for k in 0..4 {
            let nk = n / l.pow(k as u32);
            let tau = tau_gaussian(1.0, 1, nk, 1.0).tau;
            let expected = (l.pow(k as u32) as f64 / n as f64).sqrt() / 2f64.sqrt();
            assert_relative_eq!(tau, expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn df_ones_column_is_shrinkage() {
        for n in [1usize, 10, 250] {
            for tau in [0.01, 0.3, 2.0] {
                let x = DMatrix::from_element(n, 1, 1.0);
                let df = df_eff_ridge(&x, &vec![1.0; n], tau).unwrap();
                assert!((df - shrinkage(n, tau, 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn df_limits() {
        let x = DMatrix::from_fn(20, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let w = vec![1.0; 20];
        let df = df_eff_ridge(&x, &w, f64::INFINITY).unwrap();
        assert_eq!(df, 3.0);
        let big = df_eff_ridge(&x, &w, 1e6).unwrap();
        assert!((big - 3.0).abs() < 1e-6);
        let mut rank1 = DMatrix::from_element(10, 2, 1.0);
        rank1.column_mut(1).fill(2.0);
        assert_eq!(df_eff_ridge(&rank1, &[1.0; 10], f64::INFINITY).unwrap(), 1.0);
        let mut bad = x.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(df_eff_ridge(&bad, &w, 1.0), Err(Error::NumericalError(_))));
    }

    #[test]
    fn df_at_bound_is_at_most_half() {
        let n = 64;
        let x = DMatrix::from_element(n, 1, 1.0);
        let tau = tau_glm(1, 1.0, n, 1.0).tau;
        assert!(df_eff_ridge(&x, &vec![1.0; n], tau).unwrap() <= 0.5 + 1e-9);
    }

    #[test]
    fn signal_check() {
        assert!(!signal_improvement_check(&[0.0, 0.0], &[10, 10], 1.0, 2, 1).unwrap());
        assert!(signal_improvement_check(&[0.011f64.sqrt()], &[100], 1.0, 1, 1).unwrap());
        assert!(!signal_improvement_check(&[0.01f64.sqrt()], &[100], 1.0, 1, 1).unwrap());
    }

    #[test]
    fn penalty_matches_hand_sum() {
        let mut dp = DecomposedParameter::zeros(&[2], 1, 1).unwrap();
        dp.components[0].values = vec![3.0];
        dp.components[1].values = vec![1.0, -2.0];
        let scales = TermScales {
            ids: dp.components.iter().map(|c| c.id.clone()).collect(),
            taus: vec![vec![0.5], vec![1.0, 2.0]],
            empty: vec![vec![false], vec![false, false]],
            center: vec![1.0],
        };
        let expected = 4.0 / (2.0 * 0.25) + 1.0 / 2.0 + 4.0 / 8.0;
        assert_relative_eq!(scales.penalty(&dp), expected, epsilon = 1e-14);
    }
}
