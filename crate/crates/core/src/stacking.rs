//! Local stacking of base-model linear predictors.
//!
//! Each cell mixes the `M` base predictors with softmax weights whose logits
//! `v_m` are themselves a decomposed parameter over a lattice. Weights are fit
//! by minimizing a leave-one-out loss approximated with per-cell leverage.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::decomposition::{DecomposedParameter, PopulatedCells};
use crate::error::{Error, Result};
use crate::fit::{Adam, FitConfig};
use crate::glm::FamilySpec;
use crate::lattice::{CellIndex, LatticeSpec};

/// Leverage cap keeping `1/(1 − h)` finite in cells with `n ≤ M`.
pub const LEVERAGE_CAP: f64 = 0.9;
/// Ridge on `v` fixing the softmax shift freedom.
pub const GAUGE_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackingModel {
    pub lattice: LatticeSpec,
    pub m: usize,
    pub family: FamilySpec,
    /// Decomposed weight logits with `p = M`.
    pub weights: DecomposedParameter,
    pub loo_loss: f64,
    pub steps: usize,
}

impl StackingModel {
    pub fn uniform(lattice: &LatticeSpec, m: usize, order: usize, family: FamilySpec) -> Result<Self> {
        Ok(StackingModel {
            lattice: lattice.clone(),
            m,
            family,
            weights: DecomposedParameter::for_lattice(lattice, m, order)?,
            loo_loss: f64::NAN,
            steps: 0,
        })
    }

    pub fn order(&self) -> usize {
        self.weights.order
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Softmax weights of the base models in `cell`.
pub fn stack_weights(sm: &StackingModel, cell: &CellIndex) -> Result<Vec<f64>> {
    sm.lattice.check_cell(cell)?;
    Ok(softmax(&sm.weights.materialize_cell_params(cell)?))
}

fn check_shapes(base_logits: &DMatrix<f64>, m: usize, n: usize) -> Result<()> {
    if base_logits.ncols() != m {
        return Err(Error::DimensionError {
            expected: m,
            found: base_logits.ncols(),
        });
    }
    if base_logits.nrows() != n {
        return Err(Error::DimensionError {
            expected: base_logits.nrows(),
            found: n,
        });
    }
    Ok(())
}

/// `η_ens = Σ_m w_m(κ) η_m` per row.
pub fn ensemble_predict(sm: &StackingModel, base_logits: &DMatrix<f64>, cells: &[CellIndex]) -> Result<Vec<f64>> {
    check_shapes(base_logits, sm.m, cells.len())?;
    for cell in cells {
        sm.lattice.check_cell(cell)?;
    }
    let pc = PopulatedCells::new(&sm.weights, cells)?;
    let w = slot_weights(&pc, &sm.weights);
    Ok((0..cells.len())
        .map(|i| {
            let s = pc.slot_of_row[i];
            (0..sm.m).map(|j| w[s * sm.m + j] * base_logits[(i, j)]).sum()
        })
        .collect())
}

fn slot_weights(pc: &PopulatedCells, v: &DecomposedParameter) -> Vec<f64> {
    let m = v.p;
    let raw = pc.materialize(v);
    raw.chunks(m).flat_map(softmax).collect()
}

/// `h = min(M / n_cell, cap)`.
pub fn leverage(m: usize, n_cell: usize) -> f64 {
    if n_cell == 0 {
        return LEVERAGE_CAP;
    }
    (m as f64 / n_cell as f64).min(LEVERAGE_CAP)
}

/// Leverage of every row from the population of its full lattice cell.
pub fn row_leverages(m: usize, cells: &[CellIndex]) -> Vec<f64> {
    let mut counts: HashMap<&CellIndex, usize> = HashMap::new();
    for c in cells {
        *counts.entry(c).or_default() += 1;
    }
    cells.iter().map(|c| leverage(m, counts[c])).collect()
}

/// `(1/N) Σ nll(y_i, η_i) / (1 − h_i)`.
pub fn loo_loss(family: &FamilySpec, y: &[f64], eta: &[f64], h: &[f64]) -> f64 {
    let total: f64 = y
        .iter()
        .zip(eta)
        .zip(h)
        .map(|((&y, &e), &h)| family.nll_unchecked(y, e) / (1.0 - h))
        .sum();
    total / y.len().max(1) as f64
}

struct StackObjective<'a> {
    logits: &'a DMatrix<f64>,
    y: &'a [f64],
    h: Vec<f64>,
    family: FamilySpec,
    cells: PopulatedCells,
    m: usize,
}

impl StackObjective<'_> {
    /// Leverage-weighted loss plus gauge ridge, and its gradient.
    fn loss_grad(&self, v: &DecomposedParameter) -> (f64, DecomposedParameter) {
        let m = self.m;
        let n = self.y.len();
        let w = slot_weights(&self.cells, v);
        let mut slot_g = vec![0.0; self.cells.len() * m];
        let mut loss = 0.0;
        for i in 0..n {
            let s = self.cells.slot_of_row[i];
            let ws = &w[s * m..(s + 1) * m];
            let eta: f64 = (0..m).map(|j| ws[j] * self.logits[(i, j)]).sum();
            let scale = 1.0 / ((1.0 - self.h[i]) * n as f64);
            loss += self.family.nll_unchecked(self.y[i], eta) * scale;
            let r = self.family.dnll_deta(self.y[i], eta) * scale;
            for j in 0..m {
                slot_g[s * m + j] += r * ws[j] * (self.logits[(i, j)] - eta);
            }
        }
        let mut grad = v.clone();
        for c in &mut grad.components {
            c.values.iter_mut().for_each(|x| *x *= 2.0 * GAUGE_RIDGE);
        }
        self.cells.scatter(&slot_g, &mut grad);
        let ridge: f64 = v.to_flat().iter().map(|x| x * x).sum::<f64>() * GAUGE_RIDGE;
        (loss + ridge, grad)
    }

    fn loo(&self, v: &DecomposedParameter) -> f64 {
        let m = self.m;
        let w = slot_weights(&self.cells, v);
        let eta: Vec<f64> = (0..self.y.len())
            .map(|i| {
                let s = self.cells.slot_of_row[i];
                (0..m).map(|j| w[s * m + j] * self.logits[(i, j)]).sum()
            })
            .collect();
        loo_loss(&self.family, self.y, &eta, &self.h)
    }
}

/// Fits decomposed softmax weights of order `order` by Adam on the
/// leverage-corrected leave-one-out loss.
pub fn fit_stacking(
    base_logits: &DMatrix<f64>,
    y: &[f64],
    cells: &[CellIndex],
    lattice: &LatticeSpec,
    order: usize,
    family: FamilySpec,
    cfg: &FitConfig,
) -> Result<StackingModel> {
    cfg.validate()?;
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    let m = base_logits.ncols();
    check_shapes(base_logits, m, y.len())?;
    if cells.len() != y.len() {
        return Err(Error::DimensionError {
            expected: y.len(),
            found: cells.len(),
        });
    }
    if m == 0 {
        return Err(Error::Config("stacking needs at least one base model".into()));
    }
    if base_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalError("non-finite base predictor".into()));
    }
    for &v in y {
        family.check_response(v)?;
    }
    for cell in cells {
        lattice.check_cell(cell)?;
    }
    let mut sm = StackingModel::uniform(lattice, m, order, family)?;
    let obj = StackObjective {
        logits: base_logits,
        y,
        h: row_leverages(m, cells),
        family,
        cells: PopulatedCells::new(&sm.weights, cells)?,
        m,
    };
    let mut x = sm.weights.to_flat();
    let mut adam = Adam::new(x.len());
    let mut steps = 0;
    for step in 0..cfg.max_steps {
        let (loss, grad) = obj.loss_grad(&sm.weights);
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        adam.step(&mut x, &grad.to_flat(), cfg.learning_rate(step), cfg);
        sm.weights.set_flat(&x)?;
        steps = step + 1;
    }
    sm.loo_loss = obj.loo(&sm.weights);
    if !sm.loo_loss.is_finite() {
        return Err(Error::Diverged { step: steps });
    }
    sm.steps = steps;
    Ok(sm)
}

/// Gradient of the stacking objective at `v`, exposed for testing.
pub fn stacking_objective(
    v: &DecomposedParameter,
    base_logits: &DMatrix<f64>,
    y: &[f64],
    cells: &[CellIndex],
    family: FamilySpec,
) -> Result<(f64, DecomposedParameter)> {
    let m = base_logits.ncols();
    check_shapes(base_logits, m, y.len())?;
    let obj = StackObjective {
        logits: base_logits,
        y,
        h: row_leverages(m, cells),
        family,
        cells: PopulatedCells::new(v, cells)?,
        m,
    };
    Ok(obj.loss_grad(v))
}
