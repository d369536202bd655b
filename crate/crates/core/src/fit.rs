//! MAP estimation of decomposed piecewise GLMs.
//!
//! The objective is the summed negative log-likelihood plus the Gaussian-prior
//! penalty of the regularization plan. It is minimized with Adam under a
//! linear-warmup, cosine-decay learning-rate schedule. Observation-level work
//! is aggregated per populated cell before being scattered to the components.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomposition::{DecomposedParameter, PopulatedCells};
use crate::error::{Error, Result};
use crate::glm::{dot, Family, FamilySpec};
use crate::lattice::{CellIndex, LatticeSpec};
use crate::regularization::{
    combo_counts, df_from_gram, BoundMode, FisherState, RegularizationPlan, ScaleInputs, Scheme,
    TermScales, INITIAL_WBAR, MAX_OUTER_ITERATIONS, WEIGHT_TOL,
};

/// Design matrix, response and cell assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    /// `N × p`.
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub cells: Vec<CellIndex>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        x: DMatrix<f64>,
        y: Vec<f64>,
        cells: Vec<CellIndex>,
    ) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(Error::DimensionError {
                expected: x.nrows(),
                found: y.len(),
            });
        }
        if cells.len() != x.nrows() {
            return Err(Error::DimensionError {
                expected: x.nrows(),
                found: cells.len(),
            });
        }
        if feature_names.len() != x.ncols() {
            return Err(Error::DimensionError {
                expected: x.ncols(),
                found: feature_names.len(),
            });
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::NumericalError("dataset contains non-finite values".into()));
        }
        Ok(Dataset {
            feature_names,
            x,
            y,
            cells,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            cells: rows.iter().map(|&i| self.cells[i].clone()).collect(),
        }
    }

    /// Row-major copy of the design.
    pub fn rows_flat(&self) -> Vec<f64> {
        let (n, p) = self.x.shape();
        let mut out = Vec::with_capacity(n * p);
        for i in 0..n {
            for j in 0..p {
                out.push(self.x[(i, j)]);
            }
        }
        out
    }

    pub fn mean_response(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.n().max(1) as f64
    }

    /// Index of the first all-ones column, if any.
    pub fn intercept_column(&self) -> Option<usize> {
        (0..self.p()).find(|&j| self.x.column(j).iter().all(|&v| v == 1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Batch {
    Full,
    Minibatch { size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Relative loss change over `patience` steps below which fitting stops.
    pub tol: f64,
    pub patience: usize,
    pub seed: u64,
    pub batch: Batch,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_steps: 3000,
            lr_start: 0.001,
            lr_peak: 0.02,
            lr_end: 0.001,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            tol: 1e-12,
            patience: 100,
            seed: 0,
            batch: Batch::Full,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.max_steps == 0 {
            problems.push("max_steps must be positive".to_string());
        }
        for (name, v) in [
            ("lr_start", self.lr_start),
            ("lr_peak", self.lr_peak),
            ("lr_end", self.lr_end),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            problems.push(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("Adam moment decays must lie in [0, 1)".to_string());
        }
        if !(self.eps > 0.0) {
            problems.push("eps must be positive".to_string());
        }
        if !(self.tol > 0.0) {
            problems.push("tol must be positive".to_string());
        }
        if let Batch::Minibatch { size: 0 } = self.batch {
            problems.push("minibatch size must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Learning rate at `step` (0-based): linear warmup then cosine decay.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let warmup = (self.warmup_fraction * self.max_steps as f64).floor() as usize;
        if step < warmup {
            return self.lr_start + (self.lr_peak - self.lr_start) * step as f64 / warmup as f64;
        }
        let span = self.max_steps.saturating_sub(warmup + 1).max(1);
        let q = ((step - warmup) as f64 / span as f64).min(1.0);
        self.lr_end + 0.5 * (self.lr_peak - self.lr_end) * (1.0 + (std::f64::consts::PI * q).cos())
    }
}

/// Coefficient decomposition plus an optional separately-truncated intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub coefficients: DecomposedParameter,
    pub intercept: Option<DecomposedParameter>,
}

impl Params {
    pub fn zeros(lattice: &LatticeSpec, p: usize, shape: &ModelShape) -> Result<Self> {
        Ok(Params {
            coefficients: DecomposedParameter::for_lattice(lattice, p, shape.order)?,
            intercept: shape
                .intercept_order
                .map(|k| DecomposedParameter::for_lattice(lattice, 1, k))
                .transpose()?,
        })
    }

    pub fn n_params(&self) -> usize {
        self.coefficients.n_params() + self.intercept.as_ref().map_or(0, |i| i.n_params())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.coefficients.to_flat();
        if let Some(i) = &self.intercept {
            v.extend(i.to_flat());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let nc = self.coefficients.n_params();
        if flat.len() != self.n_params() {
            return Err(Error::DimensionError {
                expected: self.n_params(),
                found: flat.len(),
            });
        }
        self.coefficients.set_flat(&flat[..nc])?;
        if let Some(i) = &mut self.intercept {
            i.set_flat(&flat[nc..])?;
        }
        Ok(())
    }

    /// `η = x·θ^κ + b^κ`.
    pub fn eta(&self, x: &[f64], cell: &CellIndex) -> Result<f64> {
        let theta = self.coefficients.materialize_cell_params(cell)?;
        if theta.len() != x.len() {
            return Err(Error::DimensionError {
                expected: theta.len(),
                found: x.len(),
            });
        }
        let b = match &self.intercept {
            Some(i) => i.materialize_cell_params(cell)?[0],
            None => 0.0,
        };
        Ok(dot(&theta, x) + b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Truncation order of the coefficient decomposition.
    pub order: usize,
    /// Truncation order of a separate intercept decomposition, if any.
    pub intercept_order: Option<usize>,
}

impl ModelShape {
    pub fn new(order: usize) -> Self {
        ModelShape {
            order,
            intercept_order: None,
        }
    }

    pub fn check(&self, d: usize) -> Result<()> {
        for k in std::iter::once(self.order).chain(self.intercept_order) {
            if k > d {
                return Err(Error::InvalidTruncation { order: k, d });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentDf {
    pub component: String,
    pub df: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub penalty: f64,
    pub train_nll: f64,
    pub steps: usize,
    pub converged: bool,
    pub outer_iterations: usize,
    pub df: Vec<ComponentDf>,
    pub df_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub lattice: LatticeSpec,
    pub feature_names: Vec<String>,
    pub params: Params,
    pub family: FamilySpec,
    pub reg: RegularizationPlan,
    pub fisher: FisherState,
    pub diagnostics: Diagnostics,
}

impl FittedModel {
    pub fn order(&self) -> usize {
        self.params.coefficients.order
    }

    pub fn eta_dataset(&self, data: &Dataset) -> Result<Vec<f64>> {
        let obj = Objective::new(data, &self.params, self.family, &self.reg)?;
        Ok(obj.eta(&self.params))
    }

    /// Mean negative log-likelihood per observation on `data`.
    pub fn mean_nll(&self, data: &Dataset) -> Result<f64> {
        let eta = self.eta_dataset(data)?;
        let mut total = 0.0;
        for (&y, &e) in data.y.iter().zip(&eta) {
            total += self.family.nll(y, e)?;
        }
        Ok(total / data.n().max(1) as f64)
    }
}

/// Row supplied to [`predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorRow {
    pub x: Vec<f64>,
    pub cell: CellIndex,
}

/// Linear predictor and mean for every row.
pub fn predict(model: &FittedModel, rows: &[PredictorRow]) -> Result<Vec<(f64, f64)>> {
    rows.iter()
        .map(|row| {
            model.lattice.check_cell(&row.cell)?;
            let eta = model.params.eta(&row.x, &row.cell)?;
            Ok((eta, model.family.mean(eta)))
        })
        .collect()
}

/// Prior center of the global term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Link of the mean response on the intercept.
    MeanResponse,
    Zero,
}

/// Everything needed to fit a model beyond the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub shape: ModelShape,
    pub scheme: Scheme,
    pub mode: BoundMode,
    pub baseline: Baseline,
    /// Gaussian dispersion; estimated from a global fit when absent.
    pub sigma2: Option<f64>,
}

impl ModelSpec {
    pub fn new(order: usize, scheme: Scheme) -> Self {
        ModelSpec {
            shape: ModelShape::new(order),
            scheme,
            mode: BoundMode::PerComponent,
            baseline: Baseline::MeanResponse,
            sigma2: None,
        }
    }
}

/// Residual variance of a near-unpenalized global least-squares fit.
pub fn estimate_sigma2(data: &Dataset) -> Result<f64> {
    let (n, p) = data.x.shape();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let xt = data.x.transpose();
    let mut a = &xt * &data.x;
    let ridge = 1e-8 * (a.trace() / p.max(1) as f64).max(1e-12);
    for i in 0..p {
        a[(i, i)] += ridge;
    }
    let y = nalgebra::DVector::from_column_slice(&data.y);
    let rhs = &xt * &y;
    let beta = a
        .cholesky()
        .ok_or_else(|| Error::NumericalError("global least-squares system is singular".into()))?
        .solve(&rhs);
    let resid = &y - &data.x * beta;
    let dof = n.saturating_sub(p).max(1) as f64;
    let s2 = resid.norm_squared() / dof;
    if s2 > 0.0 && s2.is_finite() {
        Ok(s2)
    } else {
        Err(Error::NumericalError(format!("estimated residual variance {s2}")))
    }
}

struct Centers {
    coefficients: Vec<f64>,
    intercept: f64,
}

fn centers(data: &Dataset, family: &FamilySpec, baseline: Baseline, has_intercept: bool) -> Centers {
    let mut c = Centers {
        coefficients: vec![0.0; data.p()],
        intercept: 0.0,
    };
    if baseline == Baseline::MeanResponse {
        let g = family.link(data.mean_response());
        if has_intercept {
            c.intercept = g;
        } else if let Some(j) = data.intercept_column() {
            c.coefficients[j] = g;
        }
    }
    c
}

fn build_plan(
    spec: &ModelSpec,
    params: &Params,
    cells: &[CellIndex],
    fisher: &FisherState,
    centers: &Centers,
) -> Result<RegularizationPlan> {
    let n_total = cells.len();
    let coef_cells = PopulatedCells::new(&params.coefficients, cells)?;
    let coefficients = TermScales::build(
        &spec.scheme,
        spec.mode,
        ScaleInputs {
            param: &params.coefficients,
            counts: &combo_counts(&params.coefficients, &coef_cells),
            fisher,
            n_total,
            center: centers.coefficients.clone(),
        },
    )?;
    let intercept = match &params.intercept {
        Some(ip) => {
            let ic = PopulatedCells::new(ip, cells)?;
            Some(TermScales::build(
                &spec.scheme,
                spec.mode,
                ScaleInputs {
                    param: ip,
                    counts: &combo_counts(ip, &ic),
                    fisher,
                    n_total,
                    center: vec![centers.intercept],
                },
            )?)
        }
        None => None,
    };
    Ok(RegularizationPlan {
        scheme: spec.scheme,
        mode: spec.mode,
        coefficients,
        intercept,
    })
}

/// Fits a model end to end: dispersion, prior centers, prior scales, and for
/// adaptive non-Gaussian fits the outer Fisher-weight iteration.
pub fn fit_model(
    data: &Dataset,
    lattice: &LatticeSpec,
    spec: &ModelSpec,
    family: Family,
    cfg: &FitConfig,
    init: Option<&Params>,
) -> Result<FittedModel> {
    spec.shape.check(lattice.d())?;
    cfg.validate()?;
    if data.n() == 0 {
        return Err(Error::EmptyData);
    }
    let family = match family {
        Family::Gaussian => {
            let s2 = match spec.sigma2 {
                Some(s2) => s2,
                None => estimate_sigma2(data)?,
            };
            FamilySpec::gaussian(s2)?
        }
        f => FamilySpec::new(f, None)?,
    };
    for &y in &data.y {
        family.check_response(y)?;
    }
    let zeros = Params::zeros(lattice, data.p(), &spec.shape)?;
    let all_ids = if zeros
        .intercept
        .as_ref()
        .is_some_and(|i| i.order > zeros.coefficients.order)
    {
        zeros.intercept.as_ref().unwrap()
    } else {
        &zeros.coefficients
    };
    let wbar0 = match family.family {
        Family::Gaussian => 1.0 / family.dispersion,
        Family::BernoulliLogit => INITIAL_WBAR,
        Family::PoissonLog => data.mean_response().max(1e-6),
    };
    let mut fisher = FisherState::constant(all_ids, wbar0);
    let ctr = centers(data, &family, spec.baseline, zeros.intercept.is_some());
    let mut reg = build_plan(spec, &zeros, &data.cells, &fisher, &ctr)?;
    let mut model = map_fit(data, lattice, &spec.shape, family, &reg, cfg, init)?;
    if !(spec.scheme.is_adaptive() && family.family != Family::Gaussian) {
        model.fisher = fisher;
        return Ok(model);
    }
    for outer in 1..=MAX_OUTER_ITERATIONS {
        let (next, _) = iterate_weights(&model, data, outer)?;
        let delta = next.max_change(&fisher);
        fisher = next;
        reg = build_plan(spec, &model.params, &data.cells, &fisher, &ctr)?;
        let params = model.params.clone();
        model = map_fit(data, lattice, &spec.shape, family, &reg, cfg, Some(&params))?;
        model.diagnostics.outer_iterations = outer;
        model.fisher = fisher.clone();
        if delta < WEIGHT_TOL {
            return Ok(model);
        }
        if outer == MAX_OUTER_ITERATIONS {
            return Err(Error::NonConvergence {
                iterations: outer,
                delta,
                state: Box::new(fisher),
            });
        }
    }
    unreachable!("outer loop returns on its last iteration")
}

/// Average Fisher weights under the model's current fit, and the plan they imply.
pub fn iterate_weights(
    model: &FittedModel,
    data: &Dataset,
    iteration: usize,
) -> Result<(FisherState, RegularizationPlan)> {
    let eta = model.eta_dataset(data)?;
    let weights: Vec<f64> = eta.iter().map(|&e| model.family.fisher_weight_eta(e)).collect();
    let template = match &model.params.intercept {
        Some(i) if i.order > model.params.coefficients.order => i,
        _ => &model.params.coefficients,
    };
    let cells = PopulatedCells::new(template, &data.cells)?;
    let fisher = FisherState::from_row_weights(template, &cells, &weights, iteration);
    let spec = ModelSpec {
        shape: ModelShape {
            order: model.params.coefficients.order,
            intercept_order: model.params.intercept.as_ref().map(|i| i.order),
        },
        scheme: model.reg.scheme,
        mode: model.reg.mode,
        baseline: Baseline::Zero,
        sigma2: None,
    };
    let ctr = Centers {
        coefficients: model.reg.coefficients.center.clone(),
        intercept: model.reg.intercept.as_ref().map_or(0.0, |s| s.center[0]),
    };
    let plan = build_plan(&spec, &model.params, &data.cells, &fisher, &ctr)?;
    Ok((fisher, plan))
}

/// Loss and gradient machinery shared by fitting, Laplace and evaluation.
pub(crate) struct Objective<'a> {
    data: &'a Dataset,
    xr: Vec<f64>,
    p: usize,
    family: FamilySpec,
    reg: &'a RegularizationPlan,
    coef_cells: PopulatedCells,
    int_cells: Option<PopulatedCells>,
}

impl<'a> Objective<'a> {
    pub(crate) fn new(
        data: &'a Dataset,
        params: &Params,
        family: FamilySpec,
        reg: &'a RegularizationPlan,
    ) -> Result<Self> {
        if params.coefficients.p != data.p() {
            return Err(Error::DimensionError {
                expected: params.coefficients.p,
                found: data.p(),
            });
        }
        let coef_cells = PopulatedCells::new(&params.coefficients, &data.cells)?;
        let int_cells = params
            .intercept
            .as_ref()
            .map(|i| PopulatedCells::new(i, &data.cells))
            .transpose()?;
        Ok(Objective {
            data,
            xr: data.rows_flat(),
            p: data.p(),
            family,
            reg,
            coef_cells,
            int_cells,
        })
    }

    fn slot_params(&self, params: &Params) -> (Vec<f64>, Option<Vec<f64>>) {
        let theta = self.coef_cells.materialize(&params.coefficients);
        let b = match (&self.int_cells, &params.intercept) {
            (Some(c), Some(i)) => Some(c.materialize(i)),
            _ => None,
        };
        (theta, b)
    }

    fn eta_row(&self, n: usize, theta: &[f64], b: Option<&[f64]>) -> f64 {
        let s = self.coef_cells.slot_of_row[n];
        let p = self.p;
        let mut eta = dot(&self.xr[n * p..(n + 1) * p], &theta[s * p..(s + 1) * p]);
        if let Some(b) = b {
            eta += b[s];
        }
        eta
    }

    pub(crate) fn eta(&self, params: &Params) -> Vec<f64> {
        let (theta, b) = self.slot_params(params);
        (0..self.data.n())
            .map(|n| self.eta_row(n, &theta, b.as_deref()))
            .collect()
    }

    pub(crate) fn penalty(&self, params: &Params) -> f64 {
        let mut pen = self.reg.coefficients.penalty(&params.coefficients);
        if let (Some(s), Some(i)) = (&self.reg.intercept, &params.intercept) {
            pen += s.penalty(i);
        }
        pen
    }

    /// `(Σ nll, penalty)` over all rows.
    pub(crate) fn loss_parts(&self, params: &Params) -> (f64, f64) {
        let eta = self.eta(params);
        let nll: f64 = self
            .data
            .y
            .iter()
            .zip(&eta)
            .map(|(&y, &e)| self.family.nll_unchecked(y, e))
            .sum();
        (nll, self.penalty(params))
    }

    /// Penalized loss and its gradient. With `rows`, only those rows enter,
    /// scaled to the full sample.
    pub(crate) fn loss_grad(&self, params: &Params, rows: Option<&[usize]>) -> (f64, Params) {
        let p = self.p;
        let (theta, b) = self.slot_params(params);
        let slots = self.coef_cells.len();
        let mut g_theta = vec![0.0; slots * p];
        let mut g_b = vec![0.0; slots];
        let mut nll = 0.0;
        let n = self.data.n();
        let scale = rows.map_or(1.0, |r| n as f64 / r.len() as f64);
        let mut visit = |i: usize| {
            let eta = self.eta_row(i, &theta, b.as_deref());
            let y = self.data.y[i];
            nll += self.family.nll_unchecked(y, eta);
            let r = self.family.dnll_deta(y, eta);
            let s = self.coef_cells.slot_of_row[i];
            let x = &self.xr[i * p..(i + 1) * p];
            for (g, xv) in g_theta[s * p..(s + 1) * p].iter_mut().zip(x) {
                *g += r * xv;
            }
            g_b[s] += r;
        };
        match rows {
            Some(rows) => rows.iter().for_each(|&i| visit(i)),
            None => (0..n).for_each(visit),
        }
        if scale != 1.0 {
            nll *= scale;
            g_theta.iter_mut().for_each(|g| *g *= scale);
            g_b.iter_mut().for_each(|g| *g *= scale);
        }
        let mut grad = Params {
            coefficients: zeros_like(&params.coefficients),
            intercept: params.intercept.as_ref().map(zeros_like),
        };
        self.coef_cells.scatter(&g_theta, &mut grad.coefficients);
        self.reg
            .coefficients
            .add_penalty_gradient(&params.coefficients, &mut grad.coefficients);
        if let (Some(c), Some(gi), Some(pi)) =
            (&self.int_cells, grad.intercept.as_mut(), params.intercept.as_ref())
        {
            c.scatter(&g_b, gi);
            if let Some(s) = &self.reg.intercept {
                s.add_penalty_gradient(pi, gi);
            }
        }
        (nll + self.penalty(params), grad)
    }

    /// Weighted Gram blocks per component level-combination, using the
    /// Fisher weights at `params`.
    pub(crate) fn gram_blocks(&self, params: &Params) -> GramBlocks {
        let p = self.p;
        let eta = self.eta(params);
        let slots = self.coef_cells.len();
        let mut slot_gram = vec![DMatrix::<f64>::zeros(p, p); slots];
        let mut slot_w = vec![0.0; slots];
        for (n, &e) in eta.iter().enumerate() {
            let w = self.family.fisher_weight_eta(e);
            let s = self.coef_cells.slot_of_row[n];
            let x = &self.xr[n * p..(n + 1) * p];
            let g = &mut slot_gram[s];
            for i in 0..p {
                let wi = w * x[i];
                for j in 0..=i {
                    g[(i, j)] += wi * x[j];
                }
            }
            slot_w[s] += w;
        }
        for g in &mut slot_gram {
            g.fill_upper_triangle_with_lower_triangle();
        }
        let mut coefficients: Vec<Vec<DMatrix<f64>>> = params
            .coefficients
            .components
            .iter()
            .map(|c| vec![DMatrix::zeros(p, p); c.rows()])
            .collect();
        for (slot, rows) in self.coef_cells.rows.iter().enumerate() {
            for (ci, &r) in rows.iter().enumerate() {
                coefficients[ci][r] += &slot_gram[slot];
            }
        }
        let intercept = match (&self.int_cells, &params.intercept) {
            (Some(cells), Some(ip)) => {
                let mut blocks: Vec<Vec<f64>> =
                    ip.components.iter().map(|c| vec![0.0; c.rows()]).collect();
                for (slot, rows) in cells.rows.iter().enumerate() {
                    for (ci, &r) in rows.iter().enumerate() {
                        blocks[ci][r] += slot_w[slot];
                    }
                }
                Some(blocks)
            }
            _ => None,
        };
        GramBlocks {
            coefficients,
            intercept,
        }
    }
}

fn zeros_like(d: &DecomposedParameter) -> DecomposedParameter {
    let mut z = d.clone();
    for c in &mut z.components {
        c.values.iter_mut().for_each(|v| *v = 0.0);
    }
    z
}

/// `Σ w x xᵀ` per component level-combination.
pub(crate) struct GramBlocks {
    pub coefficients: Vec<Vec<DMatrix<f64>>>,
    pub intercept: Option<Vec<Vec<f64>>>,
}

/// Adam moment state.
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    b1t: f64,
    b2t: f64,
}

impl Adam {
    pub(crate) fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            b1t: 1.0,
            b2t: 1.0,
        }
    }

    pub(crate) fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64, cfg: &FitConfig) {
        self.b1t *= cfg.beta1;
        self.b2t *= cfg.beta2;
        for i in 0..x.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - self.b1t);
            let vh = self.v[i] / (1.0 - self.b2t);
            x[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Minimizes the penalized negative log-likelihood for a fixed plan.
pub fn map_fit(
    data: &Dataset,
    lattice: &LatticeSpec,
    shape: &ModelShape,
    family: FamilySpec,
    reg: &RegularizationPlan,
    cfg: &FitConfig,
    init: Option<&Params>,
) -> Result<FittedModel> {
    shape.check(lattice.d())?;
    cfg.validate()?;
    if data.n() == 0 {
        return Err(Error::EmptyData);
    }
    for cell in &data.cells {
        lattice.check_cell(cell)?;
    }
    let mut params = match init {
        Some(p) => p.clone(),
        None => {
            let mut z = Params::zeros(lattice, data.p(), shape)?;
            // Start the global term at its prior center.
            z.coefficients.components[0]
                .values
                .copy_from_slice(&reg.coefficients.center);
            if let (Some(i), Some(s)) = (z.intercept.as_mut(), reg.intercept.as_ref()) {
                i.components[0].values[0] = s.center[0];
            }
            z
        }
    };
    if params.coefficients.levels != lattice.level_counts()
        || params.coefficients.order != shape.order
        || params.intercept.as_ref().map(|i| i.order) != shape.intercept_order
    {
        return Err(Error::ModelLatticeMismatch(
            "initial parameters do not match the lattice and truncation".into(),
        ));
    }
    reg.coefficients.check_covers(&params.coefficients)?;
    match (&reg.intercept, &params.intercept) {
        (Some(s), Some(i)) => s.check_covers(i)?,
        (None, None) => {}
        _ => {
            return Err(Error::Config(
                "regularization plan and parameters disagree on the intercept".into(),
            ))
        }
    }
    let obj = Objective::new(data, &params, family, reg)?;
    let (nll0, pen0) = obj.loss_parts(&params);
    let initial_loss = nll0 + pen0;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }

    let mut x = params.to_flat();
    let mut adam = Adam::new(x.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history: Vec<f64> = Vec::with_capacity(cfg.max_steps);
    let mut steps = 0;
    let mut converged = false;
    for step in 0..cfg.max_steps {
        let rows = match cfg.batch {
            Batch::Full => None,
            Batch::Minibatch { size } if size < data.n() => {
                let mut idx = sample(&mut rng, data.n(), size).into_vec();
                idx.sort_unstable();
                Some(idx)
            }
            Batch::Minibatch { .. } => None,
        };
        let (loss, grad) = obj.loss_grad(&params, rows.as_deref());
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let g = grad.to_flat();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step });
        }
        adam.step(&mut x, &g, cfg.learning_rate(step), cfg);
        params.set_flat(&x)?;
        steps = step + 1;
        history.push(loss);
        if cfg.batch == Batch::Full && history.len() > cfg.patience {
            let old = history[history.len() - 1 - cfg.patience];
            if ((old - loss) / loss.abs().max(1.0)).abs() < cfg.tol {
                converged = true;
                break;
            }
        }
    }
    let (nll, penalty) = obj.loss_parts(&params);
    let final_loss = nll + penalty;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step: steps });
    }
    let grams = obj.gram_blocks(&params);
    let (df, df_total) = component_df(&params, reg, &grams);
    Ok(FittedModel {
        lattice: lattice.clone(),
        feature_names: data.feature_names.clone(),
        params,
        family,
        reg: reg.clone(),
        fisher: FisherState {
            components: Vec::new(),
            wbar_global: 0.0,
            iteration: 0,
        },
        diagnostics: Diagnostics {
            initial_loss,
            final_loss,
            penalty,
            train_nll: nll,
            steps,
            converged,
            outer_iterations: 0,
            df,
            df_total,
        },
    })
}

fn component_df(params: &Params, reg: &RegularizationPlan, grams: &GramBlocks) -> (Vec<ComponentDf>, f64) {
    let mut out = Vec::new();
    for ((comp, blocks), taus) in params
        .coefficients
        .components
        .iter()
        .zip(&grams.coefficients)
        .zip(&reg.coefficients.taus)
    {
        let df: f64 = blocks
            .iter()
            .zip(taus)
            .map(|(a, &tau)| df_from_gram(a, tau))
            .sum();
        out.push(ComponentDf {
            component: comp.id.label(None),
            df,
        });
    }
    if let (Some(ip), Some(blocks), Some(scales)) =
        (&params.intercept, &grams.intercept, &reg.intercept)
    {
        for ((comp, b), taus) in ip.components.iter().zip(blocks).zip(&scales.taus) {
            let df: f64 = b
                .iter()
                .zip(taus)
                .map(|(&a, &tau)| df_from_gram(&DMatrix::from_element(1, 1, a), tau))
                .sum();
            out.push(ComponentDf {
                component: format!("intercept{}", comp.id.label(None)),
                df,
            });
        }
    }
    let total = out.iter().map(|c| c.df).sum();
    (out, total)
}

/// Penalized negative log-likelihood over all rows and its gradient,
/// flattened in [`Params::to_flat`] order.
pub fn penalized_loss_grad(
    data: &Dataset,
    params: &Params,
    family: FamilySpec,
    reg: &RegularizationPlan,
) -> Result<(f64, Vec<f64>)> {
    reg.coefficients.check_covers(&params.coefficients)?;
    if let (Some(s), Some(i)) = (&reg.intercept, &params.intercept) {
        s.check_covers(i)?;
    }
    let obj = Objective::new(data, params, family, reg)?;
    let (loss, grad) = obj.loss_grad(params, None);
    Ok((loss, grad.to_flat()))
}

/// Block-diagonal Laplace posterior covariance, one block per component
/// level-combination: `(X_αᵀŴX_α + τ⁻²I)⁻¹`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceBlocks {
    pub coefficients: Vec<Vec<DMatrix<f64>>>,
    pub intercept: Option<Vec<Vec<f64>>>,
}

pub fn laplace_covariance(model: &FittedModel, data: &Dataset) -> Result<LaplaceBlocks> {
    let obj = Objective::new(data, &model.params, model.family, &model.reg)?;
    let grams = obj.gram_blocks(&model.params);
    let p = data.p();
    let mut coefficients = Vec::with_capacity(grams.coefficients.len());
    for ((comp, blocks), taus) in model
        .params
        .coefficients
        .components
        .iter()
        .zip(grams.coefficients)
        .zip(&model.reg.coefficients.taus)
    {
        let mut out = Vec::with_capacity(blocks.len());
        for (r, (mut h, &tau)) in blocks.into_iter().zip(taus).enumerate() {
            let ridge = if tau.is_infinite() { 0.0 } else { 1.0 / (tau * tau) };
            for i in 0..p {
                h[(i, i)] += ridge;
            }
            let ch = h.cholesky().ok_or_else(|| {
                Error::NumericalError(format!(
                    "posterior precision of component {} level {r} is not positive definite",
                    comp.id.label(Some(&model.lattice.dims().iter().map(|d| d.name.clone()).collect::<Vec<_>>()))
                ))
            })?;
            out.push(ch.inverse());
        }
        coefficients.push(out);
    }
    let intercept = match (grams.intercept, &model.reg.intercept, &model.params.intercept) {
        (Some(blocks), Some(scales), Some(ip)) => {
            let mut all = Vec::with_capacity(blocks.len());
            for ((b, taus), comp) in blocks.into_iter().zip(&scales.taus).zip(&ip.components) {
                let mut out = Vec::with_capacity(b.len());
                for (r, (a, &tau)) in b.into_iter().zip(taus).enumerate() {
                    let h = a + if tau.is_infinite() { 0.0 } else { 1.0 / (tau * tau) };
                    if !(h > 0.0) {
                        return Err(Error::NumericalError(format!(
                            "posterior precision of intercept component {} level {r} is not positive",
                            comp.id.label(None)
                        )));
                    }
                    out.push(1.0 / h);
                }
                all.push(out);
            }
            Some(all)
        }
        _ => None,
    };
    Ok(LaplaceBlocks {
        coefficients,
        intercept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_data(y: Vec<f64>) -> (Dataset, LatticeSpec) {
        let n = y.len();
        let data = Dataset::new(
            vec!["1".into()],
            DMatrix::from_element(n, 1, 1.0),
            y,
            vec![CellIndex(vec![]); n],
        )
        .unwrap();
        (data, LatticeSpec::empty())
    }

    #[test]
    fn schedule_shape() {
        let cfg = FitConfig::default();
        assert!((cfg.learning_rate(0) - 0.001).abs() < 1e-15);
        assert!((cfg.learning_rate(300) - 0.02).abs() < 1e-15);
        assert!((cfg.learning_rate(2999) - 0.001).abs() < 1e-12);
        let mid = cfg.learning_rate(1650);
        assert!(mid > 0.001 && mid < 0.02);
    }

    #[test]
    fn invalid_config_lists_problems() {
        let cfg = FitConfig {
            max_steps: 0,
            warmup_fraction: 1.0,
            ..FitConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("max_steps"));
                assert!(msg.contains("warmup_fraction"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_data_rejected() {
        let (data, lattice) = ones_data(vec![]);
        let spec = ModelSpec::new(0, Scheme::Unregularized);
        assert!(matches!(
            fit_model(&data, &lattice, &spec, Family::Gaussian, &FitConfig::default(), None),
            Err(Error::EmptyData)
        ));
    }

    #[test]
    fn truncation_checked_first() {
        let (data, lattice) = ones_data(vec![1.0]);
        let spec = ModelSpec::new(1, Scheme::Unregularized);
        assert!(matches!(
            fit_model(&data, &lattice, &spec, Family::Gaussian, &FitConfig::default(), None),
            Err(Error::InvalidTruncation { order: 1, d: 0 })
        ));
    }

    #[test]
    fn laplace_scalar_variance() {
        let (data, lattice) = ones_data(vec![0.5; 40]);
        let family = FamilySpec::gaussian(1.0).unwrap();
        let mut params = Params::zeros(&lattice, 1, &ModelShape::new(0)).unwrap();
        params.coefficients.components[0].values[0] = 0.5;
        let tau = 0.2;
        let reg = RegularizationPlan {
            scheme: Scheme::Fixed { tau },
            mode: BoundMode::PerComponent,
            coefficients: TermScales {
                ids: vec![crate::decomposition::ComponentId::global()],
                taus: vec![vec![tau]],
                empty: vec![vec![false]],
                center: vec![0.0],
            },
            intercept: None,
        };
        let model = map_fit(
            &data,
            &lattice,
            &ModelShape::new(0),
            family,
            &reg,
            &FitConfig {
                max_steps: 1,
                ..FitConfig::default()
            },
            Some(&params),
        )
        .unwrap();
        let cov = laplace_covariance(&model, &data).unwrap();
        let expected = 1.0 / (40.0 + 1.0 / (tau * tau));
        assert!((cov.coefficients[0][0][(0, 0)] - expected).abs() < 1e-15);
    }
}
