//! Model evaluation: WAIC (sampled from the block Laplace posterior, or exact
//! for the conjugate Normal-Inverse-Gamma regression), generalization gaps
//! across truncation orders, and the scale-flow quantities derived from a
//! geometric decay of effect variances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::decomposition::binomial;
use crate::error::{Error, Result};
use crate::fit::{laplace_covariance, Dataset, FittedModel, Objective, Params};
use crate::special::trigamma;

pub const DEFAULT_DRAWS: usize = 1000;
pub const MIN_DRAWS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaicReport {
    /// `−Σ_n log E[f(y_n|θ)]`.
    pub lppd_term: f64,
    /// `Σ_n Var[log f(y_n|θ)]`.
    pub penalty_term: f64,
    pub total: f64,
    pub per_obs_lppd: Vec<f64>,
    pub per_obs_variance: Vec<f64>,
}

impl WaicReport {
    pub fn from_parts(per_obs_lppd: Vec<f64>, per_obs_variance: Vec<f64>) -> Self {
        let lppd_term = -per_obs_lppd.iter().sum::<f64>();
        let penalty_term = per_obs_variance.iter().sum::<f64>();
        WaicReport {
            lppd_term,
            penalty_term,
            total: lppd_term + penalty_term,
            per_obs_lppd,
            per_obs_variance,
        }
    }

    pub fn n(&self) -> usize {
        self.per_obs_lppd.len()
    }
}

/// Streaming log-mean-exp and variance of per-observation log densities.
#[derive(Clone, Debug)]
pub struct DrawAccumulator {
    count: usize,
    max: Vec<f64>,
    scaled_sum: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl DrawAccumulator {
    pub fn new(n: usize) -> Self {
        DrawAccumulator {
            count: 0,
            max: vec![f64::NEG_INFINITY; n],
            scaled_sum: vec![0.0; n],
            mean: vec![0.0; n],
            m2: vec![0.0; n],
        }
    }

    pub fn push(&mut self, loglik: &[f64]) {
        self.count += 1;
        let k = self.count as f64;
        for (i, &l) in loglik.iter().enumerate() {
            if l > self.max[i] {
                self.scaled_sum[i] = self.scaled_sum[i] * (self.max[i] - l).exp() + 1.0;
                self.max[i] = l;
            } else {
                self.scaled_sum[i] += (l - self.max[i]).exp();
            }
            let d = l - self.mean[i];
            self.mean[i] += d / k;
            self.m2[i] += d * (l - self.mean[i]);
        }
    }

    /// Unbiased variance (divisor `S − 1`).
    pub fn finish(self) -> WaicReport {
        let s = self.count as f64;
        let lppd = self
            .max
            .iter()
            .zip(&self.scaled_sum)
            .map(|(m, sum)| m + (sum / s).ln())
            .collect();
        let var = self
            .m2
            .iter()
            .map(|m2| if self.count > 1 { m2 / (s - 1.0) } else { 0.0 })
            .collect();
        WaicReport::from_parts(lppd, var)
    }
}

/// Lower Cholesky factors of the Laplace blocks, used to draw parameters.
struct BlockSampler {
    coefficients: Vec<Vec<DMatrix<f64>>>,
    intercept: Option<Vec<Vec<f64>>>,
}

impl BlockSampler {
    fn new(model: &FittedModel, data: &Dataset) -> Result<Self> {
        let cov = laplace_covariance(model, data)?;
        let mut coefficients = Vec::with_capacity(cov.coefficients.len());
        for (ci, blocks) in cov.coefficients.into_iter().enumerate() {
            let mut out = Vec::with_capacity(blocks.len());
            for (r, c) in blocks.into_iter().enumerate() {
                let l = c
                    .cholesky()
                    .ok_or_else(|| {
                        Error::NumericalError(format!(
                            "degenerate posterior covariance in component {} level {r}",
                            model.params.coefficients.components[ci].id.label(None)
                        ))
                    })?
                    .l();
                out.push(l);
            }
            coefficients.push(out);
        }
        let intercept = cov
            .intercept
            .map(|b| b.into_iter().map(|v| v.into_iter().map(f64::sqrt).collect()).collect());
        Ok(BlockSampler {
            coefficients,
            intercept,
        })
    }

    fn draw(&self, mean: &Params, out: &mut Params, rng: &mut ChaCha8Rng) {
        let p = mean.coefficients.p;
        let mut z = vec![0.0; p];
        for ((src, dst), chols) in mean
            .coefficients
            .components
            .iter()
            .zip(out.coefficients.components.iter_mut())
            .zip(&self.coefficients)
        {
            for (r, l) in chols.iter().enumerate() {
                z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                let mu = src.row(r, p);
                let row = dst.row_mut(r, p);
                for i in 0..p {
                    let mut acc = mu[i];
                    for j in 0..=i {
                        acc += l[(i, j)] * z[j];
                    }
                    row[i] = acc;
                }
            }
        }
        if let (Some(src), Some(dst), Some(sd)) =
            (&mean.intercept, out.intercept.as_mut(), &self.intercept)
        {
            for ((s, d), sds) in src.components.iter().zip(dst.components.iter_mut()).zip(sd) {
                for (r, &sdv) in sds.iter().enumerate() {
                    let zv: f64 = rng.sample(StandardNormal);
                    d.values[r] = s.values[r] + sdv * zv;
                }
            }
        }
    }
}

/// WAIC with posterior expectations estimated from `draws` samples of the
/// block-diagonal Laplace posterior.
pub fn waic(model: &FittedModel, data: &Dataset, draws: usize, seed: u64) -> Result<WaicReport> {
    if draws < MIN_DRAWS {
        return Err(Error::Config(format!(
            "WAIC needs at least {MIN_DRAWS} posterior draws, got {draws}"
        )));
    }
    if data.n() == 0 {
        return Err(Error::EmptyData);
    }
    for &y in &data.y {
        model.family.check_response(y)?;
    }
    let sampler = BlockSampler::new(model, data)?;
    let obj = Objective::new(data, &model.params, model.family, &model.reg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = DrawAccumulator::new(data.n());
    let mut theta = model.params.clone();
    let mut ll = vec![0.0; data.n()];
    for _ in 0..draws {
        sampler.draw(&model.params, &mut theta, &mut rng);
        let eta = obj.eta(&theta);
        for ((l, &y), &e) in ll.iter_mut().zip(&data.y).zip(&eta) {
            *l = -model.family.nll_unchecked(y, e);
        }
        acc.push(&ll);
    }
    let report = acc.finish();
    if !report.total.is_finite() {
        return Err(Error::NumericalError("non-finite WAIC".into()));
    }
    Ok(report)
}

/// Normal-Inverse-Gamma prior: `β | σ² ~ N(m0, σ² V0)`, `σ² ~ InvGamma(a0, b0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConjugatePrior {
    pub m0: DVector<f64>,
    pub v0: DMatrix<f64>,
    pub a0: f64,
    pub b0: f64,
}

impl ConjugatePrior {
    pub fn isotropic(p: usize, scale2: f64, a0: f64, b0: f64) -> Self {
        ConjugatePrior {
            m0: DVector::zeros(p),
            v0: DMatrix::identity(p, p) * scale2,
            a0,
            b0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConjugatePosterior {
    pub a_n: f64,
    pub b_n: f64,
    pub mean: DVector<f64>,
    /// `V_N`, so that `β | σ² ~ N(m_N, σ² V_N)`.
    pub v_n: DMatrix<f64>,
    pub leverage: Vec<f64>,
    pub residual: Vec<f64>,
}

/// Conjugate update for Gaussian linear regression.
pub fn nig_posterior(x: &DMatrix<f64>, y: &[f64], prior: &ConjugatePrior) -> Result<ConjugatePosterior> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::DimensionError {
            expected: n,
            found: y.len(),
        });
    }
    if prior.m0.len() != p || prior.v0.shape() != (p, p) {
        return Err(Error::DimensionError {
            expected: p,
            found: prior.m0.len(),
        });
    }
    if !(prior.a0 > 0.0 && prior.b0 > 0.0) {
        return Err(Error::Config("inverse-gamma prior needs a0, b0 > 0".into()));
    }
    let v0_inv = prior
        .v0
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NumericalError("prior covariance is not positive definite".into()))?
        .inverse();
    let yv = DVector::from_column_slice(y);
    let precision = x.transpose() * x + &v0_inv;
    let ch = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NumericalError("posterior precision is not positive definite".into()))?;
    let v_n = ch.inverse();
    let rhs = x.transpose() * &yv + &v0_inv * &prior.m0;
    let mean = ch.solve(&rhs);
    let a_n = prior.a0 + n as f64 / 2.0;
    let quad = yv.dot(&yv) + prior.m0.dot(&(&v0_inv * &prior.m0)) - mean.dot(&(&precision * &mean));
    let b_n = prior.b0 + 0.5 * quad;
    if !(b_n > 0.0) {
        return Err(Error::NumericalError(format!("posterior scale b_N = {b_n}")));
    }
    let fitted = x * &mean;
    let residual = (0..n).map(|i| y[i] - fitted[i]).collect();
    let leverage = (0..n)
        .map(|i| {
            let xi = x.row(i).transpose();
            xi.dot(&(&v_n * &xi))
        })
        .collect();
    Ok(ConjugatePosterior {
        a_n,
        b_n,
        mean,
        v_n,
        leverage,
        residual,
    })
}

/// Closed-form posterior variance of each observation's log-likelihood.
pub fn waic_variance_conjugate(post: &ConjugatePosterior) -> Result<Vec<f64>> {
    if !(post.a_n > 2.0) {
        return Err(Error::InsufficientConcentration(post.a_n));
    }
    let (a, b) = (post.a_n, post.b_n);
    let psi1 = trigamma(a);
    Ok(post
        .residual
        .iter()
        .zip(&post.leverage)
        .map(|(&r, &h)| {
            let r2 = r * r;
            a * r2 * h / b + h * h / 2.0 + psi1 / 4.0 + a * r2 * r2 / (4.0 * b * b) - r2 / (2.0 * b)
        })
        .collect())
}

/// Log posterior-predictive density at a training point: Student-t with
/// `2a_N` degrees of freedom and squared scale `(b_N/a_N)(1 + h)`.
fn log_predictive(a: f64, b: f64, r: f64, h: f64) -> f64 {
    let nu = 2.0 * a;
    let scale2 = b / a * (1.0 + h);
    ln_gamma((nu + 1.0) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * (nu * std::f64::consts::PI * scale2).ln()
        - (nu + 1.0) / 2.0 * (1.0 + r * r / (nu * scale2)).ln()
}

/// Exact conjugate WAIC: closed-form log predictive densities and variances.
pub fn waic_conjugate(post: &ConjugatePosterior) -> Result<WaicReport> {
    let var = waic_variance_conjugate(post)?;
    let lppd = post
        .residual
        .iter()
        .zip(&post.leverage)
        .map(|(&r, &h)| log_predictive(post.a_n, post.b_n, r, h))
        .collect();
    Ok(WaicReport::from_parts(lppd, var))
}

/// Conjugate WAIC estimated from posterior draws.
pub fn waic_conjugate_sampled(
    post: &ConjugatePosterior,
    x: &DMatrix<f64>,
    y: &[f64],
    draws: usize,
    seed: u64,
) -> Result<WaicReport> {
    if draws < MIN_DRAWS {
        return Err(Error::Config(format!(
            "WAIC needs at least {MIN_DRAWS} posterior draws, got {draws}"
        )));
    }
    let p = x.ncols();
    let chol = post
        .v_n
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NumericalError("V_N is not positive definite".into()))?
        .l();
    let precision = Gamma::new(post.a_n, 1.0 / post.b_n)
        .map_err(|e| Error::NumericalError(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = DrawAccumulator::new(y.len());
    let mut ll = vec![0.0; y.len()];
    for _ in 0..draws {
        let sigma2 = 1.0 / precision.sample(&mut rng);
        let z = DVector::from_fn(p, |_, _| rng.sample(StandardNormal));
        let beta = &post.mean + (&chol * z) * sigma2.sqrt();
        let eta = x * beta;
        for (i, l) in ll.iter_mut().enumerate() {
            let r = y[i] - eta[i];
            *l = -0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() - r * r / (2.0 * sigma2);
        }
        acc.push(&ll);
    }
    Ok(acc.finish())
}

/// `ΔS_K = S_K − S_{K−1}` for `K ≥ 1`.
pub fn generalization_gap(scores: &[f64]) -> Vec<f64> {
    scores.windows(2).map(|w| w[1] - w[0]).collect()
}

fn check_flow(rho: f64, levels: f64) -> Result<()> {
    if !(rho > 0.0 && rho < levels) {
        return Err(Error::IllDefinedFlow { rho, levels });
    }
    Ok(())
}

/// `K* = log(N/σ²) / log(L/ρ)`, as a real number.
pub fn critical_order(n: f64, sigma2: f64, levels: f64, rho: f64) -> Result<f64> {
    check_flow(rho, levels)?;
    if !(n > 0.0 && sigma2 > 0.0) {
        return Err(Error::Config("N and σ² must be positive".into()));
    }
    Ok((n / sigma2).ln() / (levels / rho).ln())
}

/// Integers bracketing a real critical order, clamped to `[0, d]`.
pub fn order_bracket(k_star: f64, d: usize) -> (usize, usize) {
    let lo = k_star.floor().clamp(0.0, d as f64) as usize;
    let hi = k_star.ceil().clamp(0.0, d as f64) as usize;
    (lo, hi)
}

/// `SNR_K = N ρ^K / (σ² L^K)`.
pub fn snr_at_order(n: f64, rho: f64, sigma2: f64, levels: f64, k: f64) -> f64 {
    n * (rho / levels).powf(k) / sigma2
}

/// `ξ = 2 / (binom(d, K*) L^{K*} log(L/ρ))`.
pub fn correlation_length(d: usize, k_star: usize, levels: f64, rho: f64) -> Result<f64> {
    check_flow(rho, levels)?;
    if k_star > d {
        return Err(Error::InvalidTruncation { order: k_star, d });
    }
    Ok(2.0 / (binomial(d, k_star) as f64 * levels.powi(k_star as i32) * (levels / rho).ln()))
}

/// `p · Nλ² / (Nλ² + σ²)`.
pub fn replica_df(p: usize, n: usize, lambda2: f64, sigma2: f64) -> f64 {
    if lambda2.is_infinite() {
        return p as f64;
    }
    let a = n as f64 * lambda2;
    p as f64 * a / (a + sigma2)
}

/// Mean squared entry of the order-`k` tensors of a decomposition.
pub fn order_second_moment(params: &Params, k: usize) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for comp in params.coefficients.components.iter().filter(|c| c.id.order() == k) {
        sum += comp.values.iter().map(|v| v * v).sum::<f64>();
        count += comp.values.len();
    }
    if let Some(ip) = &params.intercept {
        for comp in ip.components.iter().filter(|c| c.id.order() == k) {
            sum += comp.values.iter().map(|v| v * v).sum::<f64>();
            count += comp.values.len();
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Decay-rate estimate: order-1 entry variance of the order-1 fit over the
/// order-0 entry variance of the order-0 fit. True effects have zero mean, so
/// variances are second moments about zero.
pub fn estimate_rho(fits: &[FittedModel]) -> Result<f64> {
    let f0 = fits
        .iter()
        .find(|f| f.order() == 0)
        .ok_or_else(|| Error::Config("an order-0 fit is required".into()))?;
    let f1 = fits
        .iter()
        .find(|f| f.order() == 1)
        .ok_or_else(|| Error::Config("an order-1 fit is required".into()))?;
    let v0 = order_second_moment(&f0.params, 0).unwrap_or(0.0);
    if !(v0 > 0.0) {
        return Err(Error::UndefinedRho);
    }
    let v1 = order_second_moment(&f1.params, 1).unwrap_or(0.0);
    Ok(v1 / v0)
}

/// WAIC and test loss per truncation order, with flow estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgFlowReport {
    pub orders: Vec<usize>,
    pub waic: Vec<f64>,
    pub delta: Vec<f64>,
    pub test_loss: Vec<Option<f64>>,
    pub rho_hat: Option<f64>,
    pub k_star: Option<f64>,
    pub bracket: Option<(usize, usize)>,
    pub xi: Option<f64>,
}

impl RgFlowReport {
    /// `waic[K]` for `K = 0..`; flow estimates use `n/σ²` and `levels`.
    pub fn build(
        waic: Vec<f64>,
        test_loss: Vec<Option<f64>>,
        rho_hat: Option<f64>,
        n_over_sigma2: f64,
        levels: f64,
        d: usize,
    ) -> Self {
        let delta = generalization_gap(&waic);
        let k_star = rho_hat.and_then(|r| critical_order(n_over_sigma2, 1.0, levels, r).ok());
        let bracket = k_star.map(|k| order_bracket(k, d));
        let xi = match (k_star, rho_hat) {
            (Some(k), Some(r)) => {
                correlation_length(d, k.round().clamp(0.0, d as f64) as usize, levels, r).ok()
            }
            _ => None,
        };
        RgFlowReport {
            orders: (0..waic.len()).collect(),
            waic,
            delta,
            test_loss,
            rho_hat,
            k_star,
            bracket,
            xi,
        }
    }

    /// Order reached by adding orders while the gap stays negative.
    pub fn selected_order(&self) -> usize {
        self.delta.iter().take_while(|&&d| d < 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gap_arithmetic() {
        assert_eq!(generalization_gap(&[10.0, 8.0, 9.0]), vec![-2.0, 1.0]);
        assert_eq!(generalization_gap(&[3.0; 4]), vec![0.0; 3]);
        let s = [5.0, 4.5, 4.4, 4.6];
        let sum: f64 = generalization_gap(&s).iter().sum();
        assert_relative_eq!(sum, s[3] - s[0], epsilon = 1e-15);
    }

    #[test]
    fn critical_order_values() {
        let k = critical_order(10_000.0, 1.0, 4.0, 0.3).unwrap();
        assert_relative_eq!(k, 10_000f64.ln() / (4.0f64 / 0.3).ln(), epsilon = 1e-15);
        assert!((k - 3.55).abs() < 0.01);
        assert_eq!(critical_order(2.0, 2.0, 4.0, 0.3).unwrap(), 0.0);
        assert!(matches!(
            critical_order(100.0, 1.0, 4.0, 4.0),
            Err(Error::IllDefinedFlow { .. })
        ));
        assert_relative_eq!(snr_at_order(10_000.0, 0.3, 1.0, 4.0, k), 1.0, epsilon = 1e-10);
        assert_relative_eq!(snr_at_order(10_000.0, 0.3, 1.0, 4.0, 2.0), 56.25, epsilon = 1e-10);
        assert_eq!(snr_at_order(500.0, 0.3, 2.0, 4.0, 0.0), 250.0);
        assert_eq!(order_bracket(k, 3), (3, 3));
        assert_eq!(order_bracket(k, 5), (3, 4));
    }

    #[test]
    fn correlation_length_values() {
        let xi = correlation_length(3, 2, 4.0, 0.3).unwrap();
        assert_relative_eq!(xi, 2.0 / (3.0 * 16.0 * (4.0f64 / 0.3).ln()), epsilon = 1e-15);
        assert!((xi - 0.0161).abs() < 1e-4);
        assert!(correlation_length(3, 2, 4.0, 0.01).unwrap() < xi);
        assert!(correlation_length(3, 2, 4.0, 4.5).is_err());
    }

    #[test]
    fn replica_values() {
        assert_relative_eq!(replica_df(50, 1000, 1.0 / 1000.0, 1.0), 25.0, epsilon = 1e-12);
        assert_eq!(replica_df(7, 10, f64::INFINITY, 1.0), 7.0);
    }

    #[test]
    fn conjugate_variance_special_cases() {
        let post = ConjugatePosterior {
            a_n: 10.0,
            b_n: 4.0,
            mean: DVector::zeros(1),
            v_n: DMatrix::identity(1, 1),
            leverage: vec![0.3, 0.0],
            residual: vec![0.0, 0.0],
        };
        let v = waic_variance_conjugate(&post).unwrap();
        assert_relative_eq!(v[0], 0.045 + trigamma(10.0) / 4.0, epsilon = 1e-15);
        assert_relative_eq!(v[1], trigamma(10.0) / 4.0, epsilon = 1e-15);
        let thin = ConjugatePosterior { a_n: 2.0, ..post };
        assert!(matches!(
            waic_variance_conjugate(&thin),
            Err(Error::InsufficientConcentration(_))
        ));
    }

    #[test]
    fn accumulator_matches_direct() {
        let draws = [[-1.0, -2.0], [-1.5, -0.5], [-0.2, -3.0]];
        let mut acc = DrawAccumulator::new(2);
        for d in &draws {
            acc.push(d);
        }
        let r = acc.finish();
        for i in 0..2 {
            let vals: Vec<f64> = draws.iter().map(|d| d[i]).collect();
            let lme = (vals.iter().map(|v| v.exp()).sum::<f64>() / 3.0).ln();
            let mean = vals.iter().sum::<f64>() / 3.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
            assert_relative_eq!(r.per_obs_lppd[i], lme, epsilon = 1e-14);
            assert_relative_eq!(r.per_obs_variance[i], var, epsilon = 1e-14);
        }
        assert_relative_eq!(r.total, r.lppd_term + r.penalty_term, epsilon = 1e-15);
    }
}
