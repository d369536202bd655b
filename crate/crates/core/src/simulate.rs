//! Synthetic hierarchical data and the experiment harnesses built on it.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decomposition::DecomposedParameter;
use crate::error::{Error, Result};
use crate::evaluation::{estimate_rho, waic, RgFlowReport};
use crate::fit::{fit_model, Dataset, FitConfig, FittedModel, ModelSpec};
use crate::glm::{sigmoid, Family};
use crate::lattice::{CellIndex, LatticeSpec};
use crate::regularization::{df_eff_ridge, BoundMode, Scheme};

/// Ground truth behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub lattice: LatticeSpec,
    pub truth: DecomposedParameter,
    pub rho: f64,
    pub sigma: f64,
    pub seed: u64,
}

/// Draws a dataset whose order-`k` effects are i.i.d. `N(0, ρ^k)`.
#[allow(clippy::too_many_arguments)]
pub fn gen_hierarchical(
    d: usize,
    levels: usize,
    n: usize,
    rho: f64,
    sigma: f64,
    p: usize,
    family: Family,
    seed: u64,
) -> Result<(Dataset, SyntheticTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (data, mut truth) = gen_with_rng(d, levels, n, rho, sigma, p, family, &mut rng)?;
    truth.seed = seed;
    Ok((data, truth))
}

#[allow(clippy::too_many_arguments)]
fn gen_with_rng(
    d: usize,
    levels: usize,
    n: usize,
    rho: f64,
    sigma: f64,
    p: usize,
    family: Family,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, SyntheticTruth)> {
    if levels == 0 || p == 0 || !(rho >= 0.0) || !(sigma > 0.0) {
        return Err(Error::Config(
            "synthetic data needs L ≥ 1, p ≥ 1, ρ ≥ 0 and σ > 0".into(),
        ));
    }
    let lattice = LatticeSpec::uniform(d, levels)?;
    let mut truth = DecomposedParameter::for_lattice(&lattice, p, d)?;
    for comp in &mut truth.components {
        let sd = rho.powi(comp.id.order() as i32).sqrt();
        for v in &mut comp.values {
            let z: f64 = rng.sample(StandardNormal);
            *v = sd * z;
        }
    }
    let cells: Vec<CellIndex> = (0..n)
        .map(|_| CellIndex((0..d).map(|_| rng.random_range(0..levels)).collect()))
        .collect();
    let x = DMatrix::from_fn(n, p, |_, j| {
        if j == 0 {
            1.0
        } else {
            rng.sample(StandardNormal)
        }
    });
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut y = Vec::with_capacity(n);
    for (i, cell) in cells.iter().enumerate() {
        let theta = truth.materialize_cell_params(cell)?;
        let eta: f64 = (0..p).map(|j| theta[j] * x[(i, j)]).sum();
        let yi = match family {
            Family::Gaussian => eta + noise.sample(rng),
            Family::BernoulliLogit => {
                let b = Bernoulli::new(sigmoid(eta)).map_err(|e| Error::NumericalError(e.to_string()))?;
                if b.sample(rng) {
                    1.0
                } else {
                    0.0
                }
            }
            Family::PoissonLog => {
                let mu = eta.exp();
                if mu > 0.0 {
                    Poisson::new(mu)
                        .map_err(|e| Error::NumericalError(e.to_string()))?
                        .sample(rng)
                } else {
                    0.0
                }
            }
        };
        y.push(yi);
    }
    let names = (0..p)
        .map(|j| if j == 0 { "intercept".to_string() } else { format!("x{j}") })
        .collect();
    let data = Dataset::new(names, x, y, cells)?;
    Ok((
        data,
        SyntheticTruth {
            lattice,
            truth,
            rho,
            sigma,
            seed: 0,
        },
    ))
}

/// Generator for replication `rep` of a run seeded with `seed`.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// Disjoint, exhaustive random split into train and test row indices.
pub fn train_test_split(n: usize, train_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n.max(1));
    let mut train = idx[..n_train.min(n)].to_vec();
    let mut test = idx[n_train.min(n)..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).unwrap_or_default();
    hex::encode(Sha256::digest(&json))
}

/// Shared settings of the synthetic experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub d: usize,
    pub levels: usize,
    pub n: usize,
    pub rho: f64,
    pub sigma: f64,
    pub p: usize,
    pub family: Family,
    pub train_fraction: f64,
    /// Highest truncation order fitted.
    pub max_order: usize,
    pub mode: BoundMode,
    pub waic_draws: usize,
    pub fit: FitConfig,
    pub schemes: Vec<Scheme>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            d: 3,
            levels: 4,
            n: 10_000,
            rho: 0.3,
            sigma: 1.0,
            p: 1,
            family: Family::Gaussian,
            train_fraction: 0.8,
            max_order: 2,
            mode: BoundMode::PerComponent,
            waic_draws: 1000,
            fit: FitConfig::default(),
            schemes: default_schemes(),
        }
    }
}

/// Unregularized, fixed `τ = 1`, decay `τ^(k) = 5·0.9^k`, generalization-preserving.
pub fn default_schemes() -> Vec<Scheme> {
    vec![
        Scheme::Unregularized,
        Scheme::Fixed { tau: 1.0 },
        Scheme::Decay {
            scale: 5.0,
            rate: 0.9,
        },
        Scheme::GeneralizationPreserving,
    ]
}

impl SimConfig {
    pub fn validate(&self, replications: usize) -> Result<()> {
        let mut problems = Vec::new();
        if replications == 0 {
            problems.push("replications must be positive".to_string());
        }
        if self.max_order > self.d {
            return Err(Error::InvalidTruncation {
                order: self.max_order,
                d: self.d,
            });
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            problems.push(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if self.n < 2 {
            problems.push("n must be at least 2".to_string());
        }
        if let Err(e) = self.fit.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn replicate(&self, seed: u64, rep: usize) -> Result<(Dataset, Dataset)> {
        let mut rng = replication_rng(seed, rep);
        let (data, _) = gen_with_rng(
            self.d,
            self.levels,
            self.n,
            self.rho,
            self.sigma,
            self.p,
            self.family,
            &mut rng,
        )?;
        let (train, test) = train_test_split(data.n(), self.train_fraction, &mut rng);
        Ok((data.select(&train), data.select(&test)))
    }

    fn fit(&self, train: &Dataset, order: usize, scheme: Scheme, rep: usize) -> Result<FittedModel> {
        let mut spec = ModelSpec::new(order, scheme);
        spec.mode = self.mode;
        let cfg = FitConfig {
            seed: self.fit.seed.wrapping_add(rep as u64),
            ..self.fit.clone()
        };
        let lattice = LatticeSpec::uniform(self.d, self.levels)?;
        fit_model(train, &lattice, &spec, self.family, &cfg, None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scheme: String,
    pub order: usize,
    pub replication: usize,
    /// Mean test log-likelihood per observation.
    pub test_ll: f64,
    /// `test_ll` minus the unregularized fit's at the same order and replication.
    pub improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub scheme: String,
    pub order: usize,
    pub mean_test_ll: f64,
    pub mean_improvement: f64,
    pub stderr_improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seed: u64,
    pub config_hash: String,
    pub replications: usize,
    pub rows: Vec<ComparisonRow>,
    pub summary: Vec<ComparisonSummary>,
}

impl ComparisonTable {
    pub fn summary_for(&self, scheme: &Scheme, order: usize) -> Option<&ComparisonSummary> {
        let name = scheme.name();
        self.summary.iter().find(|s| s.scheme == name && s.order == order)
    }
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Fits every scheme at orders `0..=max_order` per replication and compares
/// held-out log-likelihood against the unregularized fit.
pub fn run_regularization_comparison(
    cfg: &SimConfig,
    replications: usize,
    seed: u64,
) -> Result<ComparisonTable> {
    cfg.validate(replications)?;
    let mut rows = Vec::new();
    for rep in 0..replications {
        let (train, test) = cfg.replicate(seed, rep)?;
        for order in 0..=cfg.max_order {
            let base = cfg.fit(&train, order, Scheme::Unregularized, rep)?;
            let base_ll = -base.mean_nll(&test)?;
            for scheme in &cfg.schemes {
                let test_ll = if *scheme == Scheme::Unregularized {
                    base_ll
                } else {
                    -cfg.fit(&train, order, *scheme, rep)?.mean_nll(&test)?
                };
                rows.push(ComparisonRow {
                    scheme: scheme.name(),
                    order,
                    replication: rep,
                    test_ll,
                    improvement: test_ll - base_ll,
                });
            }
        }
        log::info!("regularization comparison: replication {} of {replications} done", rep + 1);
    }
    let mut summary = Vec::new();
    for scheme in &cfg.schemes {
        for order in 0..=cfg.max_order {
            let sel: Vec<&ComparisonRow> = rows
                .iter()
                .filter(|r| r.scheme == scheme.name() && r.order == order)
                .collect();
            let ll: Vec<f64> = sel.iter().map(|r| r.test_ll).collect();
            let imp: Vec<f64> = sel.iter().map(|r| r.improvement).collect();
            let (mean_improvement, stderr_improvement) = mean_stderr(&imp);
            summary.push(ComparisonSummary {
                scheme: scheme.name(),
                order,
                mean_test_ll: mean_stderr(&ll).0,
                mean_improvement,
                stderr_improvement,
            });
        }
    }
    Ok(ComparisonTable {
        seed,
        config_hash: config_hash(cfg),
        replications,
        rows,
        summary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgFlowAggregate {
    pub seed: u64,
    pub config_hash: String,
    pub reports: Vec<RgFlowReport>,
    pub mean_waic: Vec<f64>,
    pub mean_delta: Vec<f64>,
    pub mean_test_loss: Vec<f64>,
    /// Fraction of replications with `ΔS_K < 0`, for `K = 1..`.
    pub frac_delta_negative: Vec<f64>,
    /// Fraction of replications whose test loss strictly decreases in `K`.
    pub frac_test_monotone: f64,
    /// Fraction of replications whose test-loss argmin lies in the `K*` bracket.
    pub frac_bracket_hit: f64,
}

/// Fits generalization-preserving models at `K = 0..=max_order` per
/// replication and records WAIC, gaps, held-out loss and flow estimates.
pub fn run_rg_flow(cfg: &SimConfig, replications: usize, seed: u64) -> Result<RgFlowAggregate> {
    cfg.validate(replications)?;
    let kmax = cfg.max_order;
    let mut reports = Vec::with_capacity(replications);
    for rep in 0..replications {
        let (train, test) = cfg.replicate(seed, rep)?;
        let mut fits = Vec::with_capacity(kmax + 1);
        let mut scores = Vec::with_capacity(kmax + 1);
        let mut losses = Vec::with_capacity(kmax + 1);
        for order in 0..=kmax {
            let model = cfg.fit(&train, order, Scheme::GeneralizationPreserving, rep)?;
            let w = waic(&model, &train, cfg.waic_draws, seed ^ ((rep as u64) << 8 | order as u64))?;
            scores.push(w.total);
            losses.push(Some(model.mean_nll(&test)?));
            fits.push(model);
        }
        let rho_hat = if kmax >= 1 {
            match estimate_rho(&fits) {
                Ok(r) => Some(r),
                Err(Error::UndefinedRho) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let top = &fits[kmax];
        let sigma2 = residual_variance(top, &train)?;
        let report = RgFlowReport::build(
            scores,
            losses,
            rho_hat,
            train.n() as f64 / sigma2,
            cfg.levels as f64,
            cfg.d,
        );
        reports.push(report);
        log::info!("flow: replication {} of {replications} done", rep + 1);
    }
    let n = reports.len() as f64;
    let mean_of = |f: &dyn Fn(&RgFlowReport) -> Vec<f64>| -> Vec<f64> {
        let mut acc = vec![0.0; f(&reports[0]).len()];
        for r in &reports {
            for (a, v) in acc.iter_mut().zip(f(r)) {
                *a += v / n;
            }
        }
        acc
    };
    let mean_waic = mean_of(&|r| r.waic.clone());
    let mean_delta = mean_of(&|r| r.delta.clone());
    let mean_test_loss = mean_of(&|r| r.test_loss.iter().map(|l| l.unwrap_or(f64::NAN)).collect());
    let frac_delta_negative = mean_of(&|r| r.delta.iter().map(|&d| f64::from(u8::from(d < 0.0))).collect());
    let frac_test_monotone = reports
        .iter()
        .filter(|r| {
            r.test_loss
                .windows(2)
                .all(|w| matches!((w[0], w[1]), (Some(a), Some(b)) if b < a))
        })
        .count() as f64
        / n;
    let frac_bracket_hit = reports
        .iter()
        .filter(|r| {
            let argmin = r
                .test_loss
                .iter()
                .enumerate()
                .filter_map(|(k, l)| l.map(|l| (k, l)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            match (r.bracket, argmin) {
                (Some((lo, hi)), Some(k)) => k >= lo.min(kmax) && k <= hi.min(kmax),
                _ => false,
            }
        })
        .count() as f64
        / n;
    Ok(RgFlowAggregate {
        seed,
        config_hash: config_hash(cfg),
        reports,
        mean_waic,
        mean_delta,
        mean_test_loss,
        frac_delta_negative,
        frac_test_monotone,
        frac_bracket_hit,
    })
}

/// Mean squared training residual on the response scale.
pub fn residual_variance(model: &FittedModel, data: &Dataset) -> Result<f64> {
    let eta = model.eta_dataset(data)?;
    let ss: f64 = data
        .y
        .iter()
        .zip(&eta)
        .map(|(&y, &e)| (y - model.family.mean(e)).powi(2))
        .sum();
    Ok(ss / data.n().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaCheck {
    pub eq24: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub gamma: f64,
    /// Set when `p/N` is close enough to 1 that the asymptotic result is unreliable.
    pub near_critical: bool,
    pub seed: u64,
}

/// Ratio `p/N` above which the replica check warns.
pub const REPLICA_WARN_GAMMA: f64 = 0.5;

/// Monte Carlo mean of the ridge df over designs with i.i.d. `N(0, 1/N)`
/// entries, against `p·Nλ²/(Nλ² + σ²)`. The prior variance is `τ² = Nλ²`,
/// which makes `E[XᵀX] = I` consistent with the unit-scale design the
/// closed form assumes.
pub fn run_replica_check(
    p: usize,
    n: usize,
    lambda2: f64,
    sigma2: f64,
    draws: usize,
    seed: u64,
) -> Result<ReplicaCheck> {
    if n <= p || p == 0 {
        return Err(Error::Config(format!("replica check needs N > p ≥ 1, got N = {n}, p = {p}")));
    }
    if draws < 2 || !(lambda2 > 0.0) || !(sigma2 > 0.0) {
        return Err(Error::Config(
            "replica check needs ≥ 2 draws and positive λ², σ²".into(),
        ));
    }
    let gamma = p as f64 / n as f64;
    let near_critical = gamma > REPLICA_WARN_GAMMA;
    if near_critical {
        log::warn!("p/N = {gamma:.3} is close to 1; the asymptotic df formula is unreliable here");
    }
    let tau = (n as f64 * lambda2).sqrt();
    let w = vec![1.0 / sigma2; n];
    let sd = (1.0 / n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dfs = Vec::with_capacity(draws);
    for _ in 0..draws {
        let x = DMatrix::from_fn(n, p, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
        dfs.push(df_eff_ridge(&x, &w, tau)?);
    }
    let (mc_mean, mc_stderr) = mean_stderr(&dfs);
    Ok(ReplicaCheck {
        eq24: crate::evaluation::replica_df(p, n, lambda2, sigma2),
        mc_mean,
        mc_stderr,
        gamma,
        near_critical,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_decay_has_no_structure() {
        let (_, truth) = gen_hierarchical(3, 4, 100, 0.0, 1.0, 1, Family::Gaussian, 7).unwrap();
        for comp in &truth.truth.components {
            if comp.id.order() > 0 {
                assert!(comp.values.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = gen_hierarchical(2, 3, 200, 0.3, 1.0, 2, Family::BernoulliLogit, 11).unwrap();
        let b = gen_hierarchical(2, 3, 200, 0.3, 1.0, 2, Family::BernoulliLogit, 11).unwrap();
        assert_eq!(a, b);
        let c = gen_hierarchical(2, 3, 200, 0.3, 1.0, 2, Family::BernoulliLogit, 12).unwrap();
        assert_ne!(a.0.y, c.0.y);
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let mut rng = replication_rng(3, 1);
        let (train, test) = train_test_split(101, 0.8, &mut rng);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!(train.len(), 81);
    }

    #[test]
    fn replica_limits() {
        let r = run_replica_check(5, 200, 1e12, 1.0, 5, 1).unwrap();
        assert!((r.eq24 - 5.0).abs() < 1e-6);
        assert!((r.mc_mean - 5.0).abs() < 1e-6);
        let warn = run_replica_check(40, 60, 1.0, 1.0, 2, 1).unwrap();
        assert!(warn.near_critical);
        assert!(run_replica_check(5, 5, 1.0, 1.0, 3, 1).is_err());
    }

    #[test]
    fn config_hash_is_stable() {
        let a = config_hash(&SimConfig::default());
        assert_eq!(a, config_hash(&SimConfig::default()));
        let other = SimConfig {
            rho: 0.0,
            ..SimConfig::default()
        };
        assert_ne!(a, config_hash(&other));
    }
}
