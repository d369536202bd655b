//! Exponential-family likelihoods with canonical links.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Gaussian,
    BernoulliLogit,
    PoissonLog,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::BernoulliLogit => "bernoulli-logit",
            Family::PoissonLog => "poisson-log",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "bernoulli-logit" => Ok(Family::BernoulliLogit),
            "poisson-log" => Ok(Family::PoissonLog),
            other => Err(Error::Config(format!("unknown family `{other}`"))),
        }
    }
}

/// Family plus dispersion `a(φ)`: `σ²` for Gaussian, 1 otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family: Family,
    pub dispersion: f64,
}

impl FamilySpec {
    pub fn gaussian(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Config(format!(
                "gaussian dispersion must be positive, got {sigma2}"
            )));
        }
        Ok(FamilySpec {
            family: Family::Gaussian,
            dispersion: sigma2,
        })
    }

    pub fn bernoulli() -> Self {
        FamilySpec {
            family: Family::BernoulliLogit,
            dispersion: 1.0,
        }
    }

    pub fn poisson() -> Self {
        FamilySpec {
            family: Family::PoissonLog,
            dispersion: 1.0,
        }
    }

    pub fn new(family: Family, sigma2: Option<f64>) -> Result<Self> {
        match family {
            Family::Gaussian => Self::gaussian(sigma2.unwrap_or(1.0)),
            Family::BernoulliLogit => Ok(Self::bernoulli()),
            Family::PoissonLog => Ok(Self::poisson()),
        }
    }

    pub fn with_dispersion(self, sigma2: f64) -> Result<Self> {
        match self.family {
            Family::Gaussian => Self::gaussian(sigma2),
            _ => Ok(self),
        }
    }

    pub fn check_response(&self, y: f64) -> Result<()> {
        let ok = match self.family {
            Family::Gaussian => y.is_finite(),
            Family::BernoulliLogit => y == 0.0 || y == 1.0,
            Family::PoissonLog => y >= 0.0 && y.is_finite() && y.fract() == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidResponse {
                family: self.family.name(),
                value: y,
            })
        }
    }

    /// Inverse link.
    pub fn mean(&self, eta: f64) -> f64 {
        match self.family {
            Family::Gaussian => eta,
            Family::BernoulliLogit => sigmoid(eta),
            Family::PoissonLog => eta.exp(),
        }
    }

    /// Link; used to center the global term at the mean response.
    pub fn link(&self, mu: f64) -> f64 {
        match self.family {
            Family::Gaussian => mu,
            Family::BernoulliLogit => {
                let m = mu.clamp(1e-6, 1.0 - 1e-6);
                (m / (1.0 - m)).ln()
            }
            Family::PoissonLog => mu.max(1e-6).ln(),
        }
    }

    /// Negative log-likelihood, validating the response.
    pub fn nll(&self, y: f64, eta: f64) -> Result<f64> {
        self.check_response(y)?;
        Ok(self.nll_unchecked(y, eta))
    }

    pub fn nll_unchecked(&self, y: f64, eta: f64) -> f64 {
        match self.family {
            Family::Gaussian => {
                let r = y - eta;
                HALF_LN_2PI + 0.5 * self.dispersion.ln() + r * r / (2.0 * self.dispersion)
            }
            Family::BernoulliLogit => softplus(eta) - y * eta,
            Family::PoissonLog => eta.exp() - y * eta + ln_gamma(y + 1.0),
        }
    }

    /// `∂nll/∂η = (μ − y)/a(φ)`.
    pub fn dnll_deta(&self, y: f64, eta: f64) -> f64 {
        (self.mean(eta) - y) / self.dispersion
    }

    /// Fisher weight `b″(η)/a(φ)` expressed in the mean.
    pub fn fisher_weight(&self, mu: f64) -> f64 {
        match self.family {
            Family::Gaussian => 1.0 / self.dispersion,
            Family::BernoulliLogit => mu * (1.0 - mu),
            Family::PoissonLog => mu,
        }
    }

    pub fn fisher_weight_eta(&self, eta: f64) -> f64 {
        self.fisher_weight(self.mean(eta))
    }
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^η)` without overflow.
pub fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

pub fn linear_predictor(theta: &[f64], x: &[f64]) -> Result<f64> {
    if theta.len() != x.len() {
        return Err(Error::DimensionError {
            expected: theta.len(),
            found: x.len(),
        });
    }
    Ok(dot(theta, x))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn worked_values() {
        let g = FamilySpec::gaussian(1.0).unwrap();
        assert_relative_eq!(g.nll(2.0, 2.0).unwrap(), 0.5 * (2.0 * std::f64::consts::PI).ln());
        let b = FamilySpec::bernoulli();
        assert_relative_eq!(b.nll(1.0, 0.0).unwrap(), std::f64::consts::LN_2);
        let p = FamilySpec::poisson();
        assert_relative_eq!(p.nll(0.0, 0.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_eq!(b.fisher_weight(0.5), 0.25);
        assert_relative_eq!(b.fisher_weight(0.1), 0.09, epsilon = 1e-15);
        assert_eq!(FamilySpec::gaussian(4.0).unwrap().fisher_weight(7.0), 0.25);
        assert_eq!(b.mean(0.0), 0.5);
        assert_eq!(g.mean(3.0), 3.0);
        assert_eq!(p.mean(0.0), 1.0);
    }

    #[test]
    fn support_checks() {
        assert!(matches!(
            FamilySpec::bernoulli().nll(0.5, 0.0),
            Err(Error::InvalidResponse { .. })
        ));
        assert!(FamilySpec::poisson().nll(-1.0, 0.0).is_err());
        assert!(FamilySpec::poisson().nll(1.5, 0.0).is_err());
        assert!(FamilySpec::gaussian(0.0).is_err());
    }

    #[test]
    fn linear_predictor_dot() {
        assert_eq!(linear_predictor(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
        assert_eq!(linear_predictor(&[0.0, 0.0], &[3.0, -1.0]).unwrap(), 0.0);
        assert!(linear_predictor(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn stable_bernoulli_matches_naive() {
        let b = FamilySpec::bernoulli();
        for i in -300..=300 {
            let eta = i as f64 * 0.1;
            for y in [0.0, 1.0] {
                let naive = (1.0 + eta.exp()).ln() - y * eta;
                assert!((b.nll_unchecked(y, eta) - naive).abs() <= 1e-12 * naive.abs().max(1.0));
            }
        }
        for eta in [-700.0, 700.0] {
            assert!(b.nll_unchecked(1.0, eta).is_finite());
            assert!(b.nll_unchecked(0.0, eta).is_finite());
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let fams = [
            FamilySpec::gaussian(1.7).unwrap(),
            FamilySpec::bernoulli(),
            FamilySpec::poisson(),
        ];
        for f in fams {
            let ys: &[f64] = match f.family {
                Family::Gaussian => &[-1.3, 0.0, 2.2],
                Family::BernoulliLogit => &[0.0, 1.0],
                Family::PoissonLog => &[0.0, 1.0, 4.0],
            };
            for &y in ys {
                for i in -8..=8 {
                    let eta = i as f64 * 0.37;
                    let h = 1e-5;
                    let fd = (f.nll_unchecked(y, eta + h) - f.nll_unchecked(y, eta - h)) / (2.0 * h);
                    let an = f.dnll_deta(y, eta);
                    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{f:?} y={y} eta={eta}");
                    let h2 = 1e-4;
                    let sd = (f.nll_unchecked(y, eta + h2) - 2.0 * f.nll_unchecked(y, eta)
                        + f.nll_unchecked(y, eta - h2))
                        / (h2 * h2);
                    let w = f.fisher_weight_eta(eta);
                    assert!((sd - w).abs() <= 1e-4 * w.max(1.0), "{f:?} y={y} eta={eta}");
                }
            }
        }
    }
}
