//! Gaussian conditional probability paths `z_t = a_t z₀ + b_t z₁ + s_t ε`
//! and their closed-form target velocities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PathFamily {
    Affine,
    River,
    Slp,
    Ve,
    Vp,
}

impl PathFamily {
    pub const ALL: [PathFamily; 5] = [PathFamily::Affine, PathFamily::River, PathFamily::Slp, PathFamily::Ve, PathFamily::Vp];

    pub fn as_str(self) -> &'static str {
        match self {
            PathFamily::Affine => "AFFINE",
            PathFamily::River => "RIVER",
            PathFamily::Slp => "SLP",
            PathFamily::Ve => "VE",
            PathFamily::Vp => "VP",
        }
    }

    /// Which endpoint carries the data sample.
    pub fn endpoint(self) -> Endpoint {
        match self {
            PathFamily::Affine | PathFamily::Ve | PathFamily::Vp => Endpoint::Z0IsData,
            PathFamily::River | PathFamily::Slp => Endpoint::Z1IsData,
        }
    }
}

impl fmt::Display for PathFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PathFamily {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        PathFamily::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| CoreError::Config(format!("unknown path family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endpoint {
    Z0IsData,
    Z1IsData,
}

/// How the tabulated noise column is read. `Table` treats squared entries
/// as variances and RIVER's bare `σ²` as a standard deviation; `Variance`
/// treats every entry, RIVER's included, as a variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceConvention {
    #[default]
    Table,
    Variance,
}

/// Family hyperparameters. Unused fields are ignored by a family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathParams {
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub sigma_min: Option<f64>,
    #[serde(default)]
    pub eps_min: Option<f64>,
    #[serde(default)]
    pub sigma_max: Option<f64>,
    #[serde(default)]
    pub beta_min: Option<f64>,
    #[serde(default)]
    pub beta_max: Option<f64>,
}

impl PathParams {
    pub const NONE: PathParams =
        PathParams { sigma: None, sigma_min: None, eps_min: None, sigma_max: None, beta_min: None, beta_max: None };
}

/// One path family with validated hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSchedule {
    pub family: PathFamily,
    pub params: PathParams,
    pub convention: VarianceConvention,
}

/// Mean and standard-deviation coefficients at one flow time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub a: f64,
    pub b: f64,
    pub s: f64,
}

fn need(v: Option<f64>, name: &str, family: PathFamily) -> Result<f64> {
    v.ok_or_else(|| CoreError::Path(format!("{family} requires parameter {name}")))
}

fn nonneg(v: f64, name: &str) -> Result<f64> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(CoreError::Path(format!("{name} must be finite and ≥ 0, got {v}")))
    }
}

fn positive(v: f64, name: &str) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(CoreError::Path(format!("{name} must be finite and > 0, got {v}")))
    }
}

impl PathSchedule {
    pub fn new(family: PathFamily, params: PathParams, convention: VarianceConvention) -> Result<Self> {
        let s = PathSchedule { family, params, convention };
        s.validate()?;
        Ok(s)
    }

    /// Default hyperparameters for each family.
    pub fn default_for(family: PathFamily) -> Self {
        let p = PathParams::NONE;
        let params = match family {
            PathFamily::Affine => PathParams { eps_min: Some(0.0), ..p },
            PathFamily::River => PathParams { sigma: Some(0.1), sigma_min: Some(1e-7), ..p },
            PathFamily::Slp => PathParams { sigma: Some(0.1), sigma_min: Some(0.01), ..p },
            PathFamily::Ve => PathParams { sigma_min: Some(0.01), sigma_max: Some(0.1), ..p },
            PathFamily::Vp => PathParams { beta_min: Some(0.1), beta_max: Some(20.0), ..p },
        };
        PathSchedule { family, params, convention: VarianceConvention::Table }
    }

    pub fn endpoint(&self) -> Endpoint {
        self.family.endpoint()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.family;
        let p = &self.params;
        match f {
            PathFamily::Affine => {
                let e = nonneg(need(p.eps_min, "eps_min", f)?, "eps_min")?;
                if e > 1.0 {
                    return Err(CoreError::Path(format!("eps_min must be ≤ 1, got {e}")));
                }
            }
            PathFamily::River => {
                nonneg(need(p.sigma, "sigma", f)?, "sigma")?;
                let m = nonneg(need(p.sigma_min, "sigma_min", f)?, "sigma_min")?;
                if m > 1.0 {
                    return Err(CoreError::Path(format!("sigma_min must be ≤ 1, got {m}")));
                }
            }
            PathFamily::Slp => {
                nonneg(need(p.sigma, "sigma", f)?, "sigma")?;
                nonneg(need(p.sigma_min, "sigma_min", f)?, "sigma_min")?;
            }
            PathFamily::Ve => {
                let lo = positive(need(p.sigma_min, "sigma_min", f)?, "sigma_min")?;
                let hi = positive(need(p.sigma_max, "sigma_max", f)?, "sigma_max")?;
                if lo > hi {
                    return Err(CoreError::Path(format!("sigma_min {lo} exceeds sigma_max {hi}")));
                }
            }
            PathFamily::Vp => {
                let lo = positive(need(p.beta_min, "beta_min", f)?, "beta_min")?;
                let hi = positive(need(p.beta_max, "beta_max", f)?, "beta_max")?;
                if lo > hi {
                    return Err(CoreError::Path(format!("beta_min {lo} exceeds beta_max {hi}")));
                }
            }
        }
        Ok(())
    }

    fn check_t(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(CoreError::Path(format!("flow time {t} outside [0, 1]")))
        }
    }

    fn vp_parts(&self, t: f64) -> (f64, f64, f64) {
        let (bmin, bmax) = (self.params.beta_min.unwrap(), self.params.beta_max.unwrap());
        let r = 1.0 - t;
        let big_t = bmin * r + 0.5 * (bmax - bmin) * r * r;
        let beta = bmin + r * (bmax - bmin);
        (big_t, beta, r)
    }

    /// `(a_t, b_t, s_t)` with `s_t` the standard deviation.
    pub fn coefficients(&self, t: f64) -> Result<Coefficients> {
        Self::check_t(t)?;
        self.validate()?;
        let p = &self.params;
        Ok(match self.family {
            PathFamily::Affine => {
                let e = p.eps_min.unwrap();
                Coefficients { a: t, b: 0.0, s: (1.0 - (1.0 - e) * t).abs() }
            }
            PathFamily::River => {
                let (sig, m) = (p.sigma.unwrap(), p.sigma_min.unwrap());
                let s = match self.convention {
                    VarianceConvention::Table => sig * sig,
                    VarianceConvention::Variance => sig,
                };
                Coefficients { a: 1.0 - (1.0 - m) * t, b: t, s }
            }
            PathFamily::Slp => {
                let (sig, m) = (p.sigma.unwrap(), p.sigma_min.unwrap());
                Coefficients { a: 1.0 - t, b: t, s: (m * m + sig * sig * t * (1.0 - t)).sqrt() }
            }
            PathFamily::Ve => {
                let (lo, hi) = (p.sigma_min.unwrap(), p.sigma_max.unwrap());
                Coefficients { a: 1.0, b: 0.0, s: lo * (hi / lo).powf(t) }
            }
            PathFamily::Vp => {
                let (big_t, _, _) = self.vp_parts(t);
                Coefficients { a: (-0.5 * big_t).exp(), b: 0.0, s: (1.0 - (-big_t).exp()).max(0.0).sqrt() }
            }
        })
    }

    /// Exact time derivatives `(a′, b′, s′)`; defined on the open interval.
    pub fn derivatives(&self, t: f64) -> Result<Coefficients> {
        Self::check_t(t)?;
        let c = self.coefficients(t)?;
        let p = &self.params;
        Ok(match self.family {
            PathFamily::Affine => {
                let e = p.eps_min.unwrap();
                let inner = 1.0 - (1.0 - e) * t;
                if inner == 0.0 && e < 1.0 {
                    return Err(CoreError::Domain(format!("AFFINE std derivative is undefined at t={t} (|·| kink)")));
                }
                Coefficients { a: 1.0, b: 0.0, s: -(1.0 - e) * inner.signum() }
            }
            PathFamily::River => Coefficients { a: -(1.0 - p.sigma_min.unwrap()), b: 1.0, s: 0.0 },
            PathFamily::Slp => {
                let sig = p.sigma.unwrap();
                if c.s == 0.0 {
                    return Err(CoreError::Domain(format!("SLP std derivative is singular at t={t} (zero variance)")));
                }
                Coefficients { a: -1.0, b: 1.0, s: sig * sig * (1.0 - 2.0 * t) / (2.0 * c.s) }
            }
            PathFamily::Ve => {
                let (lo, hi) = (p.sigma_min.unwrap(), p.sigma_max.unwrap());
                Coefficients { a: 0.0, b: 0.0, s: c.s * (hi / lo).ln() }
            }
            PathFamily::Vp => {
                let (big_t, beta, _) = self.vp_parts(t);
                let var = 1.0 - (-big_t).exp();
                if var <= 0.0 {
                    return Err(CoreError::Domain(format!("VP std derivative is singular at t={t} (zero variance)")));
                }
                // d/dt T(1−t) = −β(1−t)
                let a_prime = c.a * 0.5 * beta;
                let var_prime = -(-big_t).exp() * beta;
                Coefficients { a: a_prime, b: 0.0, s: var_prime / (2.0 * var.sqrt()) }
            }
        })
    }

    /// `z_t` and the conditional target `u = a′z₀ + b′z₁ + s′ε`.
    pub fn sample_conditional(&self, z0: &[f64], z1: &[f64], t: f64, eps: &[f64]) -> Result<PathPoint> {
        if z0.len() != z1.len() || z0.len() != eps.len() {
            return Err(CoreError::Shape(format!(
                "z0, z1 and ε must share a shape ({} / {} / {})",
                z0.len(),
                z1.len(),
                eps.len()
            )));
        }
        let c = self.coefficients(t)?;
        let d = self.derivatives(t)?;
        let z_t = (0..z0.len()).map(|i| c.a * z0[i] + c.b * z1[i] + c.s * eps[i]).collect();
        let u = (0..z0.len()).map(|i| d.a * z0[i] + d.b * z1[i] + d.s * eps[i]).collect();
        Ok(PathPoint { t, z_t, u_target: u })
    }

    /// `(t_start, t_end, prior_std)` for generation: integrate from
    /// `prior_std · N(0, I)` at `t_start` to the data end at `t_end`.
    ///
    /// VE keeps data near `t = 0` and reaches only `σ_max` noise at `t = 1`,
    /// so it runs backwards from an `N(0, σ_max² I)` start.
    pub fn sampling_span(&self) -> (f64, f64, f64) {
        match self.family {
            PathFamily::Ve => (1.0, 0.0, self.params.sigma_max.unwrap_or(1.0)),
            _ => (0.0, 1.0, 1.0),
        }
    }

    /// Places the data and prior draws on `(z₀, z₁)` per the endpoint convention.
    pub fn assign<'a>(&self, data: &'a [f64], prior: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        match self.endpoint() {
            Endpoint::Z0IsData => (data, prior),
            Endpoint::Z1IsData => (prior, data),
        }
    }
}

/// A point on the conditional path together with its regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct PathPoint {
    pub t: f64,
    pub z_t: Vec<f64>,
    pub u_target: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_values() {
        let r = PathSchedule::default_for(PathFamily::River);
        let c = r.coefficients(0.0).unwrap();
        assert_eq!((c.a, c.b), (1.0, 0.0));
        let d = r.derivatives(0.3).unwrap();
        assert_eq!((d.a, d.b, d.s), (-(1.0 - 1e-7), 1.0, 0.0));

        let a = PathSchedule::default_for(PathFamily::Affine);
        let c = a.coefficients(1.0).unwrap();
        assert_eq!((c.a, c.b, c.s), (1.0, 0.0, 0.0));
        assert_eq!(a.derivatives(0.5).unwrap().a, 1.0);

        let vp = PathSchedule::default_for(PathFamily::Vp);
        let c = vp.coefficients(1.0).unwrap();
        assert_eq!(c.a, 1.0);
        assert_eq!(c.s, 0.0);
        assert!(matches!(vp.derivatives(1.0), Err(CoreError::Domain(_))));
    }

    #[test]
    fn degenerate_ve_has_constant_std() {
        let p = PathParams { sigma_min: Some(0.05), sigma_max: Some(0.05), ..PathParams::NONE };
        let ve = PathSchedule::new(PathFamily::Ve, p, VarianceConvention::Table).unwrap();
        assert_eq!(ve.derivatives(0.4).unwrap().s, 0.0);
    }

    #[test]
    fn river_conventions_differ() {
        let mut r = PathSchedule::default_for(PathFamily::River);
        assert!((r.coefficients(0.5).unwrap().s - 0.01).abs() < 1e-15);
        r.convention = VarianceConvention::Variance;
        assert!((r.coefficients(0.5).unwrap().s - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let r = PathSchedule::default_for(PathFamily::River);
        assert!(r.coefficients(1.5).is_err());
        assert!(r.coefficients(-0.1).is_err());
        let bad = PathParams { sigma: Some(-1.0), sigma_min: Some(0.0), ..PathParams::NONE };
        assert!(PathSchedule::new(PathFamily::River, bad, VarianceConvention::Table).is_err());
        assert!(PathSchedule::new(PathFamily::Vp, PathParams::NONE, VarianceConvention::Table).is_err());
        assert!(r.sample_conditional(&[0.0; 3], &[0.0; 2], 0.5, &[0.0; 3]).is_err());
    }

    #[test]
    fn family_names_roundtrip() {
        for f in PathFamily::ALL {
            assert_eq!(f.as_str().parse::<PathFamily>().unwrap(), f);
            assert_eq!(f.as_str().to_lowercase().parse::<PathFamily>().unwrap(), f);
        }
    }
}
