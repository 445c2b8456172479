//! Density generating functions for the elliptical families.
//!
//! An elliptical law `El_q(mu, Sigma, g)` has density
//! `|Sigma|^{-1/2} g((y - mu)' Sigma^{-1} (y - mu))`. Everything downstream
//! depends on the family only through `log g` and the weights
//! `v = -2 W_g(u)`, `v_dot = -2 W_g'(u)` with `W_g = d log g / du`.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::ln_gamma;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EllipticalFamily {
    Normal,
    StudentT { nu: f64 },
    PowerExponential { lambda: f64 },
}

impl EllipticalFamily {
    pub fn normal() -> Self {
        EllipticalFamily::Normal
    }

    pub fn student_t(nu: f64) -> Result<Self> {
        let f = EllipticalFamily::StudentT { nu };
        f.validate()?;
        Ok(f)
    }

    pub fn power_exponential(lambda: f64) -> Result<Self> {
        let f = EllipticalFamily::PowerExponential { lambda };
        f.validate()?;
        Ok(f)
    }

    /// Builds a family from its config name and optional shape values.
    pub fn from_name(name: &str, nu: Option<f64>, lambda: Option<f64>) -> Result<Self> {
        match name {
            "normal" => {
                if nu.is_some() || lambda.is_some() {
                    return Err(Error::Config(
                        "the normal family takes no shape parameter".into(),
                    ));
                }
                Ok(EllipticalFamily::Normal)
            }
            "student_t" => {
                if lambda.is_some() {
                    return Err(Error::Config("student_t takes `nu`, not `lambda`".into()));
                }
                let nu = nu.ok_or_else(|| Error::Config("student_t requires `nu`".into()))?;
                Self::student_t(nu)
            }
            "power_exponential" => {
                if nu.is_some() {
                    return Err(Error::Config(
                        "power_exponential takes `lambda`, not `nu`".into(),
                    ));
                }
                let lambda = lambda
                    .ok_or_else(|| Error::Config("power_exponential requires `lambda`".into()))?;
                Self::power_exponential(lambda)
            }
            other => Err(Error::Config(format!("unknown family `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EllipticalFamily::Normal => "normal",
            EllipticalFamily::StudentT { .. } => "student_t",
            EllipticalFamily::PowerExponential { .. } => "power_exponential",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EllipticalFamily::Normal => Ok(()),
            EllipticalFamily::StudentT { nu } if nu > 0.0 && nu.is_finite() => Ok(()),
            EllipticalFamily::StudentT { nu } => {
                Err(Error::Parameter(format!("nu must be positive, got {nu}")))
            }
            EllipticalFamily::PowerExponential { lambda } if lambda > 0.0 && lambda.is_finite() => {
                Ok(())
            }
            EllipticalFamily::PowerExponential { lambda } => Err(Error::Parameter(format!(
                "lambda must be positive, got {lambda}"
            ))),
        }
    }

    /// `log g(u)` for a `q`-dimensional member of the family.
    pub fn log_g(&self, u: f64, q: usize) -> Result<f64> {
        check_args(u, q)?;
        let qf = q as f64;
        Ok(match *self {
            EllipticalFamily::Normal => -0.5 * u - 0.5 * qf * (2.0 * PI).ln(),
            EllipticalFamily::StudentT { nu } => {
                ln_gamma(0.5 * (nu + qf)) - ln_gamma(0.5 * nu) - 0.5 * qf * (PI * nu).ln()
                    - 0.5 * (nu + qf) * (u / nu).ln_1p()
            }
            EllipticalFamily::PowerExponential { lambda } => {
                lambda.ln() + ln_gamma(0.5 * qf)
                    - qf / (2.0 * lambda) * std::f64::consts::LN_2
                    - 0.5 * qf * PI.ln()
                    - 0.5 * u.powf(lambda)
                    - ln_gamma(qf / (2.0 * lambda))
            }
        })
    }

    /// The pair `(v, v_dot)` at `u`.
    pub fn weights(&self, u: f64, q: usize) -> Result<(f64, f64)> {
        check_args(u, q)?;
        let qf = q as f64;
        match *self {
            EllipticalFamily::Normal => Ok((1.0, 0.0)),
            EllipticalFamily::StudentT { nu } => {
                let denom = nu + u;
                Ok(((nu + qf) / denom, -(nu + qf) / (denom * denom)))
            }
            EllipticalFamily::PowerExponential { lambda } => {
                if lambda == 1.0 {
                    return Ok((1.0, 0.0));
                }
                if u == 0.0 {
                    return Err(Error::SingularWeight { u, lambda });
                }
                Ok((
                    lambda * u.powf(lambda - 1.0),
                    lambda * (lambda - 1.0) * u.powf(lambda - 2.0),
                ))
            }
        }
    }

    /// Whether `weights` can fail at `u = 0`.
    pub fn singular_at_origin(&self) -> bool {
        matches!(*self, EllipticalFamily::PowerExponential { lambda } if lambda != 1.0)
    }

    /// One draw from the spherical law `El_q(0, I_q)`.
    pub fn sample_spherical<R: Rng + ?Sized>(&self, q: usize, rng: &mut R) -> DVector<f64> {
        assert!(q >= 1, "dimension must be at least 1");
        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        match *self {
            EllipticalFamily::Normal => z,
            EllipticalFamily::StudentT { nu } => {
                let w: f64 = ChiSquared::new(nu).expect("validated nu").sample(rng);
                z * (nu / w).sqrt()
            }
            EllipticalFamily::PowerExponential { lambda } => {
                let norm = z.norm();
                let w: f64 = Gamma::new(q as f64 / (2.0 * lambda), 2.0)
                    .expect("validated lambda")
                    .sample(rng);
                let radius = w.powf(1.0 / (2.0 * lambda));
                z * (radius / norm)
            }
        }
    }
}

fn check_args(u: f64, q: usize) -> Result<()> {
    if q == 0 {
        return Err(Error::Domain("dimension q must be at least 1".into()));
    }
    if !(u >= 0.0) {
        return Err(Error::Domain(format!("u must be non-negative, got {u}")));
    }
    Ok(())
}
