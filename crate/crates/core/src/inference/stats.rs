//! Test statistics, the adjustment factors and their p-values.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::fit::FitResult;
use crate::ancillary::SampleSpaceDerivs;
use crate::error::{Error, Result};
use crate::model::Restriction;
use crate::special::{chi2_sf, normal_cdf};

/// Below this |r| the scalar adjustment is skipped.
pub const R_THRESHOLD: f64 = 1e-4;
/// Below this LR the multiparameter adjustment is skipped.
pub const LR_THRESHOLD: f64 = 1e-8;

/// Diagnostic flags attached to a test report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Flag {
    #[serde(rename = "near_zero_r")]
    NearZeroR,
    #[serde(rename = "near_zero_LR")]
    NearZeroLr,
    #[serde(rename = "nonpd_info")]
    NonpdInfo,
    #[serde(rename = "boundary_fit")]
    BoundaryFit,
    #[serde(rename = "negative_determinant")]
    NegativeDeterminant,
    #[serde(rename = "degenerate_gamma")]
    DegenerateGamma,
    #[serde(rename = "degenerate_rho")]
    DegenerateRho,
    #[serde(rename = "LR_star_floored")]
    LrStarFloored,
    #[serde(rename = "negative_LR_star2")]
    NegativeLrStar2,
    #[serde(rename = "near_zero_residual")]
    NearZeroResidual,
    #[serde(rename = "info_asymmetry")]
    InfoAsymmetry,
}

impl Flag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Flag::NearZeroR => "near_zero_r",
            Flag::NearZeroLr => "near_zero_LR",
            Flag::NonpdInfo => "nonpd_info",
            Flag::BoundaryFit => "boundary_fit",
            Flag::NegativeDeterminant => "negative_determinant",
            Flag::DegenerateGamma => "degenerate_gamma",
            Flag::DegenerateRho => "degenerate_rho",
            Flag::LrStarFloored => "LR_star_floored",
            Flag::NegativeLrStar2 => "negative_LR_star2",
            Flag::NearZeroResidual => "near_zero_residual",
            Flag::InfoAsymmetry => "info_asymmetry",
        }
    }
}

/// Alternative of the test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sided {
    /// `H0: psi = psi0` against `psi != psi0`.
    #[default]
    TwoSided,
    /// `H0: psi >= psi0` against `psi < psi0`; lower-tail p-values.
    OneSidedGeq,
    /// `H0: psi <= psi0` against `psi > psi0`; upper-tail p-values.
    OneSidedLeq,
}

impl Sided {
    /// Accepts `two`, `lower`, `upper` and the serialized names.
    pub fn parse(s: &str) -> Result<Sided> {
        match s {
            "two" | "two_sided" => Ok(Sided::TwoSided),
            "lower" | "one_sided_geq" => Ok(Sided::OneSidedGeq),
            "upper" | "one_sided_leq" => Ok(Sided::OneSidedLeq),
            other => Err(Error::Config(format!(
                "unknown sidedness '{other}' (expected two, lower or upper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub restriction: Restriction,
    pub sided: Sided,
}

impl Hypothesis {
    pub fn new(restriction: Restriction, sided: Sided) -> Result<Self> {
        if sided != Sided::TwoSided && restriction.q() != 1 {
            return Err(Error::Parameter(format!(
                "a one-sided test needs a scalar interest parameter, got q = {}",
                restriction.q()
            )));
        }
        Ok(Hypothesis { restriction, sided })
    }

    pub fn two_sided(interest: Vec<usize>, psi0: Vec<f64>, p: usize) -> Result<Self> {
        Self::new(Restriction::new(interest, psi0, p)?, Sided::TwoSided)
    }

    pub fn q(&self) -> usize {
        self.restriction.q()
    }
}

/// A correction factor with the flags raised while computing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub value: f64,
    pub flags: BTreeSet<Flag>,
}

impl Factor {
    fn unit(flag: Flag) -> Factor {
        Factor {
            value: 1.0,
            flags: BTreeSet::from([flag]),
        }
    }
}

/// `LR = 2 (l_hat - l_tilde)` clamped at zero, and `r` when `q = 1`.
pub fn lr_and_r(
    fit_hat: &FitResult,
    fit_tilde: &FitResult,
    restriction: &Restriction,
) -> Result<(f64, Option<f64>)> {
    if !fit_hat.converged || !fit_tilde.converged {
        return Err(Error::Fit("both fits must converge before testing".into()));
    }
    let lr = (2.0 * (fit_hat.loglik - fit_tilde.loglik)).max(0.0);
    let r = (restriction.q() == 1).then(|| {
        let j = restriction.interest[0];
        let diff = fit_hat.theta[j] - restriction.psi0[0];
        if diff < 0.0 {
            -lr.sqrt()
        } else {
            lr.sqrt()
        }
    });
    Ok((lr, r))
}

/// `(log |det M|, sign det M)` via LU; `None` if singular.
/// The empty matrix has determinant one.
pub fn log_abs_det(m: &DMatrix<f64>) -> Option<(f64, f64)> {
    if m.nrows() == 0 {
        return Some((0.0, 1.0));
    }
    let lu = m.clone().lu();
    let mut log = 0.0;
    let mut sign = lu.p().determinant::<f64>();
    for k in 0..m.nrows() {
        let u = lu.u()[(k, k)];
        if u == 0.0 || !u.is_finite() {
            return None;
        }
        log += u.abs().ln();
        sign *= u.signum();
    }
    Some((log, sign))
}

pub(crate) fn submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

fn det_or(m: &DMatrix<f64>, what: &str, flags: &mut BTreeSet<Flag>) -> Result<f64> {
    let (log, sign) =
        log_abs_det(m).ok_or_else(|| Error::Degenerate(format!("{what} is singular")))?;
    if sign < 0.0 {
        flags.insert(Flag::NegativeDeterminant);
    }
    Ok(log)
}

/// Solves `U'^T x = l_hat' - l_tilde'`, i.e. the row vector `Delta^T U'^{-1}`.
fn delta_times_uprime_inv(derivs: &SampleSpaceDerivs) -> Result<DVector<f64>> {
    let delta = &derivs.ell_hat_prime - &derivs.ell_tilde_prime;
    derivs
        .u_tilde_prime
        .transpose()
        .lu()
        .solve(&delta)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Degenerate("U' is singular".into()))
}

/// Shared prefix `|J_hat|^{1/2} |U'|^{-1} |J_tilde_ww|^{1/2}` in log form.
fn log_common(
    j_hat: &DMatrix<f64>,
    j_tilde: &DMatrix<f64>,
    derivs: &SampleSpaceDerivs,
    nuisance: &[usize],
    flags: &mut BTreeSet<Flag>,
) -> Result<f64> {
    let lj = det_or(j_hat, "J(theta_hat)", flags)?;
    let lu = det_or(&derivs.u_tilde_prime, "U'", flags)?;
    let ljw = det_or(&submatrix(j_tilde, nuisance), "J_ww(theta_tilde)", flags)?;
    Ok(0.5 * lj - lu + 0.5 * ljw)
}

/// Scalar adjustment factor for `r*`.
pub fn gamma_factor(
    j_hat: &DMatrix<f64>,
    j_tilde: &DMatrix<f64>,
    derivs: &SampleSpaceDerivs,
    restriction: &Restriction,
    r: f64,
) -> Result<Factor> {
    if restriction.q() != 1 {
        return Err(Error::Parameter("gamma needs a scalar interest parameter".into()));
    }
    if r.abs() < R_THRESHOLD {
        return Ok(Factor::unit(Flag::NearZeroR));
    }
    let p = j_hat.nrows();
    let mut flags = BTreeSet::new();
    let log_c = log_common(j_hat, j_tilde, derivs, &restriction.nuisance(p), &mut flags)?;
    let x = delta_times_uprime_inv(derivs)?;
    let xk = x[restriction.interest[0]];
    if xk == 0.0 || (xk > 0.0) != (r > 0.0) {
        return Err(Error::Degenerate("gamma is not positive".into()));
    }
    let value = (log_c + r.abs().ln() - xk.abs().ln()).exp();
    if !value.is_finite() || value <= 0.0 {
        return Err(Error::Degenerate("gamma is not finite".into()));
    }
    Ok(Factor { value, flags })
}

/// Multiparameter adjustment factor for `LR*` and `LR**`.
///
/// The power on `U~' J~~^{-1} U~` is `q / 2`; with that power the factor is
/// exactly one for linear Gaussian models with known scatter.
pub fn rho_factor(
    j_hat: &DMatrix<f64>,
    j_tilde: &DMatrix<f64>,
    derivs: &SampleSpaceDerivs,
    u_tilde: &DVector<f64>,
    restriction: &Restriction,
    lr: f64,
) -> Result<Factor> {
    if lr < LR_THRESHOLD {
        return Ok(Factor::unit(Flag::NearZeroLr));
    }
    let p = j_hat.nrows();
    let q = restriction.q() as f64;
    let nuisance = restriction.nuisance(p);
    let mut flags = BTreeSet::new();
    let log_c = log_common(j_hat, j_tilde, derivs, &nuisance, &mut flags)?;
    let jj = &derivs.j_doubletilde;
    let ljj = det_or(jj, "ancillary information", &mut flags)?;
    let ljjw = det_or(&submatrix(jj, &nuisance), "ancillary information (nuisance block)", &mut flags)?;
    let jj_inv_u = jj
        .clone()
        .lu()
        .solve(u_tilde)
        .ok_or_else(|| Error::Degenerate("ancillary information is singular".into()))?;
    let quad = u_tilde.dot(&jj_inv_u);
    let x = delta_times_uprime_inv(derivs)?;
    let cross = x.dot(u_tilde);
    if !(quad > 0.0) || !(cross > 0.0) {
        return Err(Error::Degenerate("rho is not positive".into()));
    }
    let log_rho = log_c - 0.5 * ljjw + 0.5 * ljj + 0.5 * q * quad.ln()
        - (0.5 * q - 1.0) * lr.ln()
        - cross.ln();
    let value = log_rho.exp();
    if !value.is_finite() || value <= 0.0 {
        return Err(Error::Degenerate("rho is not finite".into()));
    }
    Ok(Factor { value, flags })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adjusted {
    pub r_star: Option<f64>,
    pub lr_star: f64,
    pub lr_star2: f64,
    pub flags: BTreeSet<Flag>,
}

/// `r* = r - log(gamma)/r`, `LR* = LR (1 - log(rho)/LR)^2`, `LR** = LR - 2 log rho`.
///
/// `LR*` is set to zero when `1 - log(rho)/LR < 0`. `LR**` is returned raw.
pub fn adjusted_statistics(lr: f64, r: Option<f64>, gamma: f64, rho: f64) -> Adjusted {
    let mut flags = BTreeSet::new();
    let r_star = r.map(|r| if gamma == 1.0 { r } else { r - gamma.ln() / r });
    let (lr_star, lr_star2) = if rho == 1.0 {
        (lr, lr)
    } else {
        let log_rho = rho.ln();
        let inner = 1.0 - log_rho / lr;
        let lr_star = if inner < 0.0 {
            flags.insert(Flag::LrStarFloored);
            0.0
        } else {
            lr * inner * inner
        };
        (lr_star, lr - 2.0 * log_rho)
    };
    if lr_star2 < 0.0 {
        flags.insert(Flag::NegativeLrStar2);
    }
    Adjusted {
        r_star,
        lr_star,
        lr_star2,
        flags,
    }
}

/// p-value of a normal-referenced statistic.
pub fn normal_p(stat: f64, sided: Sided) -> f64 {
    match sided {
        Sided::TwoSided => (2.0 * normal_cdf(-stat.abs())).min(1.0),
        Sided::OneSidedGeq => normal_cdf(stat),
        Sided::OneSidedLeq => normal_cdf(-stat),
    }
}

/// Upper-tail chi-square p-value; negative statistics count as zero.
pub fn chi2_p(stat: f64, q: usize) -> f64 {
    chi2_sf(stat.max(0.0), q as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PValues {
    pub lr: f64,
    pub r: Option<f64>,
    pub r_star: Option<f64>,
    pub lr_star: f64,
    pub lr_star2: f64,
}

pub fn p_values(
    lr: f64,
    r: Option<f64>,
    adjusted: &Adjusted,
    q: usize,
    sided: Sided,
) -> PValues {
    PValues {
        lr: chi2_p(lr, q),
        r: r.map(|r| normal_p(r, sided)),
        r_star: adjusted.r_star.map(|r| normal_p(r, sided)),
        lr_star: chi2_p(adjusted.lr_star, q),
        lr_star2: chi2_p(adjusted.lr_star2, q),
    }
}
