//! Fitting, likelihood ratio statistics and their higher-order adjustments.

mod fit;
mod stats;

pub use fit::{fit, fit_along_path, FitOptions, FitReport, FitResult};
pub use stats::{
    adjusted_statistics, chi2_p, gamma_factor, log_abs_det, lr_and_r, normal_p, p_values,
    rho_factor, Adjusted, Factor, Flag, Hypothesis, PValues, Sided, LR_THRESHOLD, R_THRESHOLD,
};

use std::collections::BTreeSet;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::ancillary::{build_ancillary, sample_space_derivs};
use crate::error::{Error, Result};
use crate::families::EllipticalFamily;
use crate::model::{evaluate, ModelSpec};

/// Everything a single hypothesis test produces.
///
/// `r`, `gamma`, `r_star`, `p_r` and `p_r_star` are present only for a
/// scalar interest parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub hypothesis: Sided,
    pub interest: Vec<usize>,
    pub interest_names: Vec<String>,
    pub psi0: Vec<f64>,
    #[serde(rename = "LR")]
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_star: Option<f64>,
    #[serde(rename = "LR_star")]
    pub lr_star: f64,
    #[serde(rename = "LR_star2")]
    pub lr_star2: f64,
    #[serde(rename = "p_LR")]
    pub p_lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_r_star: Option<f64>,
    #[serde(rename = "p_LR_star")]
    pub p_lr_star: f64,
    #[serde(rename = "p_LR_star2")]
    pub p_lr_star2: f64,
    pub flags: BTreeSet<Flag>,
    pub theta_hat: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    pub loglik_hat: f64,
    pub loglik_tilde: f64,
}

impl TestReport {
    pub fn has_flag(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }
}

fn fit_flags(f: &FitResult, flags: &mut BTreeSet<Flag>) {
    if f.boundary {
        flags.insert(Flag::BoundaryFit);
    }
    if f.near_zero_residual {
        flags.insert(Flag::NearZeroResidual);
    }
    if f.info.clone().cholesky().is_none() {
        flags.insert(Flag::NonpdInfo);
    }
}

/// A degenerate factor falls back to one and is flagged; other errors propagate.
fn factor_or_unit(res: Result<Factor>, on_degenerate: Flag) -> Result<Factor> {
    match res {
        Ok(f) => Ok(f),
        Err(Error::Degenerate(_)) => Ok(Factor {
            value: 1.0,
            flags: BTreeSet::from([on_degenerate]),
        }),
        Err(e) => Err(e),
    }
}

/// Builds the report from converged unrestricted and restricted fits.
pub fn report_from_fits(
    model: &dyn ModelSpec,
    family: &EllipticalFamily,
    y: &[DVector<f64>],
    hypothesis: &Hypothesis,
    fit_hat: &FitResult,
    fit_tilde: &FitResult,
) -> Result<TestReport> {
    let rs = &hypothesis.restriction;
    let (lr, r) = lr_and_r(fit_hat, fit_tilde, rs)?;
    let mut flags = BTreeSet::new();
    fit_flags(fit_hat, &mut flags);
    fit_flags(fit_tilde, &mut flags);

    let eval_hat = evaluate(model, &fit_hat.theta).map_err(|e| e.at("ancillary"))?;
    let eval_tilde = evaluate(model, &fit_tilde.theta).map_err(|e| e.at("ancillary"))?;
    let bundle = build_ancillary(&eval_hat, y).map_err(|e| e.at("ancillary"))?;
    let derivs = sample_space_derivs(&bundle, &eval_hat, &eval_tilde, family)
        .map_err(|e| e.at("sample-space derivatives"))?;

    let gamma = match r {
        Some(r) => {
            let g = factor_or_unit(
                gamma_factor(&fit_hat.info, &fit_tilde.info, &derivs, rs, r),
                Flag::DegenerateGamma,
            )
            .map_err(|e| e.at("gamma"))?;
            flags.extend(g.flags);
            Some(g.value)
        }
        None => None,
    };
    let rho = factor_or_unit(
        rho_factor(&fit_hat.info, &fit_tilde.info, &derivs, &fit_tilde.score, rs, lr),
        Flag::DegenerateRho,
    )
    .map_err(|e| e.at("rho"))?;
    flags.extend(rho.flags);

    let adjusted = adjusted_statistics(lr, r, gamma.unwrap_or(1.0), rho.value);
    flags.extend(adjusted.flags.iter().copied());
    let p = p_values(lr, r, &adjusted, rs.q(), hypothesis.sided);
    let names = model.param_names();

    Ok(TestReport {
        hypothesis: hypothesis.sided,
        interest: rs.interest.clone(),
        interest_names: rs.interest.iter().map(|&j| names[j].clone()).collect(),
        psi0: rs.psi0.iter().copied().collect(),
        lr,
        r,
        gamma,
        rho: rho.value,
        r_star: adjusted.r_star,
        lr_star: adjusted.lr_star,
        lr_star2: adjusted.lr_star2,
        p_lr: p.lr,
        p_r: p.r,
        p_r_star: p.r_star,
        p_lr_star: p.lr_star,
        p_lr_star2: p.lr_star2,
        flags,
        theta_hat: fit_hat.theta.iter().copied().collect(),
        theta_tilde: fit_tilde.theta.iter().copied().collect(),
        loglik_hat: fit_hat.loglik,
        loglik_tilde: fit_tilde.loglik,
    })
}

fn no_convergence(stage: &'static str, attempt: Option<Result<FitResult>>) -> Error {
    match attempt {
        Some(Ok(f)) => Error::Fit(format!(
            "no convergence after {} iterations (score norm {:e})",
            f.iterations, f.score_norm
        ))
        .at(stage),
        Some(Err(e)) => e.at(stage),
        None => Error::Fit("no candidate start".into()).at(stage),
    }
}

/// Unrestricted and restricted fits, each the best of several starts.
///
/// The unrestricted fit starts from the model heuristic and from the
/// restricted fit of that heuristic. The restricted fit starts from the
/// unrestricted estimate with the interest block overwritten, from a
/// continuation path between the two, and from the restricted heuristic fit.
pub fn fit_pair(
    model: &dyn ModelSpec,
    family: &EllipticalFamily,
    y: &[DVector<f64>],
    restriction: &crate::model::Restriction,
    opts: &FitOptions,
) -> Result<(FitResult, FitResult)> {
    let from_heuristic = fit(model, family, y, None, None, opts);
    let tilde0 = fit(model, family, y, Some(restriction), None, opts);
    let via_null = match &tilde0 {
        Ok(t) if t.converged => Some(fit(model, family, y, None, Some(&t.theta), opts)),
        _ => None,
    };
    let fit_hat = match fit::best_converged(vec![from_heuristic.clone()].into_iter().chain(via_null).collect()) {
        Some(f) => f,
        None => return Err(no_convergence("unrestricted fit", Some(from_heuristic))),
    };

    let direct = fit(model, family, y, Some(restriction), Some(&fit_hat.theta), opts);
    let path = fit_along_path(model, family, y, restriction, &fit_hat.theta, 4, opts);
    let fit_tilde = match fit::best_converged(vec![direct.clone(), path, tilde0]) {
        Some(f) => f,
        None => return Err(no_convergence("restricted fit", Some(direct))),
    };

    // a restricted optimum above the unrestricted one means the latter is local
    if fit_tilde.loglik > fit_hat.loglik {
        let refit = fit(model, family, y, None, Some(&fit_tilde.theta), opts);
        if let Some(better) = fit::best_converged(vec![Ok(fit_hat.clone()), refit]) {
            return Ok((better, fit_tilde));
        }
    }
    Ok((fit_hat, fit_tilde))
}

/// Fits both models and assembles the full report.
pub fn run_test(
    model: &dyn ModelSpec,
    family: &EllipticalFamily,
    y: &[DVector<f64>],
    hypothesis: &Hypothesis,
    opts: &FitOptions,
) -> Result<TestReport> {
    let p = model.n_params();
    if hypothesis.restriction.interest.iter().any(|&j| j >= p) {
        return Err(Error::Parameter("interest index out of range".into()));
    }
    let (fit_hat, fit_tilde) = fit_pair(model, family, y, &hypothesis.restriction, opts)?;
    report_from_fits(model, family, y, hypothesis, &fit_hat, &fit_tilde)
}
