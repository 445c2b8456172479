//! Approximate ancillary and the sample-space derivatives built on it.
//!
//! With `a_i = P_hat_i^{-1} (Y_i - mu_hat_i)` held fixed, the log-likelihood
//! becomes a function of `(theta; theta_hat, a)` through the reconstructed
//! residual `z_i = P_hat_i a_i + mu_hat_i - mu_i(theta)`. Differentiating in
//! `theta_hat` gives `l'` and `U'`; re-centering the residual on
//! `P_tilde_i a_i` gives the ancillary-based information used by the
//! multiparameter adjustment.

mod cholesky;

pub use cholesky::{cholesky_derivative, cholesky_lower};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::families::EllipticalFamily;
use crate::likelihood::{check_responses, obs_info, symmetrize, ObsWork};
use crate::model::ModelEval;

#[derive(Debug, Clone)]
pub struct AncillaryBundle {
    pub theta_hat: DVector<f64>,
    pub mu_hat: Vec<DVector<f64>>,
    pub p_hat: Vec<DMatrix<f64>>,
    pub a: Vec<DVector<f64>>,
    /// `dP_hat_i / d theta_r`, indexed `[i][r]`.
    pub p_hat_deriv: Vec<Vec<DMatrix<f64>>>,
    /// Columns `R_hat_i(r) = P_hat_i(r) a_i + d_hat_i(r)`.
    pub r_hat: Vec<DMatrix<f64>>,
}

impl AncillaryBundle {
    pub fn n_params(&self) -> usize {
        self.theta_hat.len()
    }

    /// `P_hat_i a_i + mu_hat_i`, which reproduces `Y_i`.
    pub fn reconstruct(&self, i: usize) -> DVector<f64> {
        &self.p_hat[i] * &self.a[i] + &self.mu_hat[i]
    }
}

#[derive(Debug, Clone)]
pub struct SampleSpaceDerivs {
    pub ell_hat_prime: DVector<f64>,
    pub ell_tilde_prime: DVector<f64>,
    pub u_tilde_prime: DMatrix<f64>,
    pub j_doubletilde: DMatrix<f64>,
}

/// Builds `a_i`, `P_hat_i` and every `dP_hat_i / d theta_r` at the MLE.
pub fn build_ancillary(eval_hat: &ModelEval, y: &[DVector<f64>]) -> Result<AncillaryBundle> {
    check_responses(eval_hat, y)?;
    let p = eval_hat.n_params();
    let n = eval_hat.obs.len();
    let mut bundle = AncillaryBundle {
        theta_hat: eval_hat.theta.clone(),
        mu_hat: Vec::with_capacity(n),
        p_hat: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        p_hat_deriv: Vec::with_capacity(n),
        r_hat: Vec::with_capacity(n),
    };
    for (o, yi) in eval_hat.obs.iter().zip(y) {
        let a = o
            .chol
            .solve_lower_triangular(&(yi - &o.mu))
            .ok_or(Error::Cholesky)?;
        let derivs = o
            .c
            .iter()
            .map(|c| {
                if c.iter().all(|&x| x == 0.0) {
                    Ok(DMatrix::zeros(o.dim(), o.dim()))
                } else {
                    cholesky_derivative(&o.chol, c)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut r_hat = o.d.clone();
        for r in 0..p {
            let col = &derivs[r] * &a;
            let mut dst = r_hat.column_mut(r);
            dst += col;
        }
        bundle.mu_hat.push(o.mu.clone());
        bundle.p_hat.push(o.chol.clone());
        bundle.a.push(a);
        bundle.p_hat_deriv.push(derivs);
        bundle.r_hat.push(r_hat);
    }
    Ok(bundle)
}

fn check_bundle(bundle: &AncillaryBundle, eval: &ModelEval) -> Result<()> {
    if bundle.a.len() != eval.obs.len() || bundle.n_params() != eval.n_params() {
        return Err(Error::Dimension(
            "ancillary bundle and model evaluation disagree".into(),
        ));
    }
    for (i, (a, o)) in bundle.a.iter().zip(&eval.obs).enumerate() {
        if a.len() != o.dim() {
            return Err(Error::Dimension(format!("observation {i} dimension")));
        }
    }
    Ok(())
}

/// `l'(theta; theta_hat, a)` and `U'(theta; theta_hat, a)` at the theta of
/// `eval_at`. Rows of `U'` index theta, columns index theta_hat.
pub fn sample_space_gradients(
    bundle: &AncillaryBundle,
    eval_at: &ModelEval,
    family: &EllipticalFamily,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_bundle(bundle, eval_at)?;
    let p = bundle.n_params();
    let mut ell = DVector::zeros(p);
    let mut uprime = DMatrix::zeros(p, p);
    for (i, o) in eval_at.obs.iter().enumerate() {
        let z = bundle.reconstruct(i) - &o.mu;
        let work = ObsWork::new(family, o, z)?;
        let r_hat = &bundle.r_hat[i];
        let rw = r_hat.transpose() * &work.w;
        ell -= rw * work.v;

        let si_d = &work.sigma_inv * &o.d;
        for r in 0..p {
            let a_r = o.d.column(r).dot(&work.w);
            let (cw_r, b_r) = if o.c[r].iter().all(|&x| x == 0.0) {
                (None, 0.0)
            } else {
                let cw = &o.c[r] * &work.w;
                let b = -work.w.dot(&cw);
                (Some(cw), b)
            };
            // Sigma^{-1} Q_r
            let mut siq = &work.w * (work.vdot * (2.0 * a_r - b_r)) + si_d.column(r) * work.v;
            if let Some(cw) = cw_r {
                siq += &work.sigma_inv * cw * work.v;
            }
            let row = r_hat.transpose() * siq;
            for s in 0..p {
                uprime[(r, s)] += row[s];
            }
        }
    }
    Ok((ell, uprime))
}

/// Observed information at `eval_tilde` with each residual replaced by
/// `P_tilde_i a_i`.
pub fn doubletilde_info(
    bundle: &AncillaryBundle,
    eval_tilde: &ModelEval,
    family: &EllipticalFamily,
) -> Result<DMatrix<f64>> {
    check_bundle(bundle, eval_tilde)?;
    let p = bundle.n_params();
    let mut info = DMatrix::zeros(p, p);
    for (o, a) in eval_tilde.obs.iter().zip(&bundle.a) {
        let work = ObsWork::new(family, o, &o.chol * a)?;
        obs_info(o, &work, &mut info);
    }
    symmetrize(&mut info);
    Ok(info)
}

/// `l_hat'`, `l_tilde'`, `U_tilde'` and the ancillary-based information.
pub fn sample_space_derivs(
    bundle: &AncillaryBundle,
    eval_hat: &ModelEval,
    eval_tilde: &ModelEval,
    family: &EllipticalFamily,
) -> Result<SampleSpaceDerivs> {
    let (ell_hat_prime, _) = sample_space_gradients(bundle, eval_hat, family)?;
    let (ell_tilde_prime, u_tilde_prime) = sample_space_gradients(bundle, eval_tilde, family)?;
    let j_doubletilde = doubletilde_info(bundle, eval_tilde, family)?;
    Ok(SampleSpaceDerivs {
        ell_hat_prime,
        ell_tilde_prime,
        u_tilde_prime,
        j_doubletilde,
    })
}
