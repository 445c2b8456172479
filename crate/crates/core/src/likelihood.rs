//! Log-likelihood, score and observed information of the elliptical model.
//!
//! For observation `i` with residual `z_i = Y_i - mu_i` and
//! `u_i = z_i' Sigma_i^{-1} z_i`, the contribution is
//! `-1/2 log|Sigma_i| + log g(u_i)`. The score and information are assembled
//! observation by observation from `v_i`, `v_dot_i` and the derivative blocks
//! of the model; `Sigma_i^{-1}` products go through the Cholesky factor.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::families::EllipticalFamily;
use crate::model::{check_theta, ModelEval, ModelSpec, ObsEval};

/// Lower clamp applied to `u` before evaluating weights that are singular at 0.
pub const U_FLOOR: f64 = 1e-12;

/// Relative raw asymmetry of J above which a warning is recorded.
pub const ASYMMETRY_WARN: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ScoreInfo {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub info: DMatrix<f64>,
    pub per_obs_u: Vec<f64>,
    pub per_obs_v: Vec<f64>,
    pub per_obs_vdot: Vec<f64>,
    /// Observations whose `u` was clamped to [`U_FLOOR`] for the weights.
    pub near_zero_residual: Vec<usize>,
    /// max |J - J'| / max |J| before symmetrization.
    pub raw_asymmetry: f64,
}

impl ScoreInfo {
    pub fn asymmetry_warning(&self) -> bool {
        self.raw_asymmetry > ASYMMETRY_WARN
    }
}

pub(crate) fn check_responses(eval: &ModelEval, y: &[DVector<f64>]) -> Result<()> {
    if y.len() != eval.obs.len() {
        return Err(Error::Dimension(format!(
            "{} responses for {} observations",
            y.len(),
            eval.obs.len()
        )));
    }
    for (i, (o, yi)) in eval.obs.iter().zip(y).enumerate() {
        if o.dim() != yi.len() {
            return Err(Error::Dimension(format!(
                "observation {i}: response has length {}, model dimension is {}",
                yi.len(),
                o.dim()
            )));
        }
    }
    Ok(())
}

/// `Sigma^{-1}` from the lower Cholesky factor, exactly symmetric.
pub(crate) fn inverse_from_chol(chol: &DMatrix<f64>) -> DMatrix<f64> {
    let q = chol.nrows();
    let linv = chol
        .solve_lower_triangular(&DMatrix::identity(q, q))
        .expect("Cholesky factor with positive diagonal");
    let inv = linv.transpose() * linv;
    (&inv + inv.transpose()) * 0.5
}

pub(crate) fn log_det_from_chol(chol: &DMatrix<f64>) -> f64 {
    2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `z' Sigma^{-1} z` via one triangular solve.
pub(crate) fn quad_form(chol: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    chol.solve_lower_triangular(z)
        .expect("Cholesky factor with positive diagonal")
        .norm_squared()
}

/// Weights at `u`, clamping `u` away from zero for families that need it.
/// The flag reports whether the clamp was used.
pub(crate) fn guarded_weights(
    family: &EllipticalFamily,
    u: f64,
    q: usize,
) -> Result<(f64, f64, bool)> {
    if family.singular_at_origin() && u < U_FLOOR {
        let (v, vd) = family.weights(U_FLOOR, q)?;
        Ok((v, vd, true))
    } else {
        let (v, vd) = family.weights(u, q)?;
        Ok((v, vd, false))
    }
}

/// Per-observation pieces shared by the score and the information matrix.
pub(crate) struct ObsWork {
    pub sigma_inv: DMatrix<f64>,
    /// `Sigma^{-1} z` for the residual `z` the work was built from
    pub w: DVector<f64>,
    pub u: f64,
    pub v: f64,
    pub vdot: f64,
    pub clamped: bool,
}

impl ObsWork {
    pub fn new(family: &EllipticalFamily, o: &ObsEval, z: DVector<f64>) -> Result<Self> {
        let sigma_inv = inverse_from_chol(&o.chol);
        let u = quad_form(&o.chol, &z).max(0.0);
        let w = &sigma_inv * &z;
        let (v, vdot, clamped) = guarded_weights(family, u, z.len())?;
        Ok(ObsWork {
            sigma_inv,
            w,
            u,
            v,
            vdot,
            clamped,
        })
    }
}

fn is_zero(m: &DMatrix<f64>) -> bool {
    m.iter().all(|&x| x == 0.0)
}

/// Score contribution `v d_r' w + <C_r, (v w w' - Sigma^{-1}) / 2>`, which is
/// the `F' H s` block product with `(2 Sigma (x) Sigma)^{-1} vec(M)` replaced
/// by `vec(Sigma^{-1} M Sigma^{-1}) / 2`.
pub(crate) fn obs_score(o: &ObsEval, work: &ObsWork, out: &mut DVector<f64>) {
    let p = o.n_params();
    let half_m = (&work.w * work.w.transpose() * work.v - &work.sigma_inv) * 0.5;
    for r in 0..p {
        let mut ur = work.v * o.d.column(r).dot(&work.w);
        if !is_zero(&o.c[r]) {
            ur += o.c[r].dot(&half_m);
        }
        out[r] += ur;
    }
}

/// Observed-information contribution of one observation for an arbitrary
/// residual vector `z` (the actual residual for `J`, the reconstructed
/// `P a` for the ancillary-based information).
///
/// Collapses the `T' Sigma^{-1} d + tr(B A) + E` terms using
/// `K_r = Sigma^{-1} C_r`, `a_r = d_r' w` and `b_r = z' A_r z = -w' C_r w`.
pub(crate) fn obs_info(o: &ObsEval, work: &ObsWork, out: &mut DMatrix<f64>) {
    let p = o.n_params();
    let q = o.dim();
    let (v, vd) = (work.v, work.vdot);
    let w = &work.w;
    let si = &work.sigma_inv;

    let sd = si * &o.d;
    let a: Vec<f64> = (0..p).map(|r| o.d.column(r).dot(w)).collect();
    let nonzero: Vec<bool> = o.c.iter().map(|c| !is_zero(c)).collect();
    let cw: Vec<DVector<f64>> = (0..p)
        .map(|r| {
            if nonzero[r] {
                &o.c[r] * w
            } else {
                DVector::zeros(q)
            }
        })
        .collect();
    let scw: Vec<DVector<f64>> = cw.iter().map(|x| si * x).collect();
    let b: Vec<f64> = cw.iter().map(|x| -w.dot(x)).collect();
    let k: Vec<Option<DMatrix<f64>>> = (0..p)
        .map(|r| nonzero[r].then(|| si * &o.c[r]))
        .collect();

    for r in 0..p {
        for s in 0..p {
            let mut j = -vd * b[r] * a[s] - vd * a[r] * b[s] + 2.0 * vd * a[r] * a[s]
                + 0.5 * vd * b[r] * b[s]
                + v * o.d.column(r).dot(&sd.column(s));
            if nonzero[r] {
                j += v * cw[r].dot(&sd.column(s));
            }
            if nonzero[s] {
                j += v * sd.column(r).dot(&cw[s]) + v * cw[r].dot(&scw[s]);
            }
            if let (Some(kr), Some(ks)) = (&k[r], &k[s]) {
                j -= 0.5 * kr.dot(&ks.transpose());
            }
            if let Some(c2) = o.c2(s, r) {
                if !is_zero(c2) {
                    j += 0.5 * (si.dot(c2) - v * w.dot(&(c2 * w)));
                }
            }
            if let Some(d2) = o.d2(s, r) {
                j -= v * w.dot(d2);
            }
            out[(r, s)] += j;
        }
    }
}

pub fn loglik(family: &EllipticalFamily, eval: &ModelEval, y: &[DVector<f64>]) -> Result<f64> {
    check_responses(eval, y)?;
    let mut total = 0.0;
    for (o, yi) in eval.obs.iter().zip(y) {
        let z = yi - &o.mu;
        let u = quad_form(&o.chol, &z);
        total += -0.5 * log_det_from_chol(&o.chol) + family.log_g(u, z.len())?;
    }
    Ok(total)
}

/// Log-likelihood from the model's mean and scatter alone (no derivatives).
pub fn loglik_at(
    model: &dyn ModelSpec,
    family: &EllipticalFamily,
    theta: &DVector<f64>,
    y: &[DVector<f64>],
) -> Result<f64> {
    check_theta(model, theta)?;
    if y.len() != model.n_obs() {
        return Err(Error::Dimension("responses do not match the model".into()));
    }
    let mut total = 0.0;
    for (i, yi) in y.iter().enumerate() {
        let sigma = model.scatter(i, theta);
        let chol = nalgebra::Cholesky::new(sigma)
            .ok_or(Error::NotPositiveDefinite { index: i })?
            .unpack();
        let z = yi - model.mean(i, theta);
        let u = quad_form(&chol, &z);
        total += -0.5 * log_det_from_chol(&chol) + family.log_g(u, z.len())?;
    }
    Ok(total)
}

pub fn score(
    family: &EllipticalFamily,
    eval: &ModelEval,
    y: &[DVector<f64>],
) -> Result<DVector<f64>> {
    check_responses(eval, y)?;
    let mut out = DVector::zeros(eval.n_params());
    for (o, yi) in eval.obs.iter().zip(y) {
        let work = ObsWork::new(family, o, yi - &o.mu)?;
        obs_score(o, &work, &mut out);
    }
    Ok(out)
}

pub fn observed_info(
    family: &EllipticalFamily,
    eval: &ModelEval,
    y: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    Ok(score_info(family, eval, y)?.info)
}

/// Symmetrizes in place and returns the relative raw asymmetry.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) -> f64 {
    let scale = m.amax();
    let asym = (&*m - m.transpose()).amax();
    let sym = (&*m + m.transpose()) * 0.5;
    *m = sym;
    if scale > 0.0 {
        asym / scale
    } else {
        0.0
    }
}

/// Log-likelihood, score, observed information and per-observation weights
/// in one pass, reduced sequentially by observation index.
pub fn score_info(
    family: &EllipticalFamily,
    eval: &ModelEval,
    y: &[DVector<f64>],
) -> Result<ScoreInfo> {
    check_responses(eval, y)?;
    let p = eval.n_params();
    let n = eval.obs.len();
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut per_obs_u = Vec::with_capacity(n);
    let mut per_obs_v = Vec::with_capacity(n);
    let mut per_obs_vdot = Vec::with_capacity(n);
    let mut near_zero_residual = Vec::new();
    for (i, (o, yi)) in eval.obs.iter().zip(y).enumerate() {
        let work = ObsWork::new(family, o, yi - &o.mu)?;
        loglik += -0.5 * log_det_from_chol(&o.chol) + family.log_g(work.u, o.dim())?;
        obs_score(o, &work, &mut score);
        obs_info(o, &work, &mut info);
        per_obs_u.push(work.u);
        per_obs_v.push(work.v);
        per_obs_vdot.push(work.vdot);
        if work.clamped {
            near_zero_residual.push(i);
        }
    }
    let raw_asymmetry = symmetrize(&mut info);
    Ok(ScoreInfo {
        loglik,
        score,
        info,
        per_obs_u,
        per_obs_v,
        per_obs_vdot,
        near_zero_residual,
        raw_asymmetry,
    })
}
