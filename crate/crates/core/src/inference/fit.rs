//! Maximum likelihood fitting, unrestricted or with the interest block fixed.
//!
//! BFGS runs on a transformed scale where positive parameters are logged.
//! Once the gradient is small, Newton steps with the analytic observed
//! information polish the estimate to the score tolerance on the natural scale.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::EllipticalFamily;
use crate::likelihood::{loglik_at, score, score_info};
use crate::model::{check_theta, evaluate, ModelSpec, Restriction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Converged when `max |U_free| < score_tol * (1 + |loglik|)`.
    pub score_tol: f64,
    /// Relative parameter step below which the iteration is considered stalled.
    pub step_tol: f64,
    /// Jittered restarts after a failed attempt.
    pub restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 500,
            score_tol: 1e-8,
            step_tol: 1e-10,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: DVector<f64>,
    pub loglik: f64,
    /// Full score vector at `theta`.
    pub score: DVector<f64>,
    /// Max-norm of the score over the free parameters.
    pub score_norm: f64,
    pub info: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub restricted: bool,
    /// `sqrt(diag(J^{-1}))`; `None` if J is not positive definite.
    pub stderr: Option<DVector<f64>>,
    pub near_zero_residual: bool,
    pub boundary: bool,
}

/// Serializable view of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub param_names: Vec<String>,
    pub theta: Vec<f64>,
    pub stderr: Option<Vec<f64>>,
    pub loglik: f64,
    pub score_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub restricted: bool,
    pub info: Vec<Vec<f64>>,
}

impl FitResult {
    pub fn report(&self, param_names: Vec<String>) -> FitReport {
        FitReport {
            param_names,
            theta: self.theta.iter().copied().collect(),
            stderr: self.stderr.as_ref().map(|s| s.iter().copied().collect()),
            loglik: self.loglik,
            score_norm: self.score_norm,
            converged: self.converged,
            iterations: self.iterations,
            restricted: self.restricted,
            info: self
                .info
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

/// Maps between the free natural-scale parameters and the optimizer scale.
struct Transform {
    base: DVector<f64>,
    free: Vec<usize>,
    logged: Vec<bool>,
}

impl Transform {
    fn to_theta(&self, eta: &DVector<f64>) -> DVector<f64> {
        let mut theta = self.base.clone();
        for (k, &j) in self.free.iter().enumerate() {
            theta[j] = if self.logged[k] { eta[k].exp() } else { eta[k] };
        }
        theta
    }

    fn to_eta(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.free.len(),
            self.free.iter().enumerate().map(|(k, &j)| {
                if self.logged[k] {
                    theta[j].ln()
                } else {
                    theta[j]
                }
            }),
        )
    }
}

struct Problem<'a> {
    model: &'a dyn ModelSpec,
    family: &'a EllipticalFamily,
    y: &'a [DVector<f64>],
    tr: Transform,
}

impl Problem<'_> {
    /// Negative log-likelihood on the optimizer scale; infeasible points are +inf.
    fn value(&self, eta: &DVector<f64>) -> f64 {
        let theta = self.tr.to_theta(eta);
        match loglik_at(self.model, self.family, &theta, self.y) {
            Ok(l) if l.is_finite() => -l,
            _ => f64::INFINITY,
        }
    }

    fn gradient(&self, eta: &DVector<f64>) -> Option<DVector<f64>> {
        let theta = self.tr.to_theta(eta);
        let ev = evaluate(self.model, &theta).ok()?;
        let u = score(self.family, &ev, self.y).ok()?;
        let g = DVector::from_iterator(
            self.tr.free.len(),
            self.tr.free.iter().enumerate().map(|(k, &j)| {
                let chain = if self.tr.logged[k] { theta[j] } else { 1.0 };
                -u[j] * chain
            }),
        );
        g.iter().all(|x| x.is_finite()).then_some(g)
    }
}

struct Attempt {
    theta: DVector<f64>,
    loglik: f64,
    converged: bool,
    iterations: usize,
}

fn score_tolerance(opts: &FitOptions, loglik: f64) -> f64 {
    opts.score_tol * (1.0 + loglik.abs())
}

fn free_score_norm(u: &DVector<f64>, free: &[usize]) -> f64 {
    free.iter().map(|&j| u[j].abs()).fold(0.0, f64::max)
}

fn bfgs(prob: &Problem, eta0: DVector<f64>, opts: &FitOptions, budget: usize) -> (DVector<f64>, usize) {
    let m = eta0.len();
    let mut eta = eta0;
    let mut f = prob.value(&eta);
    let Some(mut g) = prob.gradient(&eta) else {
        return (eta, 0);
    };
    let mut h = DMatrix::<f64>::identity(m, m);
    let mut first = true;
    let mut iters = 0;
    // hand over to Newton once the gradient is this small
    let handover = |f: f64| 1e-6 * (1.0 + f.abs());

    while iters < budget {
        if g.amax() < handover(f) {
            break;
        }
        iters += 1;
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h = DMatrix::identity(m, m);
            dir = -g.clone();
            slope = -g.norm_squared();
        }
        // keep log-scale moves within a factor of e^5
        let cap = 5.0 / dir.amax().max(5.0);
        let mut alpha = cap;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &eta + &dir * alpha;
            let ft = prob.value(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, fnext)) = accepted else {
            break;
        };
        let Some(gnext) = prob.gradient(&next) else {
            break;
        };
        let s = &next - &eta;
        let yv = &gnext - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if first {
                h *= sy / yv.norm_squared();
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let rel_step = s.amax() / (1.0 + eta.amax());
        eta = next;
        let df = f - fnext;
        f = fnext;
        g = gnext;
        if rel_step < opts.step_tol && df.abs() <= 1e-15 * (1.0 + f.abs()) {
            break;
        }
    }
    (eta, iters)
}

fn newton_polish(
    prob: &Problem,
    theta0: DVector<f64>,
    opts: &FitOptions,
    budget: usize,
) -> Result<Attempt> {
    let free = &prob.tr.free;
    let mut theta = theta0;
    let mut iters = 0;
    loop {
        let ev = evaluate(prob.model, &theta)?;
        let si = score_info(prob.family, &ev, prob.y)?;
        let norm = free_score_norm(&si.score, free);
        if norm < score_tolerance(opts, si.loglik) {
            return Ok(Attempt {
                theta,
                loglik: si.loglik,
                converged: true,
                iterations: iters,
            });
        }
        if iters >= budget {
            break;
        }
        iters += 1;
        let k = free.len();
        let jff = DMatrix::from_fn(k, k, |a, b| si.info[(free[a], free[b])]);
        let uf = DVector::from_fn(k, |a, _| si.score[free[a]]);
        let Some(chol) = jff.cholesky() else {
            break;
        };
        let step = chol.solve(&uf);
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let mut trial = theta.clone();
            for (a, &j) in free.iter().enumerate() {
                trial[j] += alpha * step[a];
            }
            if check_theta(prob.model, &trial).is_ok() {
                if let Ok(lt) = loglik_at(prob.model, prob.family, &trial, prob.y) {
                    if lt >= si.loglik - 1e-12 * (1.0 + si.loglik.abs()) {
                        let rel = (alpha * step.amax()) / (1.0 + theta.amax());
                        theta = trial;
                        moved = rel >= opts.step_tol;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !moved {
            // stalled: one final check at the current point happens above
            let ev = evaluate(prob.model, &theta)?;
            let si = score_info(prob.family, &ev, prob.y)?;
            let ok = free_score_norm(&si.score, free) < score_tolerance(opts, si.loglik);
            return Ok(Attempt {
                theta,
                loglik: si.loglik,
                converged: ok,
                iterations: iters,
            });
        }
    }
    let l = loglik_at(prob.model, prob.family, &theta, prob.y)?;
    Ok(Attempt {
        theta,
        loglik: l,
        converged: false,
        iterations: iters,
    })
}

fn attempt(prob: &Problem, eta0: DVector<f64>, opts: &FitOptions) -> Result<Attempt> {
    if prob.tr.free.is_empty() {
        let theta = prob.tr.to_theta(&eta0);
        let l = loglik_at(prob.model, prob.family, &theta, prob.y)?;
        return Ok(Attempt {
            theta,
            loglik: l,
            converged: true,
            iterations: 0,
        });
    }
    if !prob.value(&eta0).is_finite() {
        return Err(Error::Fit("log-likelihood is not finite at the start".into()));
    }
    let (eta, used) = bfgs(prob, eta0, opts, opts.max_iter);
    let theta = prob.tr.to_theta(&eta);
    let mut res = newton_polish(prob, theta, opts, opts.max_iter.saturating_sub(used).max(20))?;
    res.iterations += used;
    Ok(res)
}

/// Maximizes the log-likelihood, optionally with `theta[interest] = psi0`.
pub fn fit(
    model: &dyn ModelSpec,
    family: &EllipticalFamily,
    y: &[DVector<f64>],
    restriction: Option<&Restriction>,
    start: Option<&DVector<f64>>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let p = model.n_params();
    if y.len() != model.n_obs() {
        return Err(Error::Dimension(format!(
            "{} responses for {} observations",
            y.len(),
            model.n_obs()
        )));
    }
    for (i, yi) in y.iter().enumerate() {
        if yi.len() != model.dim(i) {
            return Err(Error::Dimension(format!("response {i} has the wrong length")));
        }
    }
    if p >= model.n_obs() {
        return Err(Error::Dimension(format!(
            "need more observations than parameters (p = {p}, n = {})",
            model.n_obs()
        )));
    }
    let mut theta0 = match start {
        Some(s) => s.clone(),
        None => model
            .initial_guess(y)
            .ok_or_else(|| Error::Fit("model has no starting value; supply one".into()))?,
    };
    if theta0.len() != p {
        return Err(Error::Dimension("start vector has the wrong length".into()));
    }
    if let Some(rs) = restriction {
        if rs.interest.iter().any(|&j| j >= p) {
            return Err(Error::Parameter("interest index out of range".into()));
        }
        rs.apply(&mut theta0);
    }
    let log_scale = model.log_scale();
    let free: Vec<usize> = match restriction {
        Some(rs) => rs.nuisance(p),
        None => (0..p).collect(),
    };
    let logged: Vec<bool> = free.iter().map(|&j| log_scale[j]).collect();
    check_theta(model, &theta0).map_err(|e| Error::Fit(format!("infeasible start: {e}")))?;

    let tr = Transform {
        base: theta0.clone(),
        free: free.clone(),
        logged,
    };
    let eta0 = tr.to_eta(&theta0);
    let prob = Problem {
        model,
        family,
        y,
        tr,
    };

    let mut best: Option<Attempt> = None;
    let mut total_iters = 0;
    let mut last_err = None;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for k in 0..=opts.restarts {
        let eta_start = if k == 0 {
            eta0.clone()
        } else {
            let scale = 0.1 * k as f64;
            eta0.map(|e| e + scale * e.abs().max(1.0) * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        };
        match attempt(&prob, eta_start, opts) {
            Ok(a) => {
                total_iters += a.iterations;
                let done = a.converged;
                let better = best.as_ref().is_none_or(|b| {
                    (a.converged && !b.converged) || (a.converged == b.converged && a.loglik > b.loglik)
                });
                if better {
                    best = Some(a);
                }
                if done {
                    break;
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let best = best.ok_or_else(|| {
        Error::Fit(format!(
            "every start failed{}",
            last_err.map(|e| format!(": {e}")).unwrap_or_default()
        ))
    })?;

    let ev = evaluate(model, &best.theta)?;
    let si = score_info(family, &ev, y)?;
    let stderr = si.info.clone().cholesky().map(|c| {
        let inv = c.inverse();
        inv.diagonal().map(f64::sqrt)
    });
    let boundary = free
        .iter()
        .any(|&j| log_scale[j] && best.theta[j] < 1e-8 * theta0[j].abs());
    Ok(FitResult {
        score_norm: free_score_norm(&si.score, &free),
        theta: best.theta,
        loglik: si.loglik,
        score: si.score,
        info: si.info,
        converged: best.converged,
        iterations: total_iters,
        restricted: restriction.is_some(),
        stderr,
        near_zero_residual: !si.near_zero_residual.is_empty(),
        boundary,
    })
}

/// Restricted fit reached by moving the interest block from its unrestricted
/// estimate to `psi0` in `steps` equal stages, warm-starting each stage.
pub fn fit_along_path(
    model: &dyn ModelSpec,
    family: &EllipticalFamily,
    y: &[DVector<f64>],
    restriction: &Restriction,
    from: &DVector<f64>,
    steps: usize,
    opts: &FitOptions,
) -> Result<FitResult> {
    let p = model.n_params();
    let psi_hat: Vec<f64> = restriction.interest.iter().map(|&j| from[j]).collect();
    let mut current = from.clone();
    for k in 1..steps.max(1) {
        let t = k as f64 / steps as f64;
        let psi: Vec<f64> = psi_hat
            .iter()
            .zip(restriction.psi0.iter())
            .map(|(a, b)| a + t * (b - a))
            .collect();
        let stage = Restriction::new(restriction.interest.clone(), psi, p)?;
        let f = fit(model, family, y, Some(&stage), Some(&current), opts)?;
        if !f.converged {
            return Err(Error::Fit(format!("continuation stage {k} did not converge")));
        }
        current = f.theta;
    }
    fit(model, family, y, Some(restriction), Some(&current), opts)
}

/// Picks the converged fit with the largest log-likelihood.
pub(crate) fn best_converged(candidates: Vec<Result<FitResult>>) -> Option<FitResult> {
    candidates
        .into_iter()
        .filter_map(|c| c.ok())
        .filter(|f| f.converged)
        .fold(None, |best: Option<FitResult>, f| match best {
            Some(b) if b.loglik >= f.loglik => Some(b),
            _ => Some(f),
        })
}
