//! Mean vectors and scatter matrices as functions of the parameter vector.
//!
//! A model supplies, for every observation `i`, the location `mu_i(theta)` and
//! scatter `Sigma_i(theta)`. Models that know their derivatives return them
//! from [`ModelSpec::derivatives`]; everything else falls back to
//! [`fd_derivatives`].

mod linear;
mod mixed;
mod nonlinear;

pub use linear::LinearModel;
pub use mixed::{MixedModel2, MODEL2_TIMES};
pub use nonlinear::NonlinearModel1;

use nalgebra::{DMatrix, DVector};

use crate::ancillary::cholesky_lower;
use crate::error::{Error, Result};

/// One response vector with the covariate rows that belong to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: DVector<f64>,
    /// `q_i` rows, one column per named covariate. May have zero columns.
    pub covariates: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observations: Vec<Observation>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>, covariate_names: Vec<String>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Dimension("dataset has no observations".into()));
        }
        for (i, obs) in observations.iter().enumerate() {
            if obs.y.is_empty() {
                return Err(Error::Dimension(format!("observation {i} is empty")));
            }
            if obs.covariates.nrows() != obs.y.len()
                || obs.covariates.ncols() != covariate_names.len()
            {
                return Err(Error::Dimension(format!(
                    "observation {i}: covariates are {}x{}, expected {}x{}",
                    obs.covariates.nrows(),
                    obs.covariates.ncols(),
                    obs.y.len(),
                    covariate_names.len()
                )));
            }
        }
        Ok(Dataset {
            observations,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn responses(&self) -> Vec<DVector<f64>> {
        self.observations.iter().map(|o| o.y.clone()).collect()
    }

    /// Column `name` for every observation, or `None` if it is absent.
    pub fn column(&self, name: &str) -> Option<Vec<DVector<f64>>> {
        let k = self.covariate_names.iter().position(|c| c == name)?;
        Some(
            self.observations
                .iter()
                .map(|o| o.covariates.column(k).into_owned())
                .collect(),
        )
    }
}

/// Fixes the interest block `psi = theta[interest]` at `psi0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Restriction {
    pub interest: Vec<usize>,
    pub psi0: DVector<f64>,
}

impl Restriction {
    pub fn new(interest: Vec<usize>, psi0: Vec<f64>, p: usize) -> Result<Self> {
        if interest.is_empty() {
            return Err(Error::Parameter("interest block is empty".into()));
        }
        if interest.len() != psi0.len() {
            return Err(Error::Parameter(format!(
                "{} interest indices but {} hypothesized values",
                interest.len(),
                psi0.len()
            )));
        }
        for (k, &j) in interest.iter().enumerate() {
            if j >= p {
                return Err(Error::Parameter(format!(
                    "interest index {j} out of range for p = {p}"
                )));
            }
            if interest[..k].contains(&j) {
                return Err(Error::Parameter(format!("interest index {j} repeated")));
            }
        }
        Ok(Restriction {
            interest,
            psi0: DVector::from_vec(psi0),
        })
    }

    pub fn q(&self) -> usize {
        self.interest.len()
    }

    /// Indices of the nuisance block, in increasing order.
    pub fn nuisance(&self, p: usize) -> Vec<usize> {
        (0..p).filter(|j| !self.interest.contains(j)).collect()
    }

    pub fn apply(&self, theta: &mut DVector<f64>) {
        for (k, &j) in self.interest.iter().enumerate() {
            theta[j] = self.psi0[k];
        }
    }
}

/// Analytic derivative blocks for one observation.
///
/// Second-derivative blocks are stored flat with index `s * p + r`; `None`
/// means the block is identically zero.
#[derive(Debug, Clone)]
pub struct ObsDerivatives {
    pub d: DMatrix<f64>,
    pub d2: Option<Vec<DVector<f64>>>,
    pub c: Vec<DMatrix<f64>>,
    pub c2: Option<Vec<DMatrix<f64>>>,
}

/// Everything the likelihood needs about one observation at a given theta.
#[derive(Debug, Clone)]
pub struct ObsEval {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Lower Cholesky factor of `sigma`.
    pub chol: DMatrix<f64>,
    /// `d mu / d theta`, `q_i x p`.
    pub d: DMatrix<f64>,
    pub d2: Option<Vec<DVector<f64>>>,
    /// `d Sigma / d theta_r`.
    pub c: Vec<DMatrix<f64>>,
    pub c2: Option<Vec<DMatrix<f64>>>,
}

impl ObsEval {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn n_params(&self) -> usize {
        self.c.len()
    }

    pub fn d2(&self, s: usize, r: usize) -> Option<&DVector<f64>> {
        let p = self.n_params();
        self.d2.as_ref().map(|v| &v[s * p + r])
    }

    pub fn c2(&self, s: usize, r: usize) -> Option<&DMatrix<f64>> {
        let p = self.n_params();
        self.c2.as_ref().map(|v| &v[s * p + r])
    }
}

#[derive(Debug, Clone)]
pub struct ModelEval {
    pub theta: DVector<f64>,
    pub obs: Vec<ObsEval>,
}

impl ModelEval {
    pub fn n_params(&self) -> usize {
        self.theta.len()
    }
}

pub trait ModelSpec: Send + Sync {
    fn name(&self) -> &str;

    fn param_names(&self) -> Vec<String>;

    fn n_params(&self) -> usize {
        self.param_names().len()
    }

    fn n_obs(&self) -> usize;

    fn dim(&self, i: usize) -> usize;

    /// Parameters that must stay positive; the optimizer moves them on a log scale.
    fn log_scale(&self) -> Vec<bool> {
        vec![false; self.n_params()]
    }

    /// Domain check beyond positivity (e.g. a positive definite random-effects block).
    fn check_theta(&self, _theta: &DVector<f64>) -> Result<()> {
        Ok(())
    }

    fn mean(&self, i: usize, theta: &DVector<f64>) -> DVector<f64>;

    fn scatter(&self, i: usize, theta: &DVector<f64>) -> DMatrix<f64>;

    fn derivatives(&self, _i: usize, _theta: &DVector<f64>) -> Option<ObsDerivatives> {
        None
    }

    /// Heuristic starting point for the unrestricted fit.
    fn initial_guess(&self, _y: &[DVector<f64>]) -> Option<DVector<f64>> {
        None
    }
}

/// Checks theta against the model's declared dimension and domain.
pub fn check_theta(model: &dyn ModelSpec, theta: &DVector<f64>) -> Result<()> {
    if theta.len() != model.n_params() {
        return Err(Error::Dimension(format!(
            "theta has length {}, model `{}` expects {}",
            theta.len(),
            model.name(),
            model.n_params()
        )));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Parameter("theta has non-finite entries".into()));
    }
    for ((t, positive), name) in theta
        .iter()
        .zip(model.log_scale())
        .zip(model.param_names())
    {
        if positive && *t <= 0.0 {
            return Err(Error::Parameter(format!("{name} must be positive, got {t}")));
        }
    }
    model.check_theta(theta)
}

/// Full evaluation with analytic derivatives where the model has them.
pub fn evaluate(model: &dyn ModelSpec, theta: &DVector<f64>) -> Result<ModelEval> {
    check_theta(model, theta)?;
    let p = theta.len();
    let mut obs = Vec::with_capacity(model.n_obs());
    for i in 0..model.n_obs() {
        let mu = model.mean(i, theta);
        let sigma = model.scatter(i, theta);
        let chol = cholesky_lower(&sigma).map_err(|_| Error::NotPositiveDefinite { index: i })?;
        let ObsDerivatives { d, d2, c, c2 } = match model.derivatives(i, theta) {
            Some(der) => der,
            None => fd_obs_derivatives(model, i, theta),
        };
        debug_assert_eq!(d.shape(), (mu.len(), p));
        obs.push(ObsEval {
            mu,
            sigma,
            chol,
            d,
            d2,
            c,
            c2,
        });
    }
    Ok(ModelEval {
        theta: theta.clone(),
        obs,
    })
}

/// Evaluation with every derivative block obtained by central differences,
/// whether or not the model has analytic ones.
pub fn fd_derivatives(model: &dyn ModelSpec, theta: &DVector<f64>) -> Result<ModelEval> {
    check_theta(model, theta)?;
    let mut obs = Vec::with_capacity(model.n_obs());
    for i in 0..model.n_obs() {
        let mu = model.mean(i, theta);
        let sigma = model.scatter(i, theta);
        let chol = cholesky_lower(&sigma).map_err(|_| Error::NotPositiveDefinite { index: i })?;
        let ObsDerivatives { d, d2, c, c2 } = fd_obs_derivatives(model, i, theta);
        obs.push(ObsEval {
            mu,
            sigma,
            chol,
            d,
            d2,
            c,
            c2,
        });
    }
    Ok(ModelEval {
        theta: theta.clone(),
        obs,
    })
}

fn first_step(t: f64) -> f64 {
    1e-6 * t.abs().max(1.0)
}

// Power of two so that shifts of dyadic parameter values are exact.
fn second_step(t: f64) -> f64 {
    let target = 1e-4 * t.abs().max(1.0);
    2f64.powi(target.log2().floor() as i32)
}

fn fd_obs_derivatives(model: &dyn ModelSpec, i: usize, theta: &DVector<f64>) -> ObsDerivatives {
    let p = theta.len();
    let q = model.dim(i);
    let shifted = |moves: &[(usize, f64)]| {
        let mut t = theta.clone();
        for &(j, h) in moves {
            t[j] += h;
        }
        (model.mean(i, &t), model.scatter(i, &t))
    };

    let mut d = DMatrix::zeros(q, p);
    let mut c = Vec::with_capacity(p);
    for r in 0..p {
        let h = first_step(theta[r]);
        let (mp, sp) = shifted(&[(r, h)]);
        let (mm, sm) = shifted(&[(r, -h)]);
        d.set_column(r, &((mp - mm) / (2.0 * h)));
        c.push((sp - sm) / (2.0 * h));
    }

    let (mu0, sigma0) = shifted(&[]);
    let mut d2 = vec![DVector::zeros(q); p * p];
    let mut c2 = vec![DMatrix::zeros(q, q); p * p];
    for r in 0..p {
        let hr = second_step(theta[r]);
        let (mp, sp) = shifted(&[(r, hr)]);
        let (mm, sm) = shifted(&[(r, -hr)]);
        d2[r * p + r] = ((&mp - &mu0) - (&mu0 - &mm)) / (hr * hr);
        c2[r * p + r] = ((&sp - &sigma0) - (&sigma0 - &sm)) / (hr * hr);
        for s in 0..r {
            let hs = second_step(theta[s]);
            let (mpp, spp) = shifted(&[(s, hs), (r, hr)]);
            let (mpm, spm) = shifted(&[(s, hs), (r, -hr)]);
            let (mmp, smp) = shifted(&[(s, -hs), (r, hr)]);
            let (mmm, smm) = shifted(&[(s, -hs), (r, -hr)]);
            let scale = 4.0 * hs * hr;
            d2[s * p + r] = ((mpp - mpm) - (mmp - mmm)) / scale;
            c2[s * p + r] = ((spp - spm) - (smp - smm)) / scale;
        }
    }
    // mirror the cross terms
    for r in 0..p {
        for s in 0..r {
            let dv = d2[s * p + r].clone();
            d2[r * p + s] = dv;
            let cv = c2[s * p + r].clone();
            c2[r * p + s] = cv;
        }
    }
    for m in c.iter_mut().chain(c2.iter_mut()) {
        let avg = (&*m + m.transpose()) * 0.5;
        *m = avg;
    }
    ObsDerivatives {
        d,
        d2: Some(d2),
        c,
        c2: Some(c2),
    }
}

/// Ordinary least squares via SVD; `None` if the solve fails.
pub(crate) fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = x.clone().svd(true, true);
    let sol = svd.solve(y, 1e-12).ok()?;
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}
