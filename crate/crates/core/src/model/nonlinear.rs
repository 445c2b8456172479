use nalgebra::{DMatrix, DVector};

use super::{least_squares, ModelSpec, ObsDerivatives};
use crate::error::{Error, Result};

/// Univariate reciprocal-quadratic regression
///
/// `mu_i = 1 / (1 + b0 + b1 x1 + b2 x2 + b3 x2^2)`, `Sigma_i = sigma2`,
/// with `theta = (b0, b1, b2, b3, sigma2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearModel1 {
    x1: Vec<f64>,
    x2: Vec<f64>,
}

const SIGMA2: usize = 4;

impl NonlinearModel1 {
    pub fn new(x1: Vec<f64>, x2: Vec<f64>) -> Result<Self> {
        if x1.len() != x2.len() {
            return Err(Error::Dimension(format!(
                "x1 has {} entries, x2 has {}",
                x1.len(),
                x2.len()
            )));
        }
        if x1.is_empty() {
            return Err(Error::Dimension("model 1 needs at least one observation".into()));
        }
        Ok(NonlinearModel1 { x1, x2 })
    }

    pub fn x1(&self) -> &[f64] {
        &self.x1
    }

    pub fn x2(&self) -> &[f64] {
        &self.x2
    }

    fn regressors(&self, i: usize) -> [f64; 4] {
        let x2 = self.x2[i];
        [1.0, self.x1[i], x2, x2 * x2]
    }

    fn mu(&self, i: usize, theta: &DVector<f64>) -> f64 {
        let g = self.regressors(i);
        let eta = 1.0 + (0..4).map(|k| theta[k] * g[k]).sum::<f64>();
        1.0 / eta
    }
}

impl ModelSpec for NonlinearModel1 {
    fn name(&self) -> &str {
        "model1"
    }

    fn param_names(&self) -> Vec<String> {
        ["beta0", "beta1", "beta2", "beta3", "sigma2"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn n_params(&self) -> usize {
        5
    }

    fn n_obs(&self) -> usize {
        self.x1.len()
    }

    fn dim(&self, _i: usize) -> usize {
        1
    }

    fn log_scale(&self) -> Vec<bool> {
        vec![false, false, false, false, true]
    }

    fn mean(&self, i: usize, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.mu(i, theta))
    }

    fn scatter(&self, _i: usize, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, theta[SIGMA2])
    }

    fn derivatives(&self, i: usize, theta: &DVector<f64>) -> Option<ObsDerivatives> {
        let g = self.regressors(i);
        let mu = self.mu(i, theta);
        let mu2 = mu * mu;
        let mu3 = mu2 * mu;
        let mut d = DMatrix::zeros(1, 5);
        for k in 0..4 {
            d[(0, k)] = -mu2 * g[k];
        }
        let mut d2 = vec![DVector::zeros(1); 25];
        for s in 0..4 {
            for r in 0..=s {
                let v = 2.0 * mu3 * g[s] * g[r];
                d2[s * 5 + r][0] = v;
                d2[r * 5 + s][0] = v;
            }
        }
        let mut c = vec![DMatrix::zeros(1, 1); 5];
        c[SIGMA2][(0, 0)] = 1.0;
        Some(ObsDerivatives {
            d,
            d2: Some(d2),
            c,
            c2: None,
        })
    }

    /// Least squares on `1/y - 1`, or the intercept-only fit if that has the
    /// smaller residual sum of squares on the response scale. The
    /// transformed regression is unstable when some `y` lies near zero.
    fn initial_guess(&self, y: &[DVector<f64>]) -> Option<DVector<f64>> {
        let n = self.n_obs();
        let mean = y.iter().map(|v| v[0]).sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v[0] - mean).powi(2)).sum::<f64>() / n as f64;
        let x = DMatrix::from_fn(n, 4, |i, k| self.regressors(i)[k]);
        let target = DVector::from_fn(n, |i, _| 1.0 / y[i][0] - 1.0);
        let mut candidates = vec![DVector::from_vec(vec![1.0 / mean - 1.0, 0.0, 0.0, 0.0])];
        if target.iter().all(|t| t.is_finite()) {
            candidates.extend(least_squares(&x, &target));
        }
        let rss = |beta: &DVector<f64>| {
            let mut theta = DVector::zeros(5);
            theta.rows_mut(0, 4).copy_from(beta);
            let ss: f64 = y
                .iter()
                .enumerate()
                .map(|(i, yi)| (yi[0] - self.mu(i, &theta)).powi(2))
                .sum();
            if ss.is_finite() {
                ss
            } else {
                f64::INFINITY
            }
        };
        let beta = candidates
            .into_iter()
            .map(|b| (rss(&b), b))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, b)| b)?;
        let mut theta = DVector::zeros(5);
        theta.rows_mut(0, 4).copy_from(&beta);
        let s2 = rss(&beta) / n as f64;
        theta[SIGMA2] = if s2.is_finite() && s2 > 0.0 {
            s2
        } else {
            var.max(1e-8)
        };
        Some(theta)
    }
}
