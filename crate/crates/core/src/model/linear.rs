use nalgebra::{DMatrix, DVector};

use super::{least_squares, ModelSpec, ObsDerivatives};
use crate::error::{Error, Result};

/// `mu_i = X_i beta` with either `Sigma_i = sigma2 I` (sigma2 estimated, last
/// parameter) or a fully known `Sigma_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    x: Vec<DMatrix<f64>>,
    beta_names: Vec<String>,
    known_scatter: Option<Vec<DMatrix<f64>>>,
    scale_name: String,
}

impl LinearModel {
    pub fn new(x: Vec<DMatrix<f64>>, beta_names: Vec<String>) -> Result<Self> {
        Self::build(x, beta_names, None)
    }

    pub fn with_known_scatter(
        x: Vec<DMatrix<f64>>,
        beta_names: Vec<String>,
        scatter: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if scatter.len() != x.len() {
            return Err(Error::Dimension("one scatter matrix per observation".into()));
        }
        for (i, (xi, si)) in x.iter().zip(&scatter).enumerate() {
            if si.shape() != (xi.nrows(), xi.nrows()) {
                return Err(Error::Dimension(format!("scatter {i} has the wrong shape")));
            }
        }
        Self::build(x, beta_names, Some(scatter))
    }

    /// iid location-scale sample: `theta = (mu, sigma2)`.
    pub fn iid(n: usize) -> Result<Self> {
        let mut m = Self::new(vec![DMatrix::from_element(1, 1, 1.0); n], vec!["mu".into()])?;
        m.scale_name = "sigma2".into();
        Ok(m)
    }

    /// iid sample with known variance: the single parameter is the mean.
    pub fn mean_only(n: usize, sigma2: f64) -> Result<Self> {
        Self::with_known_scatter(
            vec![DMatrix::from_element(1, 1, 1.0); n],
            vec!["mu".into()],
            vec![DMatrix::from_element(1, 1, sigma2); n],
        )
    }

    fn build(
        x: Vec<DMatrix<f64>>,
        beta_names: Vec<String>,
        known_scatter: Option<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Dimension("linear model needs observations".into()));
        }
        let k = beta_names.len();
        if let Some(i) = x.iter().position(|xi| xi.ncols() != k || xi.nrows() == 0) {
            return Err(Error::Dimension(format!(
                "design block {i} is {}x{}, expected {k} columns",
                x[i].nrows(),
                x[i].ncols()
            )));
        }
        Ok(LinearModel {
            x,
            beta_names,
            known_scatter,
            scale_name: "sigma2".into(),
        })
    }

    fn n_beta(&self) -> usize {
        self.beta_names.len()
    }
}

impl ModelSpec for LinearModel {
    fn name(&self) -> &str {
        "linear"
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = self.beta_names.clone();
        if self.known_scatter.is_none() {
            names.push(self.scale_name.clone());
        }
        names
    }

    fn n_params(&self) -> usize {
        self.n_beta() + usize::from(self.known_scatter.is_none())
    }

    fn n_obs(&self) -> usize {
        self.x.len()
    }

    fn dim(&self, i: usize) -> usize {
        self.x[i].nrows()
    }

    fn log_scale(&self) -> Vec<bool> {
        let mut v = vec![false; self.n_beta()];
        if self.known_scatter.is_none() {
            v.push(true);
        }
        v
    }

    fn mean(&self, i: usize, theta: &DVector<f64>) -> DVector<f64> {
        &self.x[i] * theta.rows(0, self.n_beta())
    }

    fn scatter(&self, i: usize, theta: &DVector<f64>) -> DMatrix<f64> {
        match &self.known_scatter {
            Some(s) => s[i].clone(),
            None => {
                let q = self.dim(i);
                DMatrix::identity(q, q) * theta[self.n_beta()]
            }
        }
    }

    fn derivatives(&self, i: usize, _theta: &DVector<f64>) -> Option<ObsDerivatives> {
        let p = self.n_params();
        let q = self.dim(i);
        let mut d = DMatrix::zeros(q, p);
        d.columns_mut(0, self.n_beta()).copy_from(&self.x[i]);
        let mut c = vec![DMatrix::zeros(q, q); p];
        if self.known_scatter.is_none() {
            c[p - 1] = DMatrix::identity(q, q);
        }
        Some(ObsDerivatives {
            d,
            d2: None,
            c,
            c2: None,
        })
    }

    fn initial_guess(&self, y: &[DVector<f64>]) -> Option<DVector<f64>> {
        let total: usize = self.x.iter().map(|x| x.nrows()).sum();
        let k = self.n_beta();
        let mut xs = DMatrix::zeros(total, k);
        let mut ys = DVector::zeros(total);
        let mut row = 0;
        for (xi, yi) in self.x.iter().zip(y) {
            xs.rows_mut(row, xi.nrows()).copy_from(xi);
            ys.rows_mut(row, xi.nrows()).copy_from(yi);
            row += xi.nrows();
        }
        let beta = least_squares(&xs, &ys)?;
        let mut theta = DVector::zeros(self.n_params());
        theta.rows_mut(0, k).copy_from(&beta);
        if self.known_scatter.is_none() {
            let resid = &ys - &xs * &beta;
            theta[k] = (resid.norm_squared() / total as f64).max(1e-8);
        }
        Some(theta)
    }
}
