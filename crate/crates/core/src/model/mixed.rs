use nalgebra::{DMatrix, DVector};

use super::{least_squares, ModelSpec, ObsDerivatives};
use crate::error::{Error, Result};

/// Linear mixed model with a random intercept and slope
///
/// `Y_i = X_i beta + Z_i b_i + e_i`, marginally `mu_i = X_i beta` and
/// `Sigma_i = Z_i Delta(gamma) Z_i' + sigma2 I` with
/// `Delta = [[g1, g2], [g2, g3]]`. `theta = (beta (5), g1, g2, g3, sigma2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedModel2 {
    x: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
}

const N_BETA: usize = 5;
const G1: usize = 5;
const G2: usize = 6;
const G3: usize = 7;
const SIGMA2: usize = 8;
const P: usize = 9;

/// Measurement times used when building the simulation design.
pub const MODEL2_TIMES: [f64; 5] = [5.0, 10.0, 15.0, 30.0, 60.0];

impl MixedModel2 {
    pub fn new(x: Vec<DMatrix<f64>>, z: Vec<DMatrix<f64>>) -> Result<Self> {
        if x.is_empty() || x.len() != z.len() {
            return Err(Error::Dimension(format!(
                "{} X blocks and {} Z blocks",
                x.len(),
                z.len()
            )));
        }
        for (i, (xi, zi)) in x.iter().zip(&z).enumerate() {
            if xi.nrows() == 0 || xi.ncols() != N_BETA || zi.ncols() != 2 || zi.nrows() != xi.nrows()
            {
                return Err(Error::Dimension(format!(
                    "unit {i}: X is {}x{}, Z is {}x{}; expected qx5 and qx2",
                    xi.nrows(),
                    xi.ncols(),
                    zi.nrows(),
                    zi.ncols()
                )));
            }
        }
        Ok(MixedModel2 { x, z })
    }

    /// Builds `X_i = [1, t, g2, g3, g4]` and `Z_i = [1, t]` from measurement
    /// times and a group label in `1..=4` per unit.
    pub fn from_times_and_groups(times: &[Vec<f64>], groups: &[u8]) -> Result<Self> {
        if times.len() != groups.len() {
            return Err(Error::Dimension("times and groups differ in length".into()));
        }
        let mut x = Vec::with_capacity(times.len());
        let mut z = Vec::with_capacity(times.len());
        for (t, &g) in times.iter().zip(groups) {
            if !(1..=4).contains(&g) {
                return Err(Error::Parameter(format!("group must be in 1..=4, got {g}")));
            }
            let q = t.len();
            x.push(DMatrix::from_fn(q, N_BETA, |j, k| match k {
                0 => 1.0,
                1 => t[j],
                k => f64::from(u8::from(g as usize == k)),
            }));
            z.push(DMatrix::from_fn(q, 2, |j, k| if k == 0 { 1.0 } else { t[j] }));
        }
        Self::new(x, z)
    }

    pub fn x(&self, i: usize) -> &DMatrix<f64> {
        &self.x[i]
    }

    pub fn z(&self, i: usize) -> &DMatrix<f64> {
        &self.z[i]
    }

    fn delta(theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[theta[G1], theta[G2], theta[G2], theta[G3]])
    }

    fn basis(&self, i: usize) -> [DMatrix<f64>; 3] {
        let z = &self.z[i];
        let z0 = z.column(0);
        let z1 = z.column(1);
        [
            z0 * z0.transpose(),
            z0 * z1.transpose() + z1 * z0.transpose(),
            z1 * z1.transpose(),
        ]
    }
}

impl ModelSpec for MixedModel2 {
    fn name(&self) -> &str {
        "model2"
    }

    fn param_names(&self) -> Vec<String> {
        [
            "beta0", "beta1", "beta2", "beta3", "beta4", "gamma1", "gamma2", "gamma3", "sigma2",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    fn n_params(&self) -> usize {
        P
    }

    fn n_obs(&self) -> usize {
        self.x.len()
    }

    fn dim(&self, i: usize) -> usize {
        self.x[i].nrows()
    }

    fn log_scale(&self) -> Vec<bool> {
        let mut v = vec![false; P];
        v[G1] = true;
        v[G3] = true;
        v[SIGMA2] = true;
        v
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta[G1] * theta[G3] - theta[G2] * theta[G2] <= 0.0 {
            return Err(Error::Parameter(
                "random-effects covariance Delta(gamma) is not positive definite".into(),
            ));
        }
        Ok(())
    }

    fn mean(&self, i: usize, theta: &DVector<f64>) -> DVector<f64> {
        &self.x[i] * theta.rows(0, N_BETA)
    }

    fn scatter(&self, i: usize, theta: &DVector<f64>) -> DMatrix<f64> {
        let z = &self.z[i];
        let q = z.nrows();
        z * Self::delta(theta) * z.transpose() + DMatrix::identity(q, q) * theta[SIGMA2]
    }

    fn derivatives(&self, i: usize, _theta: &DVector<f64>) -> Option<ObsDerivatives> {
        let q = self.dim(i);
        let mut d = DMatrix::zeros(q, P);
        d.columns_mut(0, N_BETA).copy_from(&self.x[i]);
        let mut c = vec![DMatrix::zeros(q, q); P];
        let [b1, b2, b3] = self.basis(i);
        c[G1] = b1;
        c[G2] = b2;
        c[G3] = b3;
        c[SIGMA2] = DMatrix::identity(q, q);
        Some(ObsDerivatives {
            d,
            d2: None,
            c,
            c2: None,
        })
    }

    /// OLS for beta, then a moment regression of within-unit residual cross
    /// products on the scatter basis for the variance block.
    fn initial_guess(&self, y: &[DVector<f64>]) -> Option<DVector<f64>> {
        let total: usize = self.x.iter().map(|x| x.nrows()).sum();
        let mut xs = DMatrix::zeros(total, N_BETA);
        let mut ys = DVector::zeros(total);
        let mut row = 0;
        for (xi, yi) in self.x.iter().zip(y) {
            xs.rows_mut(row, xi.nrows()).copy_from(xi);
            ys.rows_mut(row, xi.nrows()).copy_from(yi);
            row += xi.nrows();
        }
        let beta = least_squares(&xs, &ys)?;

        let mut design: Vec<[f64; 4]> = Vec::new();
        let mut products = Vec::new();
        for i in 0..self.n_obs() {
            let resid = &y[i] - &self.x[i] * &beta;
            let z = &self.z[i];
            for j in 0..resid.len() {
                for k in j..resid.len() {
                    design.push([
                        z[(j, 0)] * z[(k, 0)],
                        z[(j, 0)] * z[(k, 1)] + z[(j, 1)] * z[(k, 0)],
                        z[(j, 1)] * z[(k, 1)],
                        if j == k { 1.0 } else { 0.0 },
                    ]);
                    products.push(resid[j] * resid[k]);
                }
            }
        }
        let m = DMatrix::from_fn(design.len(), 4, |r, k| design[r][k]);
        let rhs = DVector::from_vec(products);
        let mean_sq = {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for (r, row) in design.iter().enumerate() {
                if row[3] == 1.0 {
                    acc += rhs[r];
                    cnt += 1.0;
                }
            }
            (acc / cnt).max(1e-8)
        };
        let moments = least_squares(&m, &rhs).unwrap_or_else(|| DVector::zeros(4));

        let floor = 1e-3 * mean_sq;
        let g1 = if moments[0] > floor { moments[0] } else { 0.5 * mean_sq };
        let max_t2 = self
            .z
            .iter()
            .flat_map(|z| z.column(1).iter().map(|t| t * t).collect::<Vec<_>>())
            .fold(1.0f64, f64::max);
        let g3 = if moments[2] > 0.0 {
            moments[2]
        } else {
            floor / max_t2
        };
        let bound = 0.5 * (g1 * g3).sqrt();
        let g2 = moments[1].clamp(-bound, bound);
        let s2 = if moments[3] > floor { moments[3] } else { 0.5 * mean_sq };

        let mut theta = DVector::zeros(P);
        theta.rows_mut(0, N_BETA).copy_from(&beta);
        theta[G1] = g1;
        theta[G2] = g2;
        theta[G3] = g3;
        theta[SIGMA2] = s2;
        Some(theta)
    }
}
