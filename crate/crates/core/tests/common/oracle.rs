//! Second implementation of the likelihood, the information matrix, the
//! sample-space derivatives and the adjusted statistics, written term by term
//! on plain `Vec<Vec<f64>>` matrices. Nothing here calls into `ellip_lrt`.

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn eye(n: usize) -> Mat {
    let mut m = zeros(n, n);
    for (k, row) in m.iter_mut().enumerate() {
        row[k] = 1.0;
    }
    m
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(n, m);
    for i in 0..n {
        for l in 0..k {
            let ail = a[i][l];
            for j in 0..m {
                out[i][j] += ail * b[l][j];
            }
        }
    }
    out
}

pub fn mv(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

pub fn tr_t(a: &Mat) -> Mat {
    let mut out = zeros(a[0].len(), a.len());
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

fn add(a: &Mat, b: &Mat, sb: f64) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + sb * y).collect())
        .collect()
}

fn scale(a: &Mat, s: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x * s).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn outer(a: &[f64], b: &[f64]) -> Mat {
    a.iter().map(|x| b.iter().map(|y| x * y).collect()).collect()
}

fn trace(a: &Mat) -> f64 {
    (0..a.len()).map(|k| a[k][k]).sum()
}

/// `x' M y`.
fn bil(x: &[f64], m: &Mat, y: &[f64]) -> f64 {
    dot(x, &mv(m, y))
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut w: Mat = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| w[x][col].abs().total_cmp(&w[y][col].abs()))
            .unwrap();
        w.swap(col, piv);
        let d = w[col][col];
        assert!(d != 0.0, "singular matrix");
        for v in w[col].iter_mut() {
            *v /= d;
        }
        for row in 0..n {
            if row != col {
                let f = w[row][col];
                if f != 0.0 {
                    for k in 0..2 * n {
                        w[row][k] -= f * w[col][k];
                    }
                }
            }
        }
    }
    w.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// `(log |det A|, sign det A)` by Gaussian elimination; the empty matrix gives `(0, 1)`.
pub fn log_det(a: &Mat) -> (f64, f64) {
    let n = a.len();
    let mut w = a.clone();
    let mut log = 0.0;
    let mut sign = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| w[x][col].abs().total_cmp(&w[y][col].abs()))
            .unwrap();
        if piv != col {
            w.swap(col, piv);
            sign = -sign;
        }
        let d = w[col][col];
        assert!(d != 0.0, "singular matrix");
        log += d.abs().ln();
        if d < 0.0 {
            sign = -sign;
        }
        for row in col + 1..n {
            let f = w[row][col] / d;
            for k in col..n {
                w[row][k] -= f * w[col][k];
            }
        }
    }
    (log, sign)
}

pub fn solve(a: &Mat, b: &[f64]) -> Vec<f64> {
    mv(&inverse(a), b)
}

/// Cholesky factor and its derivative in direction `ds`, by differentiating
/// each step of the Cholesky-Banachiewicz loop.
pub fn smith_cholesky(s: &Mat, ds: &Mat) -> (Mat, Mat) {
    let n = s.len();
    let mut l = zeros(n, n);
    let mut dl = zeros(n, n);
    for j in 0..n {
        let mut acc = s[j][j];
        let mut dacc = ds[j][j];
        for k in 0..j {
            acc -= l[j][k] * l[j][k];
            dacc -= 2.0 * l[j][k] * dl[j][k];
        }
        l[j][j] = acc.sqrt();
        dl[j][j] = dacc / (2.0 * l[j][j]);
        for i in j + 1..n {
            let mut acc = s[i][j];
            let mut dacc = ds[i][j];
            for k in 0..j {
                acc -= l[i][k] * l[j][k];
                dacc -= dl[i][k] * l[j][k] + l[i][k] * dl[j][k];
            }
            l[i][j] = acc / l[j][j];
            dl[i][j] = (dacc - l[i][j] * dl[j][j]) / l[j][j];
        }
    }
    (l, dl)
}

fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ra, ca, rb, cb) = (a.len(), a[0].len(), b.len(), b[0].len());
    let mut out = zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            for k in 0..rb {
                for l in 0..cb {
                    out[i * rb + k][j * cb + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

/// Stacks columns.
fn vec_of(a: &Mat) -> Vec<f64> {
    let mut out = Vec::new();
    for j in 0..a[0].len() {
        for row in a {
            out.push(row[j]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub enum Fam {
    Normal,
    T(f64),
    Pe(f64),
}

impl Fam {
    /// `log g(u)` without its normalizing constant.
    fn log_g(&self, u: f64, q: usize) -> f64 {
        match *self {
            Fam::Normal => -0.5 * u,
            Fam::T(nu) => -0.5 * (nu + q as f64) * (1.0 + u / nu).ln(),
            Fam::Pe(l) => -0.5 * u.powf(l),
        }
    }

    /// `W_g(u)` and `W_g'(u)`.
    fn w(&self, u: f64, q: usize) -> (f64, f64) {
        match *self {
            Fam::Normal => (-0.5, 0.0),
            Fam::T(nu) => {
                let k = nu + q as f64;
                (-0.5 * k / (nu + u), 0.5 * k / ((nu + u) * (nu + u)))
            }
            Fam::Pe(l) => (
                -0.5 * l * u.powf(l - 1.0),
                -0.5 * l * (l - 1.0) * u.powf(l - 2.0),
            ),
        }
    }

    /// `(v, v_dot) = (-2 W_g, -2 W_g')`.
    fn v(&self, u: f64, q: usize) -> (f64, f64) {
        let (w, wd) = self.w(u, q);
        (-2.0 * w, -2.0 * wd)
    }
}

#[derive(Clone, Debug)]
pub enum Design {
    /// `mu = 1 / (1 + b0 + b1 x1 + b2 x2 + b3 x2^2)`, `Sigma = sigma2`.
    M1 { x1: Vec<f64>, x2: Vec<f64> },
    /// Random intercept and slope in time, four groups.
    M2 { times: Vec<Vec<f64>>, groups: Vec<u8> },
}

/// Mean, scatter and their parameter derivatives for one unit.
pub struct Unit {
    pub mu: Vec<f64>,
    pub sigma: Mat,
    pub d: Vec<Vec<f64>>,
    pub d2: Vec<Vec<Vec<f64>>>,
    pub c: Vec<Mat>,
    pub c2: Vec<Vec<Mat>>,
}

impl Design {
    pub fn n(&self) -> usize {
        match self {
            Design::M1 { x1, .. } => x1.len(),
            Design::M2 { times, .. } => times.len(),
        }
    }

    pub fn p(&self) -> usize {
        match self {
            Design::M1 { .. } => 5,
            Design::M2 { .. } => 9,
        }
    }

    pub fn unit(&self, i: usize, th: &[f64]) -> Unit {
        let p = self.p();
        match self {
            Design::M1 { x1, x2 } => {
                let g = [1.0, x1[i], x2[i], x2[i] * x2[i]];
                let eta = 1.0 + (0..4).map(|k| th[k] * g[k]).sum::<f64>();
                let mu = 1.0 / eta;
                let mut d = vec![vec![0.0]; p];
                let mut d2 = vec![vec![vec![0.0]; p]; p];
                for r in 0..4 {
                    d[r][0] = -g[r] / (eta * eta);
                    for s in 0..4 {
                        d2[r][s][0] = 2.0 * g[r] * g[s] / (eta * eta * eta);
                    }
                }
                let mut c = vec![zeros(1, 1); p];
                c[4][0][0] = 1.0;
                Unit {
                    mu: vec![mu],
                    sigma: vec![vec![th[4]]],
                    d,
                    d2,
                    c,
                    c2: vec![vec![zeros(1, 1); p]; p],
                }
            }
            Design::M2 { times, groups } => {
                let t = &times[i];
                let q = t.len();
                let x: Mat = t
                    .iter()
                    .map(|&tj| {
                        let mut row = vec![1.0, tj, 0.0, 0.0, 0.0];
                        if groups[i] > 1 {
                            row[groups[i] as usize] = 1.0;
                        }
                        row
                    })
                    .collect();
                let z: Mat = t.iter().map(|&tj| vec![1.0, tj]).collect();
                let delta = vec![vec![th[5], th[6]], vec![th[6], th[7]]];
                let sigma = add(&mm(&mm(&z, &delta), &tr_t(&z)), &eye(q), th[8]);
                let mu = mv(&x, &th[..5]);
                let mut d = vec![vec![0.0; q]; p];
                for r in 0..5 {
                    for j in 0..q {
                        d[r][j] = x[j][r];
                    }
                }
                let e = |a: usize, b: usize| {
                    let mut m = zeros(2, 2);
                    m[a][b] = 1.0;
                    m[b][a] = 1.0;
                    mm(&mm(&z, &m), &tr_t(&z))
                };
                let mut c = vec![zeros(q, q); p];
                c[5] = e(0, 0);
                c[6] = e(0, 1);
                c[7] = e(1, 1);
                c[8] = eye(q);
                Unit {
                    mu,
                    sigma,
                    d,
                    d2: vec![vec![vec![0.0; q]; p]; p],
                    c,
                    c2: vec![vec![zeros(q, q); p]; p],
                }
            }
        }
    }
}

/// Log-likelihood up to an additive constant.
pub fn loglik(des: &Design, fam: Fam, th: &[f64], y: &[Vec<f64>]) -> f64 {
    (0..des.n())
        .map(|i| {
            let u = des.unit(i, th);
            let z: Vec<f64> = y[i].iter().zip(&u.mu).map(|(a, b)| a - b).collect();
            let si = inverse(&u.sigma);
            -0.5 * log_det(&u.sigma).0 + fam.log_g(bil(&z, &si, &z), z.len())
        })
        .sum()
}

/// Score as `F' H s` with the Kronecker-form weight matrix.
pub fn score(des: &Design, fam: Fam, th: &[f64], y: &[Vec<f64>]) -> Vec<f64> {
    let p = des.p();
    let mut out = vec![0.0; p];
    for i in 0..des.n() {
        let u = des.unit(i, th);
        let q = u.mu.len();
        let z: Vec<f64> = y[i].iter().zip(&u.mu).map(|(a, b)| a - b).collect();
        let si = inverse(&u.sigma);
        let (v, _) = fam.v(bil(&z, &si, &z), q);
        // F_i: rows are d_(r) stacked over vec(C_(r))
        let f: Mat = (0..q + q * q)
            .map(|row| {
                (0..p)
                    .map(|r| if row < q { u.d[r][row] } else { vec_of(&u.c[r])[row - q] })
                    .collect()
            })
            .collect();
        // H_i = blockdiag(Sigma^{-1}, (2 Sigma (x) Sigma)^{-1}) with (A (x) B)^{-1} = A^{-1} (x) B^{-1}
        let si = inverse(&u.sigma);
        let mut h = zeros(q + q * q, q + q * q);
        for a in 0..q {
            for b in 0..q {
                h[a][b] = si[a][b];
            }
        }
        let k = scale(&kron(&si, &si), 0.5);
        for a in 0..q * q {
            for b in 0..q * q {
                h[q + a][q + b] = k[a][b];
            }
        }
        let mut s: Vec<f64> = z.iter().map(|zj| v * zj).collect();
        let m = add(&u.sigma, &outer(&z, &z), -v);
        s.extend(vec_of(&m).into_iter().map(|x| -x));
        let g = mv(&mm(&tr_t(&f), &h), &s);
        for r in 0..p {
            out[r] += g[r];
        }
    }
    out
}

/// Score element by element: `v d_r' S^{-1} z - tr(S^{-1} C_r) / 2 + v z' S^{-1} C_r S^{-1} z / 2`.
pub fn score_elementwise(des: &Design, fam: Fam, th: &[f64], y: &[Vec<f64>]) -> Vec<f64> {
    let p = des.p();
    let mut out = vec![0.0; p];
    for i in 0..des.n() {
        let u = des.unit(i, th);
        let z: Vec<f64> = y[i].iter().zip(&u.mu).map(|(a, b)| a - b).collect();
        let si = inverse(&u.sigma);
        let w = mv(&si, &z);
        let (v, _) = fam.v(dot(&z, &w), z.len());
        for r in 0..p {
            out[r] += v * dot(&u.d[r], &w) - 0.5 * trace(&mm(&si, &u.c[r])) + 0.5 * v * bil(&w, &u.c[r], &w);
        }
    }
    out
}

/// Observed information from the per-unit `T`, `B`, `E` and `A` terms, with
/// the residual supplied as `z_i` (data residual or `P a`).
fn info_terms(u: &Unit, z: &[f64], fam: Fam) -> Mat {
    let p = u.d.len();
    let q = z.len();
    let si = inverse(&u.sigma);
    let (v, vd) = fam.v(bil(z, &si, z), q);
    let a: Vec<Mat> = (0..p).map(|r| scale(&mm(&mm(&si, &u.c[r]), &si), -1.0)).collect();
    let zz = outer(z, z);
    let mut j = zeros(p, p);
    for r in 0..p {
        let zaz = bil(z, &a[r], z);
        let dsz = bil(&u.d[r], &si, z);
        // T_(r)' as a row vector
        let zsc = mv(&tr_t(&mm(&si, &u.c[r])), z);
        let t_r: Vec<f64> = (0..q)
            .map(|k| -vd * zaz * z[k] + 2.0 * vd * dsz * z[k] + v * u.d[r][k] + v * zsc[k])
            .collect();
        let b_r = add(
            &add(&scale(&zz, -vd * dsz + 0.5 * vd * zaz), &outer(z, &u.d[r]), -v),
            &u.c[r],
            -0.5,
        );
        for s in 0..p {
            let a_sr = add(
                &scale(&mm(&mm(&a[r], &u.c[s]), &si), -2.0),
                &mm(&mm(&si, &u.c2[s][r]), &si),
                -1.0,
            );
            let e_rs = -0.5 * trace(&mm(&a_sr, &add(&u.sigma, &zz, -v))) - v * bil(z, &si, &u.d2[s][r]);
            j[r][s] += bil(&t_r, &si, &u.d[s]) + trace(&mm(&b_r, &a[s])) + e_rs;
        }
    }
    j
}

pub fn info(des: &Design, fam: Fam, th: &[f64], y: &[Vec<f64>]) -> Mat {
    let p = des.p();
    let mut j = zeros(p, p);
    for i in 0..des.n() {
        let u = des.unit(i, th);
        let z: Vec<f64> = y[i].iter().zip(&u.mu).map(|(a, b)| a - b).collect();
        j = add(&j, &info_terms(&u, &z, fam), 1.0);
    }
    j
}

/// Information at `theta_tilde` with residuals `P_tilde_i a_i`, the ancillary
/// taken at `theta_hat`.
pub fn doubletilde(des: &Design, fam: Fam, y: &[Vec<f64>], th_hat: &[f64], th_tilde: &[f64]) -> Mat {
    let p = des.p();
    let mut jj = zeros(p, p);
    for i in 0..des.n() {
        let uh = des.unit(i, th_hat);
        let ut = des.unit(i, th_tilde);
        let qi = uh.mu.len();
        let (p_hat, _) = smith_cholesky(&uh.sigma, &zeros(qi, qi));
        let resid: Vec<f64> = y[i].iter().zip(&uh.mu).map(|(a, b)| a - b).collect();
        let a = mv(&inverse(&p_hat), &resid);
        let (p_tilde, _) = smith_cholesky(&ut.sigma, &zeros(qi, qi));
        jj = add(&jj, &info_terms(&ut, &mv(&p_tilde, &a), fam), 1.0);
    }
    jj
}

pub struct Stats {
    pub lr: f64,
    pub r: Option<f64>,
    pub gamma: Option<f64>,
    pub rho: f64,
    pub r_star: Option<f64>,
    pub lr_star: f64,
    pub lr_star2: f64,
}

fn sub(m: &Mat, idx: &[usize]) -> Mat {
    idx.iter().map(|&a| idx.iter().map(|&b| m[a][b]).collect()).collect()
}

/// LR, r, gamma, rho and the adjusted statistics from given estimates.
pub fn statistics(
    des: &Design,
    fam: Fam,
    y: &[Vec<f64>],
    th_hat: &[f64],
    th_tilde: &[f64],
    interest: &[usize],
    psi0: &[f64],
) -> Stats {
    let p = des.p();
    let q = interest.len();
    let nuisance: Vec<usize> = (0..p).filter(|k| !interest.contains(k)).collect();

    let lr = (2.0 * (loglik(des, fam, th_hat, y) - loglik(des, fam, th_tilde, y))).max(0.0);
    let r = (q == 1).then(|| (th_hat[interest[0]] - psi0[0]).signum() * lr.sqrt());

    let mut ell_hat = vec![0.0; p];
    let mut ell_tilde = vec![0.0; p];
    let mut u_prime = zeros(p, p);
    for i in 0..des.n() {
        let uh = des.unit(i, th_hat);
        let ut = des.unit(i, th_tilde);
        let qi = uh.mu.len();
        // ancillary and its pieces at the MLE
        let (p_hat, _) = smith_cholesky(&uh.sigma, &zeros(qi, qi));
        let resid: Vec<f64> = y[i].iter().zip(&uh.mu).map(|(a, b)| a - b).collect();
        let a = mv(&inverse(&p_hat), &resid);
        let r_hat: Vec<Vec<f64>> = (0..p)
            .map(|s| {
                let (_, dp) = smith_cholesky(&uh.sigma, &uh.c[s]);
                mv(&dp, &a).iter().zip(&uh.d[s]).map(|(x, d)| x + d).collect()
            })
            .collect();
        let pa = mv(&p_hat, &a);

        let sih = inverse(&uh.sigma);
        let (vh, _) = fam.v(bil(&pa, &sih, &pa), qi);
        for s in 0..p {
            ell_hat[s] += bil(&r_hat[s], &sih, &pa.iter().map(|x| -vh * x).collect::<Vec<_>>());
        }

        let sit = inverse(&ut.sigma);
        let zt: Vec<f64> = (0..qi).map(|k| pa[k] + uh.mu[k] - ut.mu[k]).collect();
        let (vt, vdt) = fam.v(bil(&zt, &sit, &zt), qi);
        for s in 0..p {
            ell_tilde[s] += bil(&r_hat[s], &sit, &zt.iter().map(|x| -vt * x).collect::<Vec<_>>());
        }
        for r in 0..p {
            let a_r = scale(&mm(&mm(&sit, &ut.c[r]), &sit), -1.0);
            let dsz = bil(&ut.d[r], &sit, &zt);
            let zaz = bil(&zt, &a_r, &zt);
            let csz = mv(&mm(&ut.c[r], &sit), &zt);
            let q_r: Vec<f64> = (0..qi)
                .map(|k| 2.0 * vdt * zt[k] * dsz + vt * ut.d[r][k] - vdt * zt[k] * zaz + vt * csz[k])
                .collect();
            for s in 0..p {
                u_prime[r][s] += bil(&q_r, &sit, &r_hat[s]);
            }
        }

    }

    let jj = doubletilde(des, fam, y, th_hat, th_tilde);
    let j_hat = info(des, fam, th_hat, y);
    let j_tilde = info(des, fam, th_tilde, y);
    let u_tilde = score_elementwise(des, fam, th_tilde, y);
    let delta: Vec<f64> = ell_hat.iter().zip(&ell_tilde).map(|(a, b)| a - b).collect();
    // row vector delta' U'^{-1}
    let x = mv(&tr_t(&inverse(&u_prime)), &delta);
    let common = 0.5 * log_det(&j_hat).0 - log_det(&u_prime).0 + 0.5 * log_det(&sub(&j_tilde, &nuisance)).0;

    let gamma = r.map(|r| (common + (r / x[interest[0]]).ln()).exp());
    let quad = dot(&u_tilde, &solve(&jj, &u_tilde));
    let cross = dot(&x, &u_tilde);
    let qf = q as f64;
    let rho = (common - 0.5 * log_det(&sub(&jj, &nuisance)).0 + 0.5 * log_det(&jj).0
        + 0.5 * qf * quad.ln()
        - (0.5 * qf - 1.0) * lr.ln()
        - cross.ln())
    .exp();

    let r_star = r.zip(gamma).map(|(r, g)| r - g.ln() / r);
    let lr_star = lr * (1.0 - rho.ln() / lr).powi(2);
    let lr_star2 = lr - 2.0 * rho.ln();
    Stats {
        lr,
        r,
        gamma,
        rho,
        r_star,
        lr_star,
        lr_star2,
    }
}
