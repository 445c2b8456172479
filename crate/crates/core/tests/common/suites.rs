//! Check suites shared by the focused tests and the acceptance run.

use ellip_lrt::ancillary::{cholesky_derivative, cholesky_lower};
use ellip_lrt::inference::{run_test, FitOptions, Flag, Hypothesis, Sided, TestReport};
use ellip_lrt::likelihood::{loglik_at, observed_info, score};
use ellip_lrt::model::{evaluate, LinearModel, ModelSpec, Restriction};
use ellip_lrt::montecarlo::{draw_responses, Design, ModelKind};
use ellip_lrt::EllipticalFamily;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::oracle;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

pub fn families() -> [EllipticalFamily; 3] {
    [
        EllipticalFamily::Normal,
        EllipticalFamily::student_t(3.0).unwrap(),
        EllipticalFamily::power_exponential(0.9).unwrap(),
    ]
}

pub fn oracle_family(f: &EllipticalFamily) -> oracle::Fam {
    match *f {
        EllipticalFamily::Normal => oracle::Fam::Normal,
        EllipticalFamily::StudentT { nu } => oracle::Fam::T(nu),
        EllipticalFamily::PowerExponential { lambda } => oracle::Fam::Pe(lambda),
    }
}

pub fn oracle_design(d: &Design) -> oracle::Design {
    match d.kind {
        ModelKind::Model1 => oracle::Design::M1 {
            x1: d.covariates.iter().map(|c| c[(0, 0)]).collect(),
            x2: d.covariates.iter().map(|c| c[(0, 1)]).collect(),
        },
        ModelKind::Model2 => oracle::Design::M2 {
            times: d.covariates.iter().map(|c| c.column(0).iter().copied().collect()).collect(),
            groups: d.covariates.iter().map(|c| c[(0, 1)] as u8).collect(),
        },
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

/// A parameter point scattered around the simulation defaults.
pub fn random_theta(kind: ModelKind, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut t = kind.default_theta();
    match kind {
        ModelKind::Model1 => {
            for b in t.iter_mut().take(4) {
                *b += 0.05 * normal(rng);
            }
            t[4] *= (0.2 * normal(rng)).exp();
        }
        ModelKind::Model2 => {
            for b in t.iter_mut().take(5) {
                *b += 0.2 * normal(rng);
            }
            t[5] *= (0.2 * normal(rng)).exp();
            t[6] += normal(rng);
            t[7] *= (0.2 * normal(rng)).exp();
            t[8] *= (0.2 * normal(rng)).exp();
        }
    }
    DVector::from_vec(t)
}

/// Central difference refined by one Richardson step.
fn richardson<F: Fn(f64) -> DVector<f64>>(f: F, h: f64) -> DVector<f64> {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (d(h / 2.0) * 4.0 - d(h)) / 3.0
}

/// Relative steps for positive parameters, floored steps otherwise.
fn step(x: f64, positive: bool, size: f64) -> f64 {
    if positive {
        size * x.abs()
    } else {
        size * x.abs().max(1.0)
    }
}

fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// Worst relative errors of the score, the observed information and the
/// Cholesky derivatives against finite differences at one point.
pub fn derivative_errors(
    model: &dyn ModelSpec,
    fam: &EllipticalFamily,
    theta: &DVector<f64>,
    y: &[DVector<f64>],
) -> (f64, f64, f64) {
    let p = theta.len();
    let positive = model.log_scale();
    let shifted = |r: usize, h: f64| {
        let mut t = theta.clone();
        t[r] += h;
        t
    };
    let eval = evaluate(model, theta).unwrap();
    let u = score(fam, &eval, y).unwrap();
    let j = observed_info(fam, &eval, y).unwrap();

    let mut fd_u = DVector::zeros(p);
    let mut fd_j = DMatrix::zeros(p, p);
    for r in 0..p {
        let h = step(theta[r], positive[r], 1e-3);
        let g = richardson(
            |e| DVector::from_element(1, loglik_at(model, fam, &shifted(r, e), y).unwrap()),
            h,
        );
        fd_u[r] = g[0];
        let col = richardson(
            |e| score(fam, &evaluate(model, &shifted(r, e)).unwrap(), y).unwrap(),
            h,
        );
        fd_j.set_column(r, &(-col));
    }

    let mut chol_err: f64 = 0.0;
    for i in 0..model.n_obs() {
        let pi = cholesky_lower(&model.scatter(i, theta)).unwrap();
        for r in 0..p {
            let analytic = cholesky_derivative(&pi, &eval.obs[i].c[r]).unwrap();
            let h = step(theta[r], positive[r], 1e-2);
            let q = model.dim(i);
            let fd = richardson(
                |e| {
                    let m = cholesky_lower(&model.scatter(i, &shifted(r, e))).unwrap();
                    DVector::from_iterator(q * q, m.iter().copied())
                },
                h,
            );
            let fd = DMatrix::from_iterator(q, q, fd.iter().copied());
            chol_err = chol_err.max(rel_err_mat(&analytic, &fd));
        }
    }
    (rel_err_vec(&u, &fd_u), rel_err_mat(&j, &fd_j), chol_err)
}

/// Both simulation models under three families at 20 seeded points each.
pub fn derivative_suite() -> Outcome {
    let (mut worst_u, mut worst_j, mut worst_c) = (0.0f64, 0.0f64, 0.0f64);
    for (kind, n) in [(ModelKind::Model1, 15), (ModelKind::Model2, 16)] {
        let design = Design::draw(kind, n, 7);
        let model = design.model().unwrap();
        for (f_idx, fam) in families().iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + f_idx as u64);
            let truth = DVector::from_vec(kind.default_theta());
            for _ in 0..20 {
                let theta = random_theta(kind, &mut rng);
                let y = draw_responses(model.as_ref(), fam, &truth, &mut rng).unwrap();
                let (eu, ej, ec) = derivative_errors(model.as_ref(), fam, &theta, &y);
                worst_u = worst_u.max(eu);
                worst_j = worst_j.max(ej);
                worst_c = worst_c.max(ec);
            }
        }
    }
    Outcome {
        pass: worst_u <= 1e-6 && worst_j <= 1e-4 && worst_c <= 1e-7,
        detail: format!(
            "max rel err: score {worst_u:.2e} (<= 1e-6), information {worst_j:.2e} (<= 1e-4), \
             Cholesky derivative {worst_c:.2e} (<= 1e-7)"
        ),
    }
}

/// Worst `|gamma - 1|` and `|rho - 1|` over the two Gaussian exactness cases.
pub fn gaussian_exactness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut identities = true;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = FitOptions::default();
    let mut track = |rep: &TestReport| {
        if let Some(g) = rep.gamma {
            worst = worst.max((g - 1.0).abs());
        }
        worst = worst.max((rep.rho - 1.0).abs());
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-8 * b.abs().max(1.0);
        let r_ok = match (rep.r_star, rep.r) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        if !(r_ok && close(rep.lr_star, rep.lr) && close(rep.lr_star2, rep.lr)) {
            identities = false;
        }
    };

    for n in [5, 12, 30] {
        let ys: Vec<_> = (0..n)
            .map(|_| DVector::from_element(1, 0.3 + 1.5 * normal(&mut rng)))
            .collect();
        let m = LinearModel::mean_only(n, 2.25).unwrap();
        let h = Hypothesis::two_sided(vec![0], vec![0.0], 1).unwrap();
        track(&run_test(&m, &EllipticalFamily::Normal, &ys, &h, &opts).unwrap());
    }

    // bivariate responses with correlated known scatter and three coefficients
    let n = 20;
    let x: Vec<_> = (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            DMatrix::from_row_slice(2, 3, &[1.0, t, 0.0, 1.0, t * t, 1.0])
        })
        .collect();
    let s: Vec<_> = (0..n)
        .map(|i| {
            let c = 0.3 + 0.02 * i as f64;
            DMatrix::from_row_slice(2, 2, &[1.0 + c, 0.4, 0.4, 0.8])
        })
        .collect();
    let names = vec!["b0".to_string(), "b1".into(), "b2".into()];
    let m = LinearModel::with_known_scatter(x, names, s).unwrap();
    let beta = DVector::from_vec(vec![0.5, -0.3, 0.2]);
    let y = draw_responses(&m, &EllipticalFamily::Normal, &beta, &mut rng).unwrap();
    let hyps = [
        Hypothesis::new(Restriction::new(vec![1], vec![0.0], 3).unwrap(), Sided::OneSidedLeq).unwrap(),
        Hypothesis::two_sided(vec![2], vec![0.5], 3).unwrap(),
        Hypothesis::two_sided(vec![1, 2], vec![0.0, 0.0], 3).unwrap(),
        Hypothesis::two_sided(vec![0, 1, 2], vec![0.0, 0.0, 0.0], 3).unwrap(),
    ];
    for h in &hyps {
        track(&run_test(&m, &EllipticalFamily::Normal, &y, h, &opts).unwrap());
    }
    Outcome {
        pass: worst <= 1e-8 && identities,
        detail: format!(
            "max |factor - 1| = {worst:.2e} (<= 1e-8) over 7 tests; r* = r and LR* = LR** = LR: {identities}"
        ),
    }
}

/// The production report and the independent transcription for one instance.
pub struct DualCase {
    pub label: String,
    pub report: TestReport,
    pub oracle: oracle::Stats,
}

fn usable(rep: &TestReport) -> bool {
    ![
        Flag::NearZeroR,
        Flag::NearZeroLr,
        Flag::DegenerateGamma,
        Flag::DegenerateRho,
        Flag::LrStarFloored,
        Flag::NearZeroResidual,
    ]
    .iter()
    .any(|f| rep.has_flag(*f))
}

/// Seeded instances cycling through the models, families and hypotheses.
/// Instances whose report raised a fallback flag are skipped.
pub fn dual_cases(count: usize) -> Vec<DualCase> {
    let mut out = Vec::new();
    let opts = FitOptions::default();
    let mut k: u64 = 0;
    while out.len() < count && k < 4 * count as u64 {
        let kind = if k.is_multiple_of(2) { ModelKind::Model1 } else { ModelKind::Model2 };
        let fam = families()[(k / 2 % 3) as usize];
        let (n, interest) = match (kind, k / 6 % 2) {
            (ModelKind::Model1, 0) => (15, vec![3]),
            (ModelKind::Model1, _) => (15, vec![2, 3]),
            (ModelKind::Model2, 0) => (16, vec![2]),
            (ModelKind::Model2, _) => (16, vec![2, 3, 4]),
        };
        let design = Design::draw(kind, n, 500 + k);
        let model = design.model().unwrap();
        let truth = DVector::from_vec(kind.default_theta());
        let mut rng = ChaCha8Rng::seed_from_u64(900 + k);
        let y = draw_responses(model.as_ref(), &fam, &truth, &mut rng).unwrap();
        let psi0 = vec![0.0; interest.len()];
        let h = Hypothesis::two_sided(interest.clone(), psi0.clone(), truth.len()).unwrap();
        k += 1;
        let Ok(report) = run_test(model.as_ref(), &fam, &y, &h, &opts) else {
            continue;
        };
        if !usable(&report) {
            continue;
        }
        let od = oracle_design(&design);
        let oy: Vec<Vec<f64>> = y.iter().map(|v| v.iter().copied().collect()).collect();
        let stats = oracle::statistics(
            &od,
            oracle_family(&fam),
            &oy,
            &report.theta_hat,
            &report.theta_tilde,
            &interest,
            &psi0,
        );
        out.push(DualCase {
            label: format!("{:?} {} q={} #{}", kind, fam.name(), interest.len(), k - 1),
            report,
            oracle: stats,
        });
    }
    out
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Largest relative disagreement across every statistic of one case.
pub fn dual_discrepancy(c: &DualCase) -> f64 {
    let r = &c.report;
    let o = &c.oracle;
    let mut worst = rel(r.lr, o.lr)
        .max(rel(r.rho, o.rho))
        .max(rel(r.lr_star, o.lr_star))
        .max(rel(r.lr_star2, o.lr_star2));
    for (a, b) in [(r.r, o.r), (r.gamma, o.gamma), (r.r_star, o.r_star)] {
        match (a, b) {
            (Some(a), Some(b)) => worst = worst.max(rel(a, b)),
            (None, None) => {}
            _ => return f64::INFINITY,
        }
    }
    worst
}

pub fn dual_equivalence(count: usize) -> Outcome {
    let cases = dual_cases(count);
    let (mut worst, mut label) = (0.0f64, String::new());
    for c in &cases {
        let d = dual_discrepancy(c);
        if d > worst || d.is_nan() {
            worst = d;
            label = c.label.clone();
        }
    }
    Outcome {
        pass: cases.len() == count && worst <= 1e-8,
        detail: format!(
            "{} instances, max rel diff {worst:.2e} (<= 1e-8){}",
            cases.len(),
            if label.is_empty() { String::new() } else { format!(" at {label}") }
        ),
    }
}
