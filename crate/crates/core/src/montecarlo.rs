//! Seeded null-rejection studies.
//!
//! The design (covariates, cluster sizes, groups) is drawn once per run from
//! stream 0 of a ChaCha generator keyed by the seed. Replication `k` draws its
//! errors from stream `k + 1`, so results do not depend on scheduling.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::EllipticalFamily;
use crate::inference::{run_test, FitOptions, Hypothesis, Sided, TestReport};
use crate::model::{
    Dataset, MixedModel2, ModelSpec, NonlinearModel1, Observation, Restriction, MODEL2_TIMES,
};

/// Statistic names in reporting order.
pub const STATISTICS: [&str; 5] = ["r", "r*", "LR", "LR*", "LR**"];

/// Grid of nominal p-values for discrepancy curves: 0.01, 0.02, ..., 0.25.
pub fn discrepancy_grid() -> Vec<f64> {
    (1..=25).map(|k| k as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Model1,
    Model2,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "model1" => Ok(ModelKind::Model1),
            "model2" => Ok(ModelKind::Model2),
            other => Err(Error::Config(format!("unknown simulation model '{other}'"))),
        }
    }

    pub fn default_theta(&self) -> Vec<f64> {
        match self {
            ModelKind::Model1 => vec![0.5, 0.2, 0.0, 0.0, 0.005],
            ModelKind::Model2 => vec![0.7, 0.5, 0.0, 0.0, 0.0, 500.0, 2.0, 200.0, 5.0],
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let names: &[&str] = match self {
            ModelKind::Model1 => &["beta0", "beta1", "beta2", "beta3", "sigma2"],
            ModelKind::Model2 => &[
                "beta0", "beta1", "beta2", "beta3", "beta4", "gamma1", "gamma2", "gamma3",
                "sigma2",
            ],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        match self {
            ModelKind::Model1 => vec!["x1".into(), "x2".into()],
            ModelKind::Model2 => vec!["time".into(), "group".into()],
        }
    }

    /// Builds the model from a dataset with this kind's covariate columns.
    pub fn build(&self, data: &Dataset) -> Result<Box<dyn ModelSpec>> {
        let col = |name: &str| {
            let k = data
                .covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Config(format!("missing covariate column '{name}'")))?;
            Ok::<_, Error>(
                data.observations
                    .iter()
                    .map(|o| o.covariates.column(k).iter().copied().collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
            )
        };
        match self {
            ModelKind::Model1 => {
                let x1 = col("x1")?;
                let x2 = col("x2")?;
                if data.observations.iter().any(|o| o.y.len() != 1) {
                    return Err(Error::Dimension("model1 needs one response per unit".into()));
                }
                Ok(Box::new(NonlinearModel1::new(
                    x1.into_iter().map(|v| v[0]).collect(),
                    x2.into_iter().map(|v| v[0]).collect(),
                )?))
            }
            ModelKind::Model2 => {
                let times = col("time")?;
                let groups = col("group")?
                    .into_iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let g0 = g[0];
                        if g.iter().any(|&v| v != g0) || g0.fract() != 0.0 || !(1.0..=4.0).contains(&g0) {
                            Err(Error::Config(format!("unit {i}: group must be a constant label in 1..=4")))
                        } else {
                            Ok(g0 as u8)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Box::new(MixedModel2::from_times_and_groups(&times, &groups)?))
            }
        }
    }
}

fn default_alphas() -> Vec<f64> {
    vec![0.01, 0.05, 0.10]
}

fn default_seed() -> u64 {
    42
}

fn default_refits() -> usize {
    10
}

/// Simulation settings; optional fields fall back to the model's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub model: ModelKind,
    pub family: String,
    #[serde(default)]
    pub nu: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    pub n: usize,
    pub replications: usize,
    #[serde(default = "default_alphas")]
    pub alpha_levels: Vec<f64>,
    /// Interest parameter names, e.g. `["beta2", "beta3"]`.
    pub interest: Vec<String>,
    /// Defaults to the true values of the interest parameters.
    #[serde(default)]
    pub psi0: Option<Vec<f64>>,
    #[serde(default)]
    pub sided: Sided,
    #[serde(default)]
    pub true_theta: Option<Vec<f64>>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_refits")]
    pub max_refit_attempts: usize,
}

impl SimulationConfig {
    /// Settings of the one-sided test of `beta3` in model 1.
    pub fn one_sided_beta3(n: usize, family: EllipticalFamily, replications: usize) -> Self {
        let mut c = Self::base(ModelKind::Model1, n, family, replications);
        c.interest = vec!["beta3".into()];
        c.sided = Sided::OneSidedGeq;
        c
    }

    /// Settings of the joint test of `beta2 = beta3 = 0` in model 1.
    pub fn joint_beta23(n: usize, family: EllipticalFamily, replications: usize) -> Self {
        let mut c = Self::base(ModelKind::Model1, n, family, replications);
        c.interest = vec!["beta2".into(), "beta3".into()];
        c
    }

    /// Settings of the joint test of the group effects in model 2.
    pub fn group_effects(n: usize, family: EllipticalFamily, replications: usize) -> Self {
        let mut c = Self::base(ModelKind::Model2, n, family, replications);
        c.interest = vec!["beta2".into(), "beta3".into(), "beta4".into()];
        c
    }

    fn base(model: ModelKind, n: usize, family: EllipticalFamily, replications: usize) -> Self {
        let (nu, lambda) = match family {
            EllipticalFamily::Normal => (None, None),
            EllipticalFamily::StudentT { nu } => (Some(nu), None),
            EllipticalFamily::PowerExponential { lambda } => (None, Some(lambda)),
        };
        SimulationConfig {
            model,
            family: family.name().into(),
            nu,
            lambda,
            n,
            replications,
            alpha_levels: default_alphas(),
            interest: Vec::new(),
            psi0: None,
            sided: Sided::TwoSided,
            true_theta: None,
            seed: default_seed(),
            max_refit_attempts: default_refits(),
        }
    }

    pub fn family(&self) -> Result<EllipticalFamily> {
        EllipticalFamily::from_name(&self.family, self.nu, self.lambda)
    }

    pub fn theta(&self) -> Result<DVector<f64>> {
        let t = self
            .true_theta
            .clone()
            .unwrap_or_else(|| self.model.default_theta());
        let p = self.model.param_names().len();
        if t.len() != p {
            return Err(Error::Config(format!("true_theta needs {p} values, got {}", t.len())));
        }
        Ok(DVector::from_vec(t))
    }

    pub fn hypothesis(&self) -> Result<Hypothesis> {
        let names = self.model.param_names();
        let interest = self
            .interest
            .iter()
            .map(|s| {
                names
                    .iter()
                    .position(|n| n == s)
                    .ok_or_else(|| Error::Config(format!("unknown interest parameter '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let theta = self.theta()?;
        let psi0 = self
            .psi0
            .clone()
            .unwrap_or_else(|| interest.iter().map(|&j| theta[j]).collect());
        Hypothesis::new(Restriction::new(interest, psi0, names.len())?, self.sided)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.alpha_levels.is_empty()
            || self.alpha_levels.iter().any(|a| !(*a > 0.0 && *a < 1.0))
            || self.alpha_levels.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "alpha_levels must be strictly increasing values in (0, 1)".into(),
            ));
        }
        self.family()?;
        let h = self.hypothesis()?;
        let theta = self.theta()?;
        for (k, &j) in h.restriction.interest.iter().enumerate() {
            if theta[j] != h.restriction.psi0[k] {
                return Err(Error::Config(format!(
                    "true value of {} is not the null value",
                    self.interest[k]
                )));
            }
        }
        if self.n <= theta.len() {
            return Err(Error::Config(format!(
                "n = {} is too small for {} parameters",
                self.n,
                theta.len()
            )));
        }
        Ok(())
    }
}

/// Fixed design of one run: covariates and cluster layout, no responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub kind: ModelKind,
    pub covariates: Vec<DMatrix<f64>>,
}

impl Design {
    pub fn draw(kind: ModelKind, n: usize, seed: u64) -> Design {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let covariates = match kind {
            ModelKind::Model1 => (0..n)
                .map(|_| {
                    let x1: f64 = rng.random();
                    let x2: f64 = rng.random();
                    DMatrix::from_row_slice(1, 2, &[x1, x2])
                })
                .collect(),
            ModelKind::Model2 => (0..n)
                .map(|i| {
                    let q = rng.random_range(1..=MODEL2_TIMES.len());
                    let group = (i % 4 + 1) as f64;
                    DMatrix::from_fn(q, 2, |j, k| if k == 0 { MODEL2_TIMES[j] } else { group })
                })
                .collect(),
        };
        Design { kind, covariates }
    }

    pub fn dataset(&self, y: Vec<DVector<f64>>) -> Result<Dataset> {
        let observations = self
            .covariates
            .iter()
            .zip(y)
            .map(|(c, y)| Observation {
                y,
                covariates: c.clone(),
            })
            .collect();
        Dataset::new(observations, self.kind.covariate_names())
    }

    pub fn model(&self) -> Result<Box<dyn ModelSpec>> {
        let y = self
            .covariates
            .iter()
            .map(|c| DVector::zeros(c.nrows()))
            .collect();
        self.kind.build(&self.dataset(y)?)
    }
}

/// Draws `Y_i = mu_i(theta) + P_i(theta) e_i` with spherical `e_i`.
pub fn draw_responses<R: Rng + ?Sized>(
    model: &dyn ModelSpec,
    family: &EllipticalFamily,
    theta: &DVector<f64>,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    (0..model.n_obs())
        .map(|i| {
            let chol = nalgebra::Cholesky::new(model.scatter(i, theta))
                .ok_or(Error::NotPositiveDefinite { index: i })?;
            let e = family.sample_spherical(model.dim(i), rng);
            Ok(model.mean(i, theta) + chol.l() * e)
        })
        .collect()
}

fn replication_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng
}

/// The first dataset replication 0 would analyse.
pub fn synthetic_dataset(config: &SimulationConfig) -> Result<Dataset> {
    config.validate()?;
    let design = Design::draw(config.model, config.n, config.seed);
    let model = design.model()?;
    let family = config.family()?;
    let mut rng = replication_rng(config.seed, 0);
    let y = draw_responses(model.as_ref(), &family, &config.theta()?, &mut rng)?;
    design.dataset(y)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionRate {
    pub statistic: String,
    pub alpha: f64,
    pub rate: f64,
    pub stderr: f64,
    pub reps: usize,
    pub failures: usize,
}

/// p-values of one successful replication, in [`STATISTICS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub replication: usize,
    pub pvalues: [Option<f64>; 5],
    pub report: TestReport,
}

#[derive(Debug, Clone)]
pub struct SimulationSummary {
    pub statistics: Vec<String>,
    pub rates: Vec<RejectionRate>,
    /// Successful replications in index order.
    pub replications: Vec<ReplicationResult>,
    pub failure_count: usize,
    pub requested: usize,
    pub flag_counts: BTreeMap<String, usize>,
    pub wall_time: Duration,
}

impl SimulationSummary {
    /// Sorted p-values of one statistic.
    pub fn pvalues(&self, statistic: &str) -> Result<Vec<f64>> {
        let k = STATISTICS
            .iter()
            .position(|s| *s == statistic)
            .ok_or_else(|| Error::Config(format!("unknown statistic '{statistic}'")))?;
        let mut v: Vec<f64> = self
            .replications
            .iter()
            .filter_map(|r| r.pvalues[k])
            .collect();
        v.sort_by(f64::total_cmp);
        Ok(v)
    }

    pub fn rate(&self, statistic: &str, alpha: f64) -> Option<f64> {
        self.rates
            .iter()
            .find(|r| r.statistic == statistic && r.alpha == alpha)
            .map(|r| r.rate)
    }
}

fn one_replication(
    model: &dyn ModelSpec,
    family: &EllipticalFamily,
    theta: &DVector<f64>,
    hypothesis: &Hypothesis,
    opts: &FitOptions,
    seed: u64,
    k: usize,
    attempts: usize,
) -> Option<ReplicationResult> {
    let mut rng = replication_rng(seed, k);
    for _ in 0..attempts.max(1) {
        let Ok(y) = draw_responses(model, family, theta, &mut rng) else {
            return None;
        };
        if let Ok(report) = run_test(model, family, &y, hypothesis, opts) {
            let pvalues = [
                report.p_r,
                report.p_r_star,
                Some(report.p_lr),
                Some(report.p_lr_star),
                Some(report.p_lr_star2),
            ];
            return Some(ReplicationResult {
                replication: k,
                pvalues,
                report,
            });
        }
    }
    None
}

/// Runs the study on `threads` workers (all cores if `None`).
pub fn run_simulation(config: &SimulationConfig, threads: Option<usize>) -> Result<SimulationSummary> {
    config.validate()?;
    let start = Instant::now();
    let family = config.family()?;
    let theta = config.theta()?;
    let hypothesis = config.hypothesis()?;
    let design = Design::draw(config.model, config.n, config.seed);
    let model = design.model()?;
    crate::model::check_theta(model.as_ref(), &theta)?;
    let opts = FitOptions::default();

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Simulation(format!("thread pool: {e}")))?;
    let results: Vec<Option<ReplicationResult>> = pool.install(|| {
        (0..config.replications)
            .into_par_iter()
            .map(|k| {
                one_replication(
                    model.as_ref(),
                    &family,
                    &theta,
                    &hypothesis,
                    &opts,
                    config.seed,
                    k,
                    config.max_refit_attempts,
                )
            })
            .collect()
    });

    let failure_count = results.iter().filter(|r| r.is_none()).count();
    if failure_count as f64 > 0.02 * config.replications as f64 {
        return Err(Error::Simulation(format!(
            "{failure_count} of {} replications failed after {} attempts each",
            config.replications, config.max_refit_attempts
        )));
    }
    let replications: Vec<ReplicationResult> = results.into_iter().flatten().collect();
    let mut flag_counts = BTreeMap::new();
    for r in &replications {
        for f in &r.report.flags {
            *flag_counts.entry(f.as_str().to_string()).or_insert(0) += 1;
        }
    }

    let statistics: Vec<String> = if hypothesis.q() == 1 {
        STATISTICS.iter().map(|s| s.to_string()).collect()
    } else {
        STATISTICS[2..].iter().map(|s| s.to_string()).collect()
    };
    let mut rates = Vec::new();
    for name in &statistics {
        let k = STATISTICS.iter().position(|s| s == name).unwrap();
        for &alpha in &config.alpha_levels {
            let reps = replications.len();
            let rejected = replications
                .iter()
                .filter(|r| r.pvalues[k].is_some_and(|p| p < alpha))
                .count();
            let rate = if reps == 0 { 0.0 } else { rejected as f64 / reps as f64 };
            let stderr = if reps == 0 {
                0.0
            } else {
                (rate * (1.0 - rate) / reps as f64).sqrt()
            };
            rates.push(RejectionRate {
                statistic: name.clone(),
                alpha,
                rate,
                stderr,
                reps,
                failures: failure_count,
            });
        }
    }
    Ok(SimulationSummary {
        statistics,
        rates,
        replications,
        failure_count,
        requested: config.replications,
        flag_counts,
        wall_time: start.elapsed(),
    })
}

/// Relative discrepancy `(ECDF(p) - p) / p` on the standard grid.
pub fn discrepancy_from_pvalues(pvalues: &[f64]) -> Result<Vec<(f64, f64)>> {
    if pvalues.is_empty() {
        return Err(Error::Simulation("no p-values to compare".into()));
    }
    let mut sorted = pvalues.to_vec();
    sorted.sort_by(f64::total_cmp);
    let r = sorted.len() as f64;
    Ok(discrepancy_grid()
        .into_iter()
        .map(|p| {
            let below = sorted.partition_point(|&x| x <= p) as f64;
            (p, (below / r - p) / p)
        })
        .collect())
}

pub fn pvalue_discrepancy(summary: &SimulationSummary, statistic: &str) -> Result<Vec<(f64, f64)>> {
    discrepancy_from_pvalues(&summary.pvalues(statistic)?)
}

/// `statistic,alpha,rate,stderr,reps,failures`
pub fn write_summary_csv<W: Write>(summary: &SimulationSummary, mut out: W) -> std::io::Result<()> {
    writeln!(out, "statistic,alpha,rate,stderr,reps,failures")?;
    for r in &summary.rates {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.statistic, r.alpha, r.rate, r.stderr, r.reps, r.failures
        )?;
    }
    Ok(())
}

/// Wide table, one row per successful replication; absent statistics are empty.
pub fn write_pvalues_csv<W: Write>(summary: &SimulationSummary, mut out: W) -> std::io::Result<()> {
    writeln!(out, "replication,{}", STATISTICS.join(","))?;
    for r in &summary.replications {
        let cells: Vec<String> = r
            .pvalues
            .iter()
            .map(|p| p.map(|v| v.to_string()).unwrap_or_default())
            .collect();
        writeln!(out, "{},{}", r.replication, cells.join(","))?;
    }
    Ok(())
}

/// `asymptotic_p,relative_discrepancy`
pub fn write_discrepancy_csv<W: Write>(table: &[(f64, f64)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "asymptotic_p,relative_discrepancy")?;
    for (p, d) in table {
        writeln!(out, "{p},{d}")?;
    }
    Ok(())
}
