use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ellip_lrt::inference::{fit, run_test, FitOptions, Hypothesis, Sided};
use ellip_lrt::model::{Dataset, LinearModel, ModelSpec, Restriction};
use ellip_lrt::montecarlo::{
    discrepancy_from_pvalues, run_simulation, synthetic_dataset, write_discrepancy_csv,
    write_pvalues_csv, write_summary_csv, ModelKind, SimulationConfig,
};
use ellip_lrt::EllipticalFamily;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::Value;

use crate::data::{read_dataset_file, read_pvalue_column, write_dataset};
use crate::error::{io_error, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Model1,
    Model2,
    Iid,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub model: ModelChoice,
    /// Covariate columns of a linear model.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Drop the intercept column of a linear model.
    #[arg(long)]
    pub no_intercept: bool,
    /// Fixed scatter `sigma2 * I` for the iid and linear models.
    #[arg(long)]
    pub known_sigma2: Option<f64>,
    /// normal, student_t or power_exponential.
    #[arg(long, default_value = "normal")]
    pub family: String,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OptimizerArgs {
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub score_tol: Option<f64>,
}

impl OptimizerArgs {
    fn options(&self) -> CliResult<FitOptions> {
        let mut o = FitOptions::default();
        if let Some(m) = self.max_iter {
            if m == 0 {
                return Err(CliError::Input("--max-iter must be positive".into()));
            }
            o.max_iter = m;
        }
        if let Some(t) = self.score_tol {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::Input("--score-tol must be positive".into()));
            }
            o.score_tol = t;
        }
        Ok(o)
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Report file; standard output if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Interest parameters by name or zero-based index.
    #[arg(long, value_delimiter = ',', required = true)]
    pub interest: Vec<String>,
    /// Hypothesized values; zeros if absent.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub psi0: Vec<f64>,
    /// two, lower or upper.
    #[arg(long, default_value = "two")]
    pub sided: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML file with the simulation settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// model1 or model2, when no config file is given.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub interest: Vec<String>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub psi0: Vec<f64>,
    #[arg(long)]
    pub sided: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Defaults to the config's seed, then to 42.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "ELLIP_LRT_THREADS")]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out_summary: Option<PathBuf>,
    #[arg(long)]
    pub out_pvalues: Option<PathBuf>,
    /// Write the first synthetic dataset to this file instead of simulating.
    #[arg(long)]
    pub emit_one: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiscrepancyArgs {
    /// p-values table written by `simulate --out-pvalues`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub stat: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn family(name: &str, nu: Option<f64>, lambda: Option<f64>) -> CliResult<EllipticalFamily> {
    EllipticalFamily::from_name(name, nu, lambda).map_err(|e| CliError::Input(e.to_string()))
}

fn column(data: &Dataset, name: &str) -> CliResult<Vec<DVector<f64>>> {
    data.column(name)
        .ok_or_else(|| CliError::Input(format!("missing covariate column '{name}'")))
}

pub fn build_model(args: &ModelArgs, data: &Dataset) -> CliResult<Box<dyn ModelSpec>> {
    let structural = matches!(args.model, ModelChoice::Model1 | ModelChoice::Model2);
    if structural && args.known_sigma2.is_some() {
        return Err(CliError::Input("--known-sigma2 applies to the iid and linear models".into()));
    }
    if args.model != ModelChoice::Linear && (!args.covariates.is_empty() || args.no_intercept) {
        return Err(CliError::Input("--covariates and --no-intercept apply to the linear model".into()));
    }
    if let Some(s) = args.known_sigma2 {
        if !(s > 0.0 && s.is_finite()) {
            return Err(CliError::Input("--known-sigma2 must be positive".into()));
        }
    }
    let n = data.n();
    let scatter = |q: usize| DMatrix::identity(q, q) * args.known_sigma2.unwrap_or(1.0);
    match args.model {
        ModelChoice::Model1 => Ok(ModelKind::Model1.build(data)?),
        ModelChoice::Model2 => Ok(ModelKind::Model2.build(data)?),
        ModelChoice::Iid => {
            if let Some(i) = data.observations.iter().position(|o| o.y.len() != 1) {
                return Err(CliError::Input(format!(
                    "the iid model needs one row per unit; unit {i} has {}",
                    data.observations[i].y.len()
                )));
            }
            Ok(match args.known_sigma2 {
                Some(s) => Box::new(LinearModel::mean_only(n, s)?),
                None => Box::new(LinearModel::iid(n)?),
            })
        }
        ModelChoice::Linear => {
            let cols = args
                .covariates
                .iter()
                .map(|c| column(data, c))
                .collect::<CliResult<Vec<_>>>()?;
            let mut names: Vec<String> = Vec::new();
            if !args.no_intercept {
                names.push("intercept".into());
            }
            names.extend(args.covariates.iter().cloned());
            if names.is_empty() {
                return Err(CliError::Input("the linear model has no columns".into()));
            }
            let offset = usize::from(!args.no_intercept);
            let x: Vec<DMatrix<f64>> = data
                .observations
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    DMatrix::from_fn(o.y.len(), names.len(), |j, k| {
                        if k < offset {
                            1.0
                        } else {
                            cols[k - offset][i][j]
                        }
                    })
                })
                .collect();
            Ok(match args.known_sigma2 {
                Some(_) => {
                    let s = data.observations.iter().map(|o| scatter(o.y.len())).collect();
                    Box::new(LinearModel::with_known_scatter(x, names, s)?)
                }
                None => Box::new(LinearModel::new(x, names)?),
            })
        }
    }
}

fn parse_interest(tokens: &[String], names: &[String]) -> CliResult<Vec<usize>> {
    tokens
        .iter()
        .map(|t| {
            names
                .iter()
                .position(|n| n == t)
                .or_else(|| t.parse::<usize>().ok().filter(|&j| j < names.len()))
                .ok_or_else(|| {
                    CliError::Input(format!(
                        "unknown interest parameter '{t}' (parameters: {})",
                        names.join(", ")
                    ))
                })
        })
        .collect()
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| io_error(p, e)),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::Input(format!("standard output: {e}"))),
    }
}

fn flatten(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, rows);
            }
        }
        Value::Array(items) => {
            for (i, x) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, rows);
            }
        }
        Value::String(s) => rows.push((prefix.to_string(), s.clone())),
        Value::Null => rows.push((prefix.to_string(), String::new())),
        other => rows.push((prefix.to_string(), other.to_string())),
    }
}

/// JSON, or a two-column `field,value` table with indexed array entries.
fn render<T: Serialize>(report: &T, format: Format) -> CliResult<Vec<u8>> {
    let value = serde_json::to_value(report).map_err(|e| CliError::Numerical(e.to_string()))?;
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&value)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            s.push('\n');
            Ok(s.into_bytes())
        }
        Format::Csv => {
            let mut rows = Vec::new();
            flatten("", &value, &mut rows);
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| CliError::Numerical(e.to_string());
            w.write_record(["field", "value"]).map_err(io)?;
            for (k, v) in rows {
                w.write_record([k, v]).map_err(io)?;
            }
            w.into_inner().map_err(|e| CliError::Numerical(e.to_string()))
        }
    }
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<u8> {
    let fam = family(&args.model.family, args.model.nu, args.model.lambda)?;
    let data = read_dataset_file(&args.data)?;
    let model = build_model(&args.model, &data)?;
    let opts = args.optimizer.options()?;
    let result = fit(model.as_ref(), &fam, &data.responses(), None, None, &opts)?;
    write_output(args.out.as_deref(), &render(&result.report(model.param_names()), args.format)?)?;
    if result.converged {
        Ok(0)
    } else {
        eprintln!("fit did not converge (score norm {:e})", result.score_norm);
        Ok(2)
    }
}

pub fn cmd_test(args: &TestArgs) -> CliResult<u8> {
    let fam = family(&args.model.family, args.model.nu, args.model.lambda)?;
    let data = read_dataset_file(&args.data)?;
    let model = build_model(&args.model, &data)?;
    let names = model.param_names();
    let interest = parse_interest(&args.interest, &names)?;
    let psi0 = if args.psi0.is_empty() {
        vec![0.0; interest.len()]
    } else {
        args.psi0.clone()
    };
    let sided = Sided::parse(&args.sided)?;
    let hypothesis = Hypothesis::new(Restriction::new(interest, psi0, names.len())?, sided)?;
    let mut report = run_test(
        model.as_ref(),
        &fam,
        &data.responses(),
        &hypothesis,
        &args.optimizer.options()?,
    )?;
    report.interest_names = report.interest.iter().map(|&j| names[j].clone()).collect();
    write_output(args.out.as_deref(), &render(&report, args.format)?)?;
    Ok(0)
}

fn simulation_config(args: &SimulateArgs) -> CliResult<SimulationConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            toml::from_str::<SimulationConfig>(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        }
        None => {
            let model = args
                .model
                .as_deref()
                .ok_or_else(|| CliError::Input("either --config or --model is required".into()))?;
            let kind = ModelKind::parse(model)?;
            let n = args.n.ok_or_else(|| CliError::Input("--n is required without --config".into()))?;
            let name = args.family.as_deref().unwrap_or("normal");
            let fam = family(name, args.nu, args.lambda)?;
            let mut c = match kind {
                ModelKind::Model1 => SimulationConfig::joint_beta23(n, fam, 1),
                ModelKind::Model2 => SimulationConfig::group_effects(n, fam, 1),
            };
            c.replications = 1000;
            if args.interest.is_empty() {
                return Err(CliError::Input("--interest is required without --config".into()));
            }
            c
        }
    };
    if args.config.is_some() {
        if let Some(name) = &args.family {
            cfg.family = name.clone();
            cfg.nu = args.nu;
            cfg.lambda = args.lambda;
        }
        if let Some(n) = args.n {
            cfg.n = n;
        }
    }
    if !args.interest.is_empty() {
        cfg.interest = args.interest.clone();
    }
    if !args.psi0.is_empty() {
        cfg.psi0 = Some(args.psi0.clone());
    }
    if let Some(s) = &args.sided {
        cfg.sided = Sided::parse(s)?;
    }
    if let Some(r) = args.reps {
        cfg.replications = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<u8> {
    let cfg = simulation_config(args)?;
    if let Some(path) = &args.emit_one {
        let data = synthetic_dataset(&cfg)?;
        let mut bytes = Vec::new();
        write_dataset(&data, &mut bytes).map_err(|e| io_error(path, e))?;
        write_output(Some(path), &bytes)?;
        return Ok(0);
    }
    if args.threads == Some(0) {
        return Err(CliError::Input("--threads must be positive".into()));
    }
    let summary = run_simulation(&cfg, args.threads)?;
    let mut bytes = Vec::new();
    write_summary_csv(&summary, &mut bytes).map_err(|e| CliError::Numerical(e.to_string()))?;
    write_output(args.out_summary.as_deref(), &bytes)?;
    if let Some(path) = &args.out_pvalues {
        let mut bytes = Vec::new();
        write_pvalues_csv(&summary, &mut bytes).map_err(|e| io_error(path, e))?;
        write_output(Some(path), &bytes)?;
    }
    eprintln!(
        "{} of {} replications completed in {:.1} s",
        summary.replications.len(),
        summary.requested,
        summary.wall_time.as_secs_f64()
    );
    if !summary.flag_counts.is_empty() {
        let flags: Vec<String> = summary
            .flag_counts
            .iter()
            .map(|(k, v)| format!("{k}: {v}"))
            .collect();
        eprintln!("flags: {}", flags.join(", "));
    }
    Ok(0)
}

pub fn cmd_discrepancy(args: &DiscrepancyArgs) -> CliResult<u8> {
    let file = std::fs::File::open(&args.input).map_err(|e| io_error(&args.input, e))?;
    let pvalues = read_pvalue_column(file, &args.stat)?;
    if pvalues.is_empty() {
        return Err(CliError::Input(format!("column '{}' has no p-values", args.stat)));
    }
    let table = discrepancy_from_pvalues(&pvalues)?;
    let mut bytes = Vec::new();
    write_discrepancy_csv(&table, &mut bytes).map_err(|e| CliError::Numerical(e.to_string()))?;
    write_output(args.out.as_deref(), &bytes)?;
    Ok(0)
}
