//! Long-format datasets: one CSV row per response component.
//!
//! Columns are `unit_id,row_index,y` followed by any number of named
//! covariates. Rows of a unit may appear in any order; units keep the order
//! of their first appearance.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ellip_lrt::model::{Dataset, Observation};
use ellip_lrt::montecarlo::STATISTICS;
use nalgebra::{DMatrix, DVector};

use crate::error::{io_error, CliError, CliResult};

const KEY_COLUMNS: [&str; 3] = ["unit_id", "row_index", "y"];

fn parse_number(text: &str, line: u64, column: &str) -> CliResult<f64> {
    let v: f64 = text.trim().parse().map_err(|_| {
        CliError::Input(format!("row {line}, column '{column}': '{text}' is not a number"))
    })?;
    if !v.is_finite() {
        return Err(CliError::Input(format!(
            "row {line}, column '{column}': value must be finite"
        )));
    }
    Ok(v)
}

pub fn read_dataset<R: Read>(input: R) -> CliResult<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("cannot read header: {e}")))?
        .clone();
    for (k, name) in KEY_COLUMNS.iter().enumerate() {
        if headers.get(k) != Some(*name) {
            return Err(CliError::Input(format!(
                "column {} must be '{name}' (expected header unit_id,row_index,y,...)",
                k + 1
            )));
        }
    }
    let covariate_names: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();

    let mut order: Vec<String> = Vec::new();
    let mut units: HashMap<String, Vec<(i64, f64, Vec<f64>)>> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CliError::Input(format!("malformed CSV: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        let unit = record[0].to_string();
        let row: i64 = record[1].parse().map_err(|_| {
            CliError::Input(format!(
                "row {line}, column 'row_index': '{}' is not an integer",
                &record[1]
            ))
        })?;
        let y = parse_number(&record[2], line, "y")?;
        let covs = covariate_names
            .iter()
            .enumerate()
            .map(|(k, name)| parse_number(&record[k + 3], line, name))
            .collect::<CliResult<Vec<_>>>()?;
        let rows = units.entry(unit.clone()).or_insert_with(|| {
            order.push(unit.clone());
            Vec::new()
        });
        if rows.iter().any(|r| r.0 == row) {
            return Err(CliError::Input(format!(
                "row {line}: unit '{unit}' repeats row_index {row}"
            )));
        }
        rows.push((row, y, covs));
    }
    if order.is_empty() {
        return Err(CliError::Input("dataset has no rows".into()));
    }

    let observations = order
        .iter()
        .map(|u| {
            let mut rows = units.remove(u).unwrap_or_default();
            rows.sort_by_key(|r| r.0);
            let q = rows.len();
            Observation {
                y: DVector::from_iterator(q, rows.iter().map(|r| r.1)),
                covariates: DMatrix::from_fn(q, covariate_names.len(), |j, k| rows[j].2[k]),
            }
        })
        .collect();
    Ok(Dataset::new(observations, covariate_names)?)
}

pub fn read_dataset_file(path: &Path) -> CliResult<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| io_error(path, e))?;
    read_dataset(file)
}

pub fn write_dataset<W: Write>(data: &Dataset, mut out: W) -> std::io::Result<()> {
    let mut header = KEY_COLUMNS.join(",");
    for c in &data.covariate_names {
        header.push(',');
        header.push_str(c);
    }
    writeln!(out, "{header}")?;
    for (i, obs) in data.observations.iter().enumerate() {
        for j in 0..obs.y.len() {
            write!(out, "{i},{j},{}", obs.y[j])?;
            for v in obs.covariates.row(j).iter() {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Non-empty values of one statistic's column in a p-values table.
pub fn read_pvalue_column<R: Read>(input: R, statistic: &str) -> CliResult<Vec<f64>> {
    if !STATISTICS.contains(&statistic) {
        return Err(CliError::Input(format!(
            "unknown statistic '{statistic}' (expected one of {})",
            STATISTICS.join(", ")
        )));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("cannot read header: {e}")))?
        .clone();
    let k = headers
        .iter()
        .position(|h| h == statistic)
        .ok_or_else(|| CliError::Input(format!("missing column '{statistic}'")))?;
    let mut values = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CliError::Input(format!("malformed CSV: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = record.get(k).unwrap_or("");
        if !cell.is_empty() {
            values.push(parse_number(cell, line, statistic)?);
        }
    }
    Ok(values)
}
