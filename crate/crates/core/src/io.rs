//! File formats: population and observed-trial CSV with a JSON schema
//! sidecar, one-line assignment files, and content hashing.
//!
//! Population CSV header: `id,<covariates...>,y0,y1`. Observed trials
//! replace the outcome pair by `t,yobs`. Reconstructed trials add an
//! `imputed` column naming the filled-in outcome (`y0` or `y1`).
//! Categorical covariates hold integer codes and must be declared in the
//! sidecar, a JSON array of `{name, kind, categories}`; covariates absent
//! from a sidecar are read as continuous. Empty cells are rejected.
//!
//! Plot data (frontier, random-assignment cloud, expected-imbalance
//! trajectory, xi by population size) is written as plain CSV with the
//! shortest round-trip float formatting, so identical runs give identical
//! bytes.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::atastreet::{FrontierPoint, ReferencePoint, ScalingRow};
use crate::counterfactual::{Provenance, ReconstructedTrial};
use crate::error::{Error, Result};
use crate::pocock::TrajectoryPoint;
use crate::trial::{Assignment, CovariateSchema, ObservedTrial, Subject, TrialPopulation};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// `pop.csv` -> `pop.schema.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("schema.json")
}

pub fn schema_to_json(schema: &CovariateSchema) -> Result<String> {
    Ok(serde_json::to_string_pretty(schema)? + "\n")
}

pub fn schema_from_json(text: &str) -> Result<CovariateSchema> {
    let raw: CovariateSchema = serde_json::from_str(text)?;
    CovariateSchema::new(raw.covariates().to_vec())
}

pub fn format_f64(v: f64) -> String {
    // shortest representation that parses back to the same value
    format!("{v}")
}

fn write_rows(header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn names(schema: &CovariateSchema) -> impl Iterator<Item = String> + '_ {
    schema.covariates().iter().map(|c| c.name.clone())
}

pub fn population_to_csv(pop: &TrialPopulation) -> Result<String> {
    let header = std::iter::once("id".to_string())
        .chain(names(pop.schema()))
        .chain(["y0".into(), "y1".into()])
        .collect();
    write_rows(
        header,
        pop.subjects().iter().enumerate().map(|(i, s)| {
            std::iter::once(i.to_string())
                .chain(s.x.iter().map(|&v| format_f64(v)))
                .chain([format_f64(s.y0), format_f64(s.y1)])
                .collect()
        }),
    )
}

pub fn observed_to_csv(obs: &ObservedTrial) -> Result<String> {
    let header = std::iter::once("id".to_string())
        .chain(names(&obs.schema))
        .chain(["t".into(), "yobs".into()])
        .collect();
    write_rows(
        header,
        (0..obs.len()).map(|i| {
            std::iter::once(i.to_string())
                .chain(obs.covariates[i].iter().map(|&v| format_f64(v)))
                .chain([(obs.assignment.treated(i) as u8).to_string(), format_f64(obs.y_obs[i])])
                .collect()
        }),
    )
}

pub fn reconstructed_to_csv(recon: &ReconstructedTrial) -> Result<String> {
    let pop = &recon.population;
    let header = std::iter::once("id".to_string())
        .chain(names(pop.schema()))
        .chain(["y0".into(), "y1".into(), "imputed".into()])
        .collect();
    write_rows(
        header,
        pop.subjects().iter().zip(&recon.provenance).enumerate().map(|(i, (s, p))| {
            let imputed = match p {
                (Provenance::Imputed, _) => "y0",
                (_, Provenance::Imputed) => "y1",
                _ => "",
            };
            std::iter::once(i.to_string())
                .chain(s.x.iter().map(|&v| format_f64(v)))
                .chain([format_f64(s.y0), format_f64(s.y1), imputed.to_string()])
                .collect()
        }),
    )
}

/// Parsed table: covariate header names plus per-row covariates and the
/// trailing columns.
struct Table {
    covariate_names: Vec<String>,
    covariates: Vec<Vec<f64>>,
    tail: Vec<Vec<f64>>,
}

fn read_table(text: &str, tail: &[&str]) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let err = |row: usize, column: &str, message: String| Error::Csv {
        row,
        column: column.to_string(),
        message,
    };
    if header.first().map(String::as_str) != Some("id") {
        return Err(err(1, header.first().map_or("", |s| s), "first column must be `id`".into()));
    }
    if header.len() < 2 + tail.len() || header[header.len() - tail.len()..] != *tail {
        return Err(err(1, "", format!("header must end with {}", tail.join(","))));
    }
    let covariate_names = header[1..header.len() - tail.len()].to_vec();
    let mut covariates = Vec::new();
    let mut tails = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(err(row, "", format!("{} fields, header has {}", record.len(), header.len())));
        }
        let mut values = Vec::with_capacity(header.len() - 1);
        for (col, field) in header.iter().zip(record.iter()).skip(1) {
            if field.is_empty() {
                return Err(err(row, col, "missing value".into()));
            }
            let v: f64 = field
                .parse()
                .map_err(|_| err(row, col, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(row, col, format!("`{field}` is not finite")));
            }
            values.push(v);
        }
        let split = covariate_names.len();
        tails.push(values.split_off(split));
        covariates.push(values);
    }
    Ok(Table {
        covariate_names,
        covariates,
        tail: tails,
    })
}

/// Schema for the header's covariates: declared entries from `declared`
/// (which must name only header columns), continuous otherwise.
fn resolve_schema(header: &[String], declared: Option<&CovariateSchema>) -> Result<CovariateSchema> {
    let Some(declared) = declared else {
        return CovariateSchema::new(header.iter().map(|n| crate::trial::Covariate::continuous(n.clone())).collect());
    };
    for c in declared.covariates() {
        if !header.contains(&c.name) {
            return Err(Error::Schema(format!("schema declares `{}`, missing from the csv header", c.name)));
        }
    }
    CovariateSchema::new(
        header
            .iter()
            .map(|n| {
                declared
                    .covariates()
                    .iter()
                    .find(|c| &c.name == n)
                    .cloned()
                    .unwrap_or_else(|| crate::trial::Covariate::continuous(n.clone()))
            })
            .collect(),
    )
}

pub fn population_from_csv(text: &str, schema: Option<&CovariateSchema>) -> Result<TrialPopulation> {
    let table = read_table(text, &["y0", "y1"])?;
    let schema = resolve_schema(&table.covariate_names, schema)?;
    let subjects = table
        .covariates
        .into_iter()
        .zip(table.tail)
        .map(|(x, y)| Subject::new(x, y[0], y[1]))
        .collect();
    TrialPopulation::new(schema, subjects)
}

pub fn observed_from_csv(text: &str, schema: Option<&CovariateSchema>) -> Result<ObservedTrial> {
    let table = read_table(text, &["t", "yobs"])?;
    let schema = resolve_schema(&table.covariate_names, schema)?;
    let mut bits = Vec::with_capacity(table.tail.len());
    for (k, t) in table.tail.iter().enumerate() {
        match t[0] {
            0.0 => bits.push(false),
            1.0 => bits.push(true),
            other => {
                return Err(Error::Csv {
                    row: k + 2,
                    column: "t".into(),
                    message: format!("treatment flag {other} is not 0 or 1"),
                })
            }
        }
    }
    let y_obs = table.tail.iter().map(|t| t[1]).collect();
    ObservedTrial::new(schema, table.covariates, Assignment::new(bits), y_obs)
}

fn read_sidecar(csv: &Path, schema: Option<&Path>) -> Result<Option<CovariateSchema>> {
    let path = match schema {
        Some(p) => p.to_path_buf(),
        None => {
            let p = sidecar_path(csv);
            if !p.exists() {
                return Ok(None);
            }
            p
        }
    };
    Ok(Some(schema_from_json(&fs::read_to_string(path)?)?))
}

/// Reads a population CSV; the schema comes from `schema`, else from the
/// sidecar next to the CSV if present.
pub fn load_population(csv: &Path, schema: Option<&Path>) -> Result<TrialPopulation> {
    let declared = read_sidecar(csv, schema)?;
    population_from_csv(&fs::read_to_string(csv)?, declared.as_ref())
}

pub fn load_observed(csv: &Path, schema: Option<&Path>) -> Result<ObservedTrial> {
    let declared = read_sidecar(csv, schema)?;
    observed_from_csv(&fs::read_to_string(csv)?, declared.as_ref())
}

/// Writes the CSV and its schema sidecar.
pub fn save_population(pop: &TrialPopulation, csv: &Path) -> Result<()> {
    fs::write(csv, population_to_csv(pop)?)?;
    fs::write(sidecar_path(csv), schema_to_json(pop.schema())?)?;
    Ok(())
}

pub fn save_observed(obs: &ObservedTrial, csv: &Path) -> Result<()> {
    fs::write(csv, observed_to_csv(obs)?)?;
    fs::write(sidecar_path(csv), schema_to_json(&obs.schema)?)?;
    Ok(())
}

/// Frontier plot data: `lambda,u,mate,status`, in sweep order.
pub fn frontier_to_csv(points: &[FrontierPoint]) -> Result<String> {
    write_rows(
        ["lambda", "u", "mate", "status"].map(String::from).to_vec(),
        points.iter().map(|p| {
            vec![
                format_f64(p.lambda),
                format_f64(p.u_value),
                format_f64(p.mate_value),
                p.status.as_str().to_string(),
            ]
        }),
    )
}

/// Random-assignment cloud: `u,mate`.
pub fn reference_to_csv(points: &[ReferencePoint]) -> Result<String> {
    write_rows(
        ["u", "mate"].map(String::from).to_vec(),
        points.iter().map(|p| vec![format_f64(p.u), format_f64(p.mate)]),
    )
}

/// Expected-imbalance trajectory: `step,expected_u,draws`.
pub fn trajectory_to_csv(points: &[TrajectoryPoint]) -> Result<String> {
    write_rows(
        ["step", "expected_u", "draws"].map(String::from).to_vec(),
        points
            .iter()
            .map(|p| vec![p.step.to_string(), format_f64(p.expected_u), p.draws.to_string()]),
    )
}

/// `size,mean_xi,sd_xi,replicates`.
pub fn scaling_to_csv(rows: &[ScalingRow]) -> Result<String> {
    write_rows(
        ["size", "mean_xi", "sd_xi", "replicates"].map(String::from).to_vec(),
        rows.iter().map(|r| {
            vec![
                r.size.to_string(),
                format_f64(r.mean_xi),
                format_f64(r.sd_xi),
                r.replicates.to_string(),
            ]
        }),
    )
}

/// Arbitrary string table (header plus rows).
pub fn table_to_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    write_rows(header.iter().map(|h| h.to_string()).collect(), rows)
}

pub fn read_assignment(path: &Path) -> Result<Assignment> {
    fs::read_to_string(path)?.parse()
}

pub fn assignment_to_line(a: &Assignment) -> String {
    format!("{a}\n")
}
