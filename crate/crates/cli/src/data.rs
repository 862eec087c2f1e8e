//! CSV ingestion and export of datasets.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use multimed_core::model::{validate_dataset, Dataset, MediatorTransform, ObservedUnit};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Maps CSV columns onto the roles of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default = "default_treatment")]
    pub treatment: String,
    #[serde(default = "default_outcome")]
    pub outcome: String,
    pub mediators: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Mediator columns modelled on the log scale.
    #[serde(default)]
    pub log: Vec<String>,
    /// Mediator support bound on the modelled scale; 0 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_bound: Option<f64>,
}

fn default_id() -> String {
    "id".into()
}

fn default_treatment() -> String {
    "z".into()
}

fn default_outcome() -> String {
    "y".into()
}

impl Schema {
    /// Schema that reads back a file written by [`write_dataset`].
    pub fn from_dataset(data: &Dataset) -> Self {
        Self {
            id: default_id(),
            treatment: default_treatment(),
            outcome: default_outcome(),
            mediators: data.mediator_names.clone(),
            covariates: data.covariate_names.clone(),
            log: Vec::new(),
            lower_bound: Some(data.lower_bound),
        }
    }

    fn check(&self) -> Result<()> {
        if let Some(l) = self.log.iter().find(|l| !self.mediators.contains(l)) {
            return Err(CliError::Config(format!("log column '{l}' is not a mediator")));
        }
        let mut seen = HashMap::new();
        let roles = [&self.id, &self.treatment, &self.outcome].into_iter().chain(&self.mediators).chain(&self.covariates);
        for c in roles {
            if seen.insert(c.as_str(), ()).is_some() {
                return Err(CliError::Config(format!("column '{c}' is mapped twice")));
            }
        }
        Ok(())
    }
}

/// A validated dataset together with the unit ids in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Loaded {
    pub data: Dataset,
    pub ids: Vec<String>,
}

pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    parse_dataset(&bytes, schema).map_err(|e| match e {
        CliError::Data { message, .. } => CliError::Data {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

fn bad(message: String) -> CliError {
    CliError::Data {
        path: Default::default(),
        message,
    }
}

/// Parses CSV bytes. Line numbers in errors count the header as line 1.
pub fn parse_dataset(bytes: &[u8], schema: &Schema) -> Result<Loaded> {
    schema.check()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| bad(format!("line 1: missing column '{name}'")));
    let id_c = col(&schema.id)?;
    let z_c = col(&schema.treatment)?;
    let y_c = col(&schema.outcome)?;
    let m_c = schema.mediators.iter().map(|m| col(m)).collect::<Result<Vec<_>>>()?;
    let x_c = schema.covariates.iter().map(|x| col(x)).collect::<Result<Vec<_>>>()?;
    let logged: Vec<bool> = schema.mediators.iter().map(|m| schema.log.contains(m)).collect();

    let mut ids = Vec::new();
    let mut first_line: HashMap<String, u64> = HashMap::new();
    let mut units = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("line {line}, column '{}': non-numeric value '{raw}'", &header[c])))
        };
        let id = rec.get(id_c).unwrap_or("").to_string();
        if let Some(prev) = first_line.insert(id.clone(), line) {
            return Err(bad(format!("line {line}, column '{}': duplicate id '{id}' (first on line {prev})", schema.id)));
        }
        let z = match cell(z_c)? {
            v if v == 0.0 => 0,
            v if v == 1.0 => 1,
            v => return Err(bad(format!("line {line}, column '{}': treatment must be 0 or 1, got {v}", schema.treatment))),
        };
        let mut m = Vec::with_capacity(m_c.len());
        for (j, &c) in m_c.iter().enumerate() {
            let v = cell(c)?;
            if logged[j] {
                if v <= 0.0 {
                    return Err(bad(format!("line {line}, column '{}': log of nonpositive value {v}", schema.mediators[j])));
                }
                m.push(v.ln());
            } else {
                m.push(v);
            }
        }
        let y = cell(y_c)?;
        let x = x_c.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        ids.push(id);
        units.push(ObservedUnit::new(z, m, y, x));
    }
    let k = schema.mediators.len();
    let p = schema.covariates.len();
    let mut data = Dataset::new(units, k, p, schema.lower_bound.unwrap_or(0.0));
    data.mediator_names = schema.mediators.clone();
    data.covariate_names = schema.covariates.clone();
    data.transforms = logged.iter().map(|&l| if l { MediatorTransform::Log } else { MediatorTransform::Identity }).collect();
    let data = validate_dataset(data).map_err(|e| match e {
        multimed_core::Error::InvalidDataset(errs) => bad(errs.iter().map(|m| unit_to_line(m)).collect::<Vec<_>>().join("; ")),
        other => bad(other.to_string()),
    })?;
    Ok(Loaded { data, ids })
}

/// Rewrites a validator message `unit i: …` to the file line of unit `i`.
fn unit_to_line(msg: &str) -> String {
    let parsed = msg.strip_prefix("unit ").and_then(|r| r.split_once(':')).and_then(|(i, rest)| Some((i.parse::<usize>().ok()?, rest)));
    match parsed {
        Some((i, rest)) => format!("line {}:{rest}", i + 2),
        None => msg.to_string(),
    }
}

/// Writes the dataset on its modelled scale with columns
/// `id, z, mediators…, y, covariates…`; read it back with
/// [`Schema::from_dataset`].
pub fn write_dataset<W: Write>(w: W, data: &Dataset, ids: &[String]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut head = vec!["id".to_string(), "z".to_string()];
    head.extend(data.mediator_names.iter().cloned());
    head.push("y".into());
    head.extend(data.covariate_names.iter().cloned());
    wtr.write_record(&head)?;
    for (u, id) in data.units.iter().zip(ids) {
        let mut row = vec![id.clone(), u.z.to_string()];
        row.extend(u.m.iter().map(f64::to_string));
        row.push(u.y.to_string());
        row.extend(u.x.iter().map(f64::to_string));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(CliError::io("<dataset>"))?;
    Ok(())
}
