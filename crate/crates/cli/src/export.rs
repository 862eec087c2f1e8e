//! Reporting tables built from a finished artifact directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};
use crate::output::{num, Stamp, Table};
use crate::run::{SENSITIVITY_BOUNDS_FILE, SENSITIVITY_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    SummaryText,
}

/// One row of a CSV artifact keyed by header name.
struct Rows {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Rows {
    fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CliError::MissingArtifact(path.to_path_buf()));
        }
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.iter().map(str::to_string).collect();
        let rows = rdr.records().map(|r| r.map(|r| r.iter().map(str::to_string).collect())).collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str, path: &Path) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| CliError::Data {
            path: path.to_path_buf(),
            message: format!("line 1: missing column '{name}'"),
        })
    }
}

/// Posterior summary of one estimand as printed in reports.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Entry {
    fn cell(&self) -> String {
        if self.mean.is_finite() {
            format!("{:.2} ({:.2})", self.mean, self.sd)
        } else {
            "-".to_string()
        }
    }
}

fn entries(rows: &Rows, path: &Path, key: &[&str]) -> Result<Vec<Entry>> {
    let keys = key.iter().map(|k| rows.col(k, path)).collect::<Result<Vec<_>>>()?;
    let [m, s, lo, hi] = ["mean", "sd", "lo", "hi"].map(|c| rows.col(c, path));
    let (m, s, lo, hi) = (m?, s?, lo?, hi?);
    rows.rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let f = |c: usize| -> Result<f64> {
                r[c].parse().map_err(|_| CliError::Data {
                    path: path.to_path_buf(),
                    message: format!("line {}, column '{}': non-numeric value '{}'", i + 2, rows.header[c], r[c]),
                })
            };
            Ok(Entry {
                name: keys.iter().map(|&k| r[k].as_str()).collect::<Vec<_>>().join("/"),
                mean: f(m)?,
                sd: f(s)?,
                lo: f(lo)?,
                hi: f(hi)?,
            })
        })
        .collect()
}

/// Stratum effects arranged with one row per effect type and one column
/// per mediator subset.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalTable {
    pub subsets: Vec<String>,
    pub rows: Vec<(String, Vec<Entry>)>,
}

fn principal_table(list: Vec<Entry>) -> PrincipalTable {
    let mut subsets: Vec<String> = Vec::new();
    let mut rows: Vec<(String, Vec<Entry>)> = Vec::new();
    for e in list {
        let (sub, stratum) = e.name.split_once('/').unwrap_or((&e.name, ""));
        let (sub, stratum) = (sub.to_string(), stratum.to_string());
        if !subsets.contains(&sub) {
            subsets.push(sub);
        }
        match rows.iter_mut().find(|(s, _)| *s == stratum) {
            Some((_, v)) => v.push(e),
            None => rows.push((stratum, vec![e])),
        }
    }
    PrincipalTable { subsets, rows }
}

pub struct Exported {
    pub effects: Vec<Entry>,
    pub principal: PrincipalTable,
    pub sensitivity: bool,
    pub files: Vec<PathBuf>,
}

pub fn export_results(dir: &Path, format: Format) -> Result<Exported> {
    let ep = dir.join("effects_summary.csv");
    let er = Rows::read(&ep)?;
    let stamp = {
        let (a, b) = (er.col("seed", &ep)?, er.col("config_hash", &ep)?);
        er.rows.first().map(|r| Stamp {
            seed: r[a].parse().unwrap_or_default(),
            config_hash: r[b].clone(),
        })
    }
    .ok_or_else(|| CliError::Data {
        path: ep.clone(),
        message: "no rows".into(),
    })?;
    let effects = entries(&er, &ep, &["estimand"])?;
    let pp = dir.join("principal.csv");
    let principal = principal_table(entries(&Rows::read(&pp)?, &pp, &["subset", "stratum"])?);
    let sensitivity = dir.join(SENSITIVITY_FILE).exists();
    let mut files = Vec::new();
    match format {
        Format::Csv => {
            let mut t = Table::create(&dir.join("report_effects.csv"), &stamp, &["estimand", "mean", "sd", "lo", "hi"])?;
            for e in &effects {
                t.row([e.name.clone(), num(e.mean), num(e.sd), num(e.lo), num(e.hi)])?;
            }
            files.push(t.finish()?);

            let mut head = vec!["effect"];
            head.extend(principal.subsets.iter().map(String::as_str));
            let mut t = Table::create(&dir.join("report_principal.csv"), &stamp, &head)?;
            for (stratum, cells) in &principal.rows {
                t.row(std::iter::once(stratum.clone()).chain(cells.iter().map(Entry::cell)))?;
            }
            files.push(t.finish()?);
        }
        Format::SummaryText => {
            let path = dir.join("summary.txt");
            let text = summary_text(&stamp, &effects, &principal, sensitivity);
            std::fs::write(&path, text).map_err(CliError::io(&path))?;
            files.push(path);
        }
    }
    Ok(Exported {
        effects,
        principal,
        sensitivity,
        files,
    })
}

fn summary_text(stamp: &Stamp, effects: &[Entry], principal: &PrincipalTable, sensitivity: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed {}, config hash {}", stamp.seed, stamp.config_hash);
    let _ = writeln!(s);
    let width = effects.iter().map(|e| e.name.len()).max().unwrap_or(0).max(8);
    let _ = writeln!(s, "Mediation effects: posterior mean, s.d. and 95% interval");
    for e in effects {
        let _ = writeln!(s, "  {:<width$}  {:>8.3}  {:>7.3}  ({:.3}, {:.3})", e.name, e.mean, e.sd, e.lo, e.hi);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Principal effects: posterior mean (s.d.) by mediator subset");
    let cw = principal.rows.iter().flat_map(|(_, v)| v.iter().map(|e| e.cell().len())).max().unwrap_or(0).max(6);
    let _ = write!(s, "  {:<10}", "");
    for sub in &principal.subsets {
        let _ = write!(s, "  {sub:>cw$}");
    }
    let _ = writeln!(s);
    for (stratum, cells) in &principal.rows {
        let _ = write!(s, "  {stratum:<10}");
        for c in cells {
            let _ = write!(s, "  {:>cw$}", c.cell());
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s);
    if sensitivity {
        let _ = writeln!(s, "Sensitivity grid: {} and {}", SENSITIVITY_FILE, SENSITIVITY_BOUNDS_FILE);
    } else {
        let _ = writeln!(s, "Sensitivity grid: not computed (empty grid, no {SENSITIVITY_FILE})");
    }
    s
}
