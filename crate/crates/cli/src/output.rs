//! CSV emission. Every row starts with the run seed and config hash.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use multimed_core::effects::{Summary, StratumSummary};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stamp {
    pub seed: u64,
    pub config_hash: String,
}

pub struct Table {
    path: PathBuf,
    wtr: csv::Writer<BufWriter<File>>,
    lead: [String; 2],
}

impl Table {
    pub fn create(path: &Path, stamp: &Stamp, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(CliError::io(path))?;
        let mut wtr = csv::Writer::from_writer(BufWriter::new(file));
        let mut h = vec!["seed", "config_hash"];
        h.extend_from_slice(header);
        wtr.write_record(&h)?;
        Ok(Self {
            path: path.to_path_buf(),
            wtr,
            lead: [stamp.seed.to_string(), stamp.config_hash.clone()],
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let mut rec = csv::ByteRecord::new();
        rec.push_field(self.lead[0].as_bytes());
        rec.push_field(self.lead[1].as_bytes());
        for f in fields {
            rec.push_field(f.as_ref());
        }
        self.wtr.write_byte_record(&rec)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.wtr.flush().map_err(CliError::io(&self.path))?;
        Ok(self.path)
    }
}

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), num)
}

pub const SUMMARY_COLUMNS: [&str; 5] = ["mean", "sd", "lo", "hi", "n"];

pub fn summary_fields(s: &Summary) -> [String; 5] {
    [num(s.mean), num(s.sd), num(s.lo), num(s.hi), s.n.to_string()]
}

pub const STRATUM_COLUMNS: [&str; 7] = ["mean", "sd", "lo", "hi", "n", "empty_draws", "mean_count"];

pub fn stratum_fields(s: &StratumSummary) -> [String; 7] {
    let [a, b, c, d, e] = summary_fields(&s.summary);
    [a, b, c, d, e, s.empty_draws.to_string(), num(s.mean_count)]
}
