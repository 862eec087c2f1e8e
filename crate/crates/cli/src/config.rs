//! Run configuration: a TOML file with one section per pipeline stage.

use std::path::{Path, PathBuf};

use multimed_core::copula::PriorMode;
use multimed_core::effects::{CepConfig, EffectsConfig};
use multimed_core::model::{ChainConfig, HyperRate};
use multimed_core::sensitivity::{default_chi_grid, SensitivityConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Schema;
use crate::error::{CliError, Result};

const TABLE1: &str = include_str!("../schemas/table1.toml");

/// Bundled schemas addressable by name from `data.schema`.
pub fn bundled_schema(name: &str) -> Option<&'static str> {
    match name {
        "table1" => Some(TABLE1),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    /// Bundled schema name or path to a schema file. Ignored when
    /// `columns` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Schema>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub k_max: usize,
    pub prior_mode: String,
    pub hyper_rate: String,
    pub intercept_step: f64,
    pub variance_concentration: f64,
    pub beta_prior_sd: f64,
    pub impute_step_scale: f64,
    pub outcome_truncation: usize,
    pub outcome_iw_df: f64,
}

impl Default for ChainSection {
    fn default() -> Self {
        let c = ChainConfig::default();
        Self {
            n_iter: c.n_iter,
            n_burn: c.n_burn,
            thin: c.thin,
            k_max: c.k_max,
            prior_mode: c.prior_mode.as_str().to_string(),
            hyper_rate: c.hyper_rate.as_str().to_string(),
            intercept_step: c.intercept_step,
            variance_concentration: c.variance_concentration,
            beta_prior_sd: c.beta_prior_sd,
            impute_step_scale: c.impute_step_scale,
            outcome_truncation: c.outcome_truncation,
            outcome_iw_df: c.outcome_iw_df,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EffectsSection {
    pub n_mc: usize,
    pub nie_star: bool,
    pub c_dissociative: f64,
    pub c_associative: f64,
    pub draw_stride: usize,
    /// Mediators (1-based) cross-classified in `strata_cross.csv`.
    pub strata_pair: [usize; 2],
}

impl Default for EffectsSection {
    fn default() -> Self {
        let e = EffectsConfig::default();
        Self {
            n_mc: e.n_mc,
            nie_star: e.nie_star,
            c_dissociative: e.c_dissociative,
            c_associative: e.c_associative,
            draw_stride: e.draw_stride,
            strata_pair: [e.strata_pair.0 + 1, e.strata_pair.1 + 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CepSection {
    pub enabled: bool,
    pub grid_size: usize,
    pub n_mc: usize,
    pub draw_stride: usize,
    pub unit_stride: usize,
}

impl Default for CepSection {
    fn default() -> Self {
        let c = CepConfig::default();
        Self {
            enabled: true,
            grid_size: c.grid_size,
            n_mc: c.n_mc,
            draw_stride: c.draw_stride,
            unit_stride: c.unit_stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivitySection {
    pub epsilons: Vec<f64>,
    /// Explicit tilt vectors.
    pub chis: Vec<Vec<f64>>,
    /// Levels expanded into single-mediator and joint tilt vectors.
    pub chi_levels: Vec<f64>,
    pub n_mc: usize,
    pub draw_stride: usize,
    pub cov_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_star: Option<f64>,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        let s = SensitivityConfig::default();
        Self {
            epsilons: s.epsilons,
            chis: Vec::new(),
            chi_levels: Vec::new(),
            n_mc: s.n_mc,
            draw_stride: s.draw_stride,
            cov_samples: s.cov_samples,
            y_star: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub n_rep: usize,
    pub parametric_draws: usize,
    pub level: f64,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            n_rep: 200,
            parametric_draws: 1000,
            level: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("results") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub effects: EffectsSection,
    #[serde(default)]
    pub cep: CepSection,
    #[serde(default)]
    pub sensitivity: SensitivitySection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_seed() -> u64 {
    1
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file; relative data and output paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.path = base.join(&cfg.data.path);
        cfg.output.dir = base.join(&cfg.output.dir);
        if let Some(s) = &cfg.data.schema {
            if bundled_schema(s).is_none() {
                cfg.data.schema = Some(base.join(s).to_string_lossy().into_owned());
            }
        }
        Ok(cfg)
    }

    /// Column mapping, from the inline table, a bundled name or a file.
    pub fn schema(&self) -> Result<Schema> {
        if let Some(c) = &self.data.columns {
            return Ok(c.clone());
        }
        let Some(name) = &self.data.schema else {
            return Err(CliError::Config("data needs either `columns` or `schema`".into()));
        };
        let text = match bundled_schema(name) {
            Some(t) => t.to_string(),
            None => std::fs::read_to_string(name).map_err(CliError::io(name))?,
        };
        toml::from_str(&text).map_err(|e| CliError::Config(format!("schema {name}: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn chain_config(&self) -> Result<ChainConfig> {
        let c = &self.chain;
        let cfg = ChainConfig {
            n_iter: c.n_iter,
            n_burn: c.n_burn,
            thin: c.thin,
            k_max: c.k_max,
            seed: self.seed,
            prior_mode: c.prior_mode.parse::<PriorMode>()?,
            hyper_rate: c.hyper_rate.parse::<HyperRate>()?,
            intercept_step: c.intercept_step,
            variance_concentration: c.variance_concentration,
            beta_prior_sd: c.beta_prior_sd,
            impute_step_scale: c.impute_step_scale,
            outcome_truncation: c.outcome_truncation,
            outcome_iw_df: c.outcome_iw_df,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn effects_config(&self) -> Result<EffectsConfig> {
        let e = &self.effects;
        let [a, b] = e.strata_pair;
        if a == 0 || b == 0 {
            return Err(CliError::Config("effects.strata_pair is 1-based".into()));
        }
        Ok(EffectsConfig {
            n_mc: e.n_mc,
            seed: self.seed,
            nie_star: e.nie_star,
            c_dissociative: e.c_dissociative,
            c_associative: e.c_associative,
            draw_stride: e.draw_stride,
            strata_pair: (a - 1, b - 1),
        })
    }

    pub fn cep_config(&self) -> CepConfig {
        let c = &self.cep;
        CepConfig {
            grid_size: c.grid_size,
            n_mc: c.n_mc,
            draw_stride: c.draw_stride,
            unit_stride: c.unit_stride,
            seed: self.seed,
        }
    }

    pub fn sensitivity_config(&self, k: usize) -> SensitivityConfig {
        let s = &self.sensitivity;
        let mut chis = s.chis.clone();
        if !s.chi_levels.is_empty() {
            chis.extend(default_chi_grid(k, &s.chi_levels));
        }
        SensitivityConfig {
            epsilons: s.epsilons.clone(),
            chis,
            n_mc: s.n_mc,
            seed: self.seed,
            draw_stride: s.draw_stride,
            cov_samples: s.cov_samples,
            standardizer: None,
            y_star: s.y_star,
        }
    }

    pub fn sensitivity_enabled(&self) -> bool {
        !self.sensitivity.chis.is_empty() || !self.sensitivity.chi_levels.is_empty()
    }
}

/// The configuration with the schema inlined and file locations cleared.
pub fn canonical(cfg: &RunConfig, schema: &Schema) -> RunConfig {
    let mut c = cfg.clone();
    c.output.dir = PathBuf::new();
    c.data.path = PathBuf::new();
    c.data.schema = None;
    c.data.columns = Some(schema.clone());
    c
}

/// Short digest of the resolved configuration and the data file contents;
/// independent of where either file lives.
pub fn config_hash(cfg: &RunConfig, schema: &Schema, data_bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(canonical(cfg, schema).to_toml().as_bytes());
    h.update([0u8]);
    h.update(data_bytes);
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}
