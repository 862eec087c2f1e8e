//! Simulation-study driver: synthetic datasets and the bias/MSE harness.

use std::path::{Path, PathBuf};

use multimed_core::rng::RngStream;
use multimed_core::simulation::{generate_scenario, replication_harness, HarnessConfig, HarnessResult, Scenario};
use sha2::{Digest, Sha256};

use crate::data::{write_dataset, Schema};
use crate::error::{CliError, Result};
use crate::output::{num, Stamp, Table};

/// Digest of the settings that determine a simulation's output.
pub fn settings_hash(sc: &Scenario, cfg: &HarnessConfig) -> String {
    let text = format!("{sc:?}\n{cfg:?}");
    Sha256::digest(text.as_bytes())[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes one synthetic dataset and a schema that reads it back.
pub fn write_synthetic(sc: &Scenario, n: usize, seed: u64, out: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let (data, _) = generate_scenario(sc, n, &mut RngStream::new(seed, 0))?;
    let ids: Vec<String> = (1..=data.n()).map(|i| i.to_string()).collect();
    let csv_path = out.join("dataset.csv");
    let f = std::fs::File::create(&csv_path).map_err(CliError::io(&csv_path))?;
    write_dataset(std::io::BufWriter::new(f), &data, &ids)?;
    let schema_path = out.join("dataset_schema.toml");
    let text = toml::to_string(&Schema::from_dataset(&data)).expect("schema serializes");
    std::fs::write(&schema_path, text).map_err(CliError::io(&schema_path))?;
    Ok((csv_path, schema_path))
}

pub fn run_harness(sc: &Scenario, cfg: &HarnessConfig, out: &Path) -> Result<HarnessResult> {
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let res = replication_harness(sc, cfg, None)?;
    let stamp = Stamp {
        seed: cfg.seed,
        config_hash: settings_hash(sc, cfg),
    };
    let mut t = Table::create(
        &out.join("simulation.csv"),
        &stamp,
        &["corr_case", "interaction_case", "estimand", "method", "truth", "bias", "mse", "n_reps"],
    )?;
    for r in &res.rows {
        t.row([
            r.corr_case.as_str().to_string(),
            r.interaction_case.as_str().to_string(),
            r.estimand.clone(),
            r.method.to_string(),
            num(r.truth),
            num(r.bias),
            num(r.mse),
            r.n_reps.to_string(),
        ])?;
    }
    t.finish()?;

    let mut t = Table::create(&out.join("replications.csv"), &stamp, &["replication", "method", "estimand", "estimate"])?;
    for rep in &res.replications {
        for (method, vals) in [("BNP", &rep.bnp), ("Parametric", &rep.parametric)] {
            for (name, v) in res.truth.names.iter().zip(vals) {
                t.row([rep.index.to_string(), method.to_string(), name.clone(), num(*v)])?;
            }
        }
    }
    t.finish()?;

    let mut meta = toml::Table::new();
    meta.insert("seed".into(), toml::Value::Integer(cfg.seed as i64));
    meta.insert("config_hash".into(), stamp.config_hash.clone().into());
    meta.insert("scenario".into(), sc.to_string().into());
    meta.insert("table_label".into(), sc.table_label().into());
    meta.insert("treatment_assignment".into(), "Bernoulli(0.5), independent of covariates".into());
    meta.insert("cross_world".into(), res.truth.cross_world.to_string().into());
    meta.insert("truth_n_mc".into(), toml::Value::Integer(res.truth.n_mc as i64));
    meta.insert("mediator_lower_bound".into(), f64::NEG_INFINITY.into());
    meta.insert("n".into(), toml::Value::Integer(cfg.n as i64));
    meta.insert("n_reps".into(), toml::Value::Integer(cfg.n_reps as i64));
    meta.insert("chain".into(), format!("{}/{}/{}", cfg.chain.n_iter, cfg.chain.n_burn, cfg.chain.thin).into());
    meta.insert(
        "failures".into(),
        toml::Value::Array(res.failures.iter().map(|(i, e)| format!("{i}: {e}").into()).collect()),
    );
    let path = out.join("run_metadata.toml");
    std::fs::write(&path, toml::to_string(&meta).expect("metadata serializes")).map_err(CliError::io(&path))?;
    Ok(res)
}
