//! Pipeline stages and the artifacts each one writes.

use std::path::{Path, PathBuf};

use multimed_core::archive::{load_draws, save_draws, ArchiveHeader};
use multimed_core::chain::{run_chain, ChainAcceptance};
use multimed_core::diagnostics::{dic3, global_traces, margin_dic3, parametric_margin_draws, posterior_predictive, trace_stats, MarginSample};
use multimed_core::effects::{cep_surface, compute_effects, default_grid, index_label, EffectSummary};
use multimed_core::model::PosteriorDraw;
use multimed_core::sensitivity::{sensitivity_effects, SensitivityGrid};

use crate::config::{config_hash, RunConfig};
use crate::data::{load_dataset, Loaded, Schema};
use crate::error::{CliError, Result};
use crate::output::{num, opt, stratum_fields, summary_fields, Stamp, Table, STRATUM_COLUMNS, SUMMARY_COLUMNS};

pub const DRAWS_FILE: &str = "draws.bin";
pub const METADATA_FILE: &str = "run_metadata.toml";
pub const SENSITIVITY_FILE: &str = "sensitivity.csv";
pub const SENSITIVITY_BOUNDS_FILE: &str = "sensitivity_bounds.csv";

const STRATA: [&str; 3] = ["EDE", "EAE_minus", "EAE_plus"];
const CHANGE_BANDS: [&str; 3] = ["decrease", "no_change", "increase"];

/// A loaded configuration and dataset with the output directory in place.
pub struct Context {
    pub cfg: RunConfig,
    pub schema: Schema,
    pub loaded: Loaded,
    pub stamp: Stamp,
    pub out: PathBuf,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let schema = cfg.schema()?;
        let bytes = std::fs::read(&cfg.data.path).map_err(CliError::io(&cfg.data.path))?;
        let loaded = load_dataset(&cfg.data.path, &schema)?;
        let stamp = Stamp {
            seed: cfg.seed,
            config_hash: config_hash(&cfg, &schema, &bytes),
        };
        let out = cfg.output.dir.clone();
        std::fs::create_dir_all(&out).map_err(CliError::io(&out))?;
        Ok(Self { cfg, schema, loaded, stamp, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn table(&self, name: &str, header: &[&str]) -> Result<Table> {
        Table::create(&self.path(name), &self.stamp, header)
    }

    fn archive_header(&self) -> ArchiveHeader {
        let d = &self.loaded.data;
        ArchiveHeader {
            k: d.k,
            p: d.p,
            n: d.n(),
            lower: d.lower_bound,
            metadata: format!("seed = {}\nconfig_hash = \"{}\"\n", self.stamp.seed, self.stamp.config_hash),
        }
    }

    /// Reads an archive and checks that it was fitted to this dataset.
    pub fn load_archive(&self, path: &Path) -> Result<Vec<PosteriorDraw>> {
        if !path.exists() {
            return Err(CliError::MissingArtifact(path.to_path_buf()));
        }
        let (header, draws) = load_draws(path)?;
        let want = self.archive_header();
        if (header.k, header.p, header.n) != (want.k, want.p, want.n) || header.lower.to_bits() != want.lower.to_bits() {
            return Err(CliError::Config(format!(
                "{}: archive has k={} p={} n={} lower={}, dataset has k={} p={} n={} lower={}",
                path.display(),
                header.k,
                header.p,
                header.n,
                header.lower,
                want.k,
                want.p,
                want.n,
                want.lower
            )));
        }
        if header.metadata != want.metadata {
            log::warn!("{} was written under a different seed or configuration", path.display());
        }
        Ok(draws)
    }
}

/// What a stage produced, for the metadata file and the terminal.
#[derive(Debug, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl Report {
    fn add(&mut self, p: PathBuf) {
        self.files.push(p);
    }
}

/// Runs the sampler and every downstream analysis.
pub fn fit(ctx: &Context) -> Result<Report> {
    let chain_cfg = ctx.cfg.chain_config()?;
    let data = &ctx.loaded.data;
    log::info!("fitting {} units, K = {}, P = {}", data.n(), data.k, data.p);
    let out = run_chain(data, &chain_cfg)?;
    log::info!("{} draws retained", out.draws.len());
    let mut report = Report::default();
    let archive = ctx.path(DRAWS_FILE);
    save_draws(&archive, &ctx.archive_header(), &out.draws)?;
    report.add(archive);
    effects(ctx, &out.draws, &mut report)?;
    sensitivity(ctx, &out.draws, &mut report)?;
    diagnostics(ctx, &out.draws, Some(&out.acceptance), &mut report)?;
    write_metadata(ctx, "fit", out.draws.len(), &mut report)?;
    Ok(report)
}

pub fn effects(ctx: &Context, draws: &[PosteriorDraw], report: &mut Report) -> Result<EffectSummary> {
    let data = &ctx.loaded.data;
    let s = compute_effects(draws, data, &ctx.cfg.effects_config()?)?;

    let mut head = vec!["iteration"];
    head.extend(s.names.iter().map(String::as_str));
    let mut t = ctx.table("effects.csv", &head)?;
    for (it, v) in s.iterations.iter().zip(&s.draws) {
        t.row(std::iter::once(it.to_string()).chain(v.iter().map(|x| num(*x))))?;
    }
    report.add(t.finish()?);

    let mut head = vec!["estimand"];
    head.extend(SUMMARY_COLUMNS);
    let mut t = ctx.table("effects_summary.csv", &head)?;
    for (name, sm) in s.names.iter().zip(&s.summary) {
        t.row(std::iter::once(name.clone()).chain(summary_fields(sm)))?;
    }
    report.add(t.finish()?);

    let mut t = ctx.table("thresholds.csv", &["mediator", "sigma_hat", "c_dissociative", "c_associative"])?;
    for j in 0..data.k {
        t.row([data.mediator_names[j].clone(), num(s.sigma_hat[j]), num(s.thresholds_d[j]), num(s.thresholds_a[j])])?;
    }
    report.add(t.finish()?);

    let mut head = vec!["subset", "stratum"];
    head.extend(STRATUM_COLUMNS);
    let mut t = ctx.table("principal.csv", &head)?;
    for (sub, cells) in s.subsets.iter().zip(&s.principal_summary) {
        for (name, cell) in STRATA.iter().zip(cells) {
            t.row([index_label(sub), name.to_string()].into_iter().chain(stratum_fields(cell)))?;
        }
    }
    report.add(t.finish()?);

    let mut head = vec!["row_mediator", "col_mediator", "row_change", "col_change"];
    head.extend(STRATUM_COLUMNS);
    let mut t = ctx.table("strata_cross.csv", &head)?;
    let (a, b) = s.strata_pair;
    for (i, row) in s.strata_summary.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let lead = [data.mediator_names[a].clone(), data.mediator_names[b].clone(), CHANGE_BANDS[i].to_string(), CHANGE_BANDS[j].to_string()];
            t.row(lead.into_iter().chain(stratum_fields(cell)))?;
        }
    }
    report.add(t.finish()?);

    if ctx.cfg.cep.enabled {
        let cfg = ctx.cfg.cep_config();
        for k in 0..data.k {
            let grid = default_grid(data, k, cfg.grid_size);
            let surf = cep_surface(draws, data, k, &grid, &grid, &cfg)?;
            let mut t = ctx.table(&format!("cep_surface_{}.csv", k + 1), &["m0", "m1", "effect"])?;
            for (ia, g0) in surf.grid0.iter().enumerate() {
                for (ib, g1) in surf.grid1.iter().enumerate() {
                    t.row([num(*g0), num(*g1), num(surf.at(ia, ib))])?;
                }
            }
            report.add(t.finish()?);
            let mut t = ctx.table(&format!("cep_cloud_{}.csv", k + 1), &["m0", "m1"])?;
            for (m0, m1) in &surf.cloud {
                t.row([num(*m0), num(*m1)])?;
            }
            report.add(t.finish()?);
        }
    }
    Ok(s)
}

/// Writes the sensitivity grid, or removes stale grid files when the
/// configured grid is empty.
pub fn sensitivity(ctx: &Context, draws: &[PosteriorDraw], report: &mut Report) -> Result<Option<SensitivityGrid>> {
    if !ctx.cfg.sensitivity_enabled() {
        for f in [SENSITIVITY_FILE, SENSITIVITY_BOUNDS_FILE] {
            let p = ctx.path(f);
            if p.exists() {
                std::fs::remove_file(&p).map_err(CliError::io(&p))?;
            }
        }
        report.notes.push("sensitivity grid empty; sensitivity.csv not written".into());
        return Ok(None);
    }
    let data = &ctx.loaded.data;
    let grid = sensitivity_effects(draws, data, &ctx.cfg.sensitivity_config(data.k))?;
    let mut head = vec!["epsilon", "chi", "estimand"];
    head.extend(SUMMARY_COLUMNS);
    head.push("tilted_share");
    let mut t = ctx.table(SENSITIVITY_FILE, &head)?;
    for pt in &grid.points {
        let chi = pt.chi.iter().map(|c| num(*c)).collect::<Vec<_>>().join(";");
        for (name, sm) in grid.names.iter().zip(&pt.summary) {
            let lead = [num(pt.epsilon), chi.clone(), name.clone()];
            t.row(lead.into_iter().chain(summary_fields(sm)).chain([num(pt.tilted_share)]))?;
        }
    }
    report.add(t.finish()?);

    let mut t = ctx.table(SENSITIVITY_BOUNDS_FILE, &["epsilon", "y_star", "median_chi_upper", "bounded_draws", "draws"])?;
    for b in &grid.bounds {
        let bounded = b.per_draw.iter().filter(|c| c.upper.is_some()).count();
        t.row([num(b.epsilon), num(grid.y_star), opt(b.median_upper()), bounded.to_string(), b.per_draw.len().to_string()])?;
    }
    report.add(t.finish()?);
    Ok(Some(grid))
}

pub fn diagnostics(ctx: &Context, draws: &[PosteriorDraw], acceptance: Option<&ChainAcceptance>, report: &mut Report) -> Result<()> {
    let data = &ctx.loaded.data;
    let dc = &ctx.cfg.diagnostics;
    let mut t = ctx.table("diagnostics.csv", &["section", "item", "statistic", "value"])?;
    for k in 0..data.k {
        for z in 0..2u8 {
            let item = format!("{}_z{z}", data.mediator_names[k]);
            let sample = MarginSample::from_dataset(data, k, z)?;
            let par = parametric_margin_draws(&sample, dc.parametric_draws, ctx.cfg.seed)?;
            t.row(["dic3".into(), item.clone(), "dpm".into(), num(margin_dic3(draws, data, k, z)?)])?;
            t.row(["dic3".into(), item, "parametric".into(), num(dic3(&par, &sample)?)])?;
        }
    }
    for (name, v) in global_traces(draws) {
        let s = trace_stats(&name, &v);
        for (stat, val) in [("mean", s.mean), ("sd", s.sd), ("lag1", s.lag1), ("ess", s.ess)] {
            t.row(["trace".into(), name.clone(), stat.into(), num(val)])?;
        }
    }
    if let Some(acc) = acceptance {
        for (block, rate) in acc.rates() {
            t.row(["acceptance".into(), block.into(), "rate".into(), num(rate)])?;
        }
    }
    let pc = posterior_predictive(draws, data, dc.n_rep, ctx.cfg.seed)?;
    let level = format!("coverage_{}", dc.level);
    t.row(["predictive".into(), "outcome".into(), level.clone(), num(pc.outcome_coverage(data, dc.level))])?;
    for k in 0..data.k {
        t.row(["predictive".into(), data.mediator_names[k].clone(), level.clone(), num(pc.mediator_coverage(data, k, dc.level))])?;
    }
    report.add(t.finish()?);

    // Sorted replicates against sorted observations.
    let mut t = ctx.table("predictive.csv", &["variable", "rank", "observed", "lo", "mean", "hi"])?;
    let mut curves = vec![("outcome".to_string(), data.units.iter().map(|u| u.y).collect::<Vec<_>>(), pc.sorted_outcome_curves())];
    for k in 0..data.k {
        curves.push((data.mediator_names[k].clone(), data.units.iter().map(|u| u.m[k]).collect(), pc.sorted_mediator_curves(k)));
    }
    let a = (1.0 - dc.level) / 2.0;
    for (name, mut obs, reps) in curves {
        obs.sort_by(f64::total_cmp);
        for (r, o) in obs.iter().enumerate() {
            let mut col: Vec<f64> = reps.iter().map(|c| c[r]).collect();
            col.sort_by(f64::total_cmp);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let lo = multimed_core::effects::quantile_sorted(&col, a);
            let hi = multimed_core::effects::quantile_sorted(&col, 1.0 - a);
            t.row([name.clone(), (r + 1).to_string(), num(*o), num(lo), num(mean), num(hi)])?;
        }
    }
    report.add(t.finish()?);
    Ok(())
}

/// Seed, hash, configuration echo and the modelling switches in force.
/// Contains nothing that varies between identical runs.
pub fn write_metadata(ctx: &Context, command: &str, n_draws: usize, report: &mut Report) -> Result<PathBuf> {
    use toml::{Table as T, Value};
    let d = &ctx.loaded.data;
    let cfg = &ctx.cfg;
    let mut root = T::new();
    root.insert("command".into(), command.into());
    root.insert("seed".into(), Value::Integer(cfg.seed as i64));
    root.insert("config_hash".into(), ctx.stamp.config_hash.clone().into());
    root.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    root.insert("threads".into(), Value::Integer(rayon::current_num_threads() as i64));
    root.insert("n_units".into(), Value::Integer(d.n() as i64));
    root.insert("n_draws".into(), Value::Integer(n_draws as i64));

    let mut sw = T::new();
    sw.insert("prior_mode".into(), cfg.chain.prior_mode.clone().into());
    sw.insert("hyper_rate".into(), cfg.chain.hyper_rate.clone().into());
    sw.insert("mediator_lower_bound".into(), d.lower_bound.into());
    sw.insert(
        "mediator_transforms".into(),
        Value::Array(d.transforms.iter().map(|t| t.as_str().into()).collect()),
    );
    sw.insert("nie_star".into(), cfg.effects.nie_star.into());
    sw.insert("mixed_patterns".into(), "non-switched mediators at their control value".into());
    sw.insert("sensitivity_subset".into(), "mediators held at their control value".into());
    sw.insert("sensitivity_grid".into(), cfg.sensitivity_enabled().into());
    root.insert("switches".into(), Value::Table(sw));

    let files: Vec<Value> = report
        .files
        .iter()
        .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned()).into())
        .collect();
    root.insert("outputs".into(), Value::Array(files));
    root.insert("notes".into(), Value::Array(report.notes.iter().map(|n| n.clone().into()).collect()));

    let mut echo: T = toml::from_str(&crate::config::canonical(cfg, &ctx.schema).to_toml()).map_err(|e| CliError::Config(e.to_string()))?;
    // Absolute paths would make the file depend on where it was produced.
    if let Some(Value::Table(data)) = echo.get_mut("data") {
        data.remove("path");
    }
    if let Some(Value::Table(o)) = echo.get_mut("output") {
        o.remove("dir");
    }
    root.insert("config".into(), Value::Table(echo));

    let path = ctx.path(METADATA_FILE);
    std::fs::write(&path, toml::to_string(&root).expect("metadata serializes")).map_err(CliError::io(&path))?;
    report.add(path.clone());
    Ok(path)
}
