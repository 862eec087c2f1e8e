//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use multimed_core::model::ChainConfig;
use multimed_core::simulation::{CorrCase, CrossWorld, HarnessConfig, InteractionCase, Scenario};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::export::{export_results, Format};
use crate::run::{self, Context, Report, DRAWS_FILE};
use crate::simulate::{run_harness, write_synthetic};

/// Environment variable fixing the worker thread count.
pub const THREADS_ENV: &str = "MULTIMED_THREADS";

#[derive(Debug, Parser)]
#[command(name = "multimed", version, about = "Mediation analysis with several correlated mediators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the sampler and every analysis, writing all artifacts.
    Fit(FitArgs),
    /// Recompute effect tables from a saved draw archive.
    Effects(StageArgs),
    /// Recompute the sensitivity grid from a saved draw archive.
    Sensitivity(StageArgs),
    /// Recompute diagnostics from a saved draw archive.
    Diagnose(StageArgs),
    /// Generate synthetic data or run the bias/MSE harness.
    Simulate(SimulateArgs),
    /// Reporting tables from a finished artifact directory.
    Export(ExportArgs),
}

/// Overrides for the `[chain]` section and the seed.
#[derive(Debug, Default, Args)]
pub struct ChainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_iter: Option<usize>,
    #[arg(long)]
    pub n_burn: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub prior_mode: Option<String>,
    #[arg(long)]
    pub hyper_rate: Option<String>,
    #[arg(long)]
    pub intercept_step: Option<f64>,
    #[arg(long)]
    pub variance_concentration: Option<f64>,
    #[arg(long)]
    pub beta_prior_sd: Option<f64>,
    #[arg(long)]
    pub impute_step_scale: Option<f64>,
    #[arg(long)]
    pub outcome_truncation: Option<usize>,
    #[arg(long)]
    pub outcome_iw_df: Option<f64>,
}

impl ChainFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let c = &mut cfg.chain;
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { c.$f = v.clone(); })*};
        }
        set!(n_iter, n_burn, thin, k_max, prior_mode, hyper_rate, intercept_step, variance_concentration, beta_prior_sd, impute_step_scale, outcome_truncation, outcome_iw_df);
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
    }

    /// Applies the overrides to a plain chain configuration.
    pub fn apply_chain(&self, c: &mut ChainConfig) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(n_iter, n_burn, thin, k_max, intercept_step, variance_concentration, beta_prior_sd, impute_step_scale, outcome_truncation, outcome_iw_df);
        if let Some(p) = &self.prior_mode {
            c.prior_mode = p.parse()?;
        }
        if let Some(h) = &self.hyper_rate {
            c.hyper_rate = h.parse()?;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    /// Artifact directory; overrides `[output] dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub chain: ChainFlags,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Draw archive; defaults to draws.bin in the artifact directory.
    #[arg(long)]
    pub draws: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "uncorrelated")]
    pub corr: String,
    #[arg(long, default_value = "single")]
    pub interaction: String,
    /// Drop the interaction terms from the outcome model.
    #[arg(long)]
    pub additive: bool,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 25)]
    pub reps: usize,
    /// Write one dataset instead of running the harness.
    #[arg(long)]
    pub dataset_only: bool,
    #[arg(long, default_value_t = 20)]
    pub effects_n_mc: usize,
    #[arg(long, default_value_t = 5)]
    pub draw_stride: usize,
    #[arg(long, default_value_t = 1_000_000)]
    pub truth_n_mc: usize,
    /// Correlation between the two mediator worlds in the truth oracle.
    #[arg(long)]
    pub cross_world: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub n_boot: usize,
    #[arg(long, default_value = "simulation")]
    pub out: PathBuf,
    #[command(flatten)]
    pub chain: ChainFlags,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Artifact directory written by `fit`.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, value_enum, default_value = "summary-text")]
    pub format: Format,
}

fn context(config: &PathBuf, out: &Option<PathBuf>, edit: impl FnOnce(&mut RunConfig)) -> Result<Context> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(o) = out {
        cfg.output.dir = o.clone();
    }
    edit(&mut cfg);
    Context::new(cfg)
}

fn stage(a: &StageArgs, name: &str) -> Result<Report> {
    let ctx = context(&a.config, &a.out, |c| {
        if let Some(s) = a.seed {
            c.seed = s;
        }
    })?;
    let path = a.draws.clone().unwrap_or_else(|| ctx.path(DRAWS_FILE));
    let draws = ctx.load_archive(&path)?;
    let mut report = Report::default();
    match name {
        "effects" => {
            run::effects(&ctx, &draws, &mut report)?;
        }
        "sensitivity" => {
            run::sensitivity(&ctx, &draws, &mut report)?;
        }
        _ => run::diagnostics(&ctx, &draws, None, &mut report)?,
    }
    run::write_metadata(&ctx, name, draws.len(), &mut report)?;
    Ok(report)
}

pub fn execute(cli: Cli) -> Result<Report> {
    match cli.command {
        Command::Fit(a) => {
            let ctx = context(&a.config, &a.out, |c| a.chain.apply(c))?;
            run::fit(&ctx)
        }
        Command::Effects(a) => stage(&a, "effects"),
        Command::Sensitivity(a) => stage(&a, "sensitivity"),
        Command::Diagnose(a) => stage(&a, "diagnose"),
        Command::Simulate(a) => {
            let corr: CorrCase = a.corr.parse()?;
            let sc = if a.additive {
                Scenario::additive(corr)
            } else {
                Scenario::new(corr, a.interaction.parse::<InteractionCase>()?)
            };
            let seed = a.chain.seed.unwrap_or(1);
            let mut report = Report::default();
            if a.dataset_only {
                let (d, s) = write_synthetic(&sc, a.n, seed, &a.out)?;
                report.files.extend([d, s]);
                return Ok(report);
            }
            let mut cfg = HarnessConfig {
                n: a.n,
                n_reps: a.reps,
                effects_n_mc: a.effects_n_mc,
                draw_stride: a.draw_stride,
                truth_n_mc: a.truth_n_mc,
                cross_world: a.cross_world.map_or(CrossWorld::Independent, CrossWorld::SharedGaussian),
                n_boot: a.n_boot,
                seed,
                ..Default::default()
            };
            a.chain.apply_chain(&mut cfg.chain)?;
            let res = run_harness(&sc, &cfg, &a.out)?;
            if !res.failures.is_empty() {
                report.notes.push(format!("{} of {} replications failed", res.failures.len(), a.reps));
            }
            report.files.push(a.out.join("simulation.csv"));
            Ok(report)
        }
        Command::Export(a) => {
            let ex = export_results(&a.dir, a.format)?;
            let mut report = Report {
                files: ex.files,
                notes: Vec::new(),
            };
            if !ex.sensitivity {
                report.notes.push("no sensitivity grid in this run".into());
            }
            Ok(report)
        }
    }
}

/// Sizes the global thread pool from [`THREADS_ENV`] when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    if n == 0 {
        return Err(CliError::Config(format!("{THREADS_ENV} must be positive")));
    }
    // A second initialisation (e.g. in tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses arguments, runs, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let res = init_threads().and_then(|_| execute(cli));
    match res {
        Ok(report) => {
            for f in &report.files {
                println!("{}", f.display());
            }
            for n in &report.notes {
                eprintln!("note: {n}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
