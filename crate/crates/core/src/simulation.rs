//! Synthetic three-mediator scenarios with known effects, a Monte Carlo
//! truth oracle, the product-of-coefficients regression baseline and a
//! replication harness reporting bias and MSE per estimand.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::chain::run_chain;
use crate::distributions::standard_normal;
use crate::effects::{mediation_names, stride_draws, DrawEngine, PatternMeans, Untilted};
use crate::error::{invalid, Error, Result};
use crate::marginal::least_squares;
use crate::model::{ChainConfig, Dataset, ObservedUnit};
use crate::rng::RngStream;

const K: usize = 3;
const P: usize = 3;
const TRUTH_TAG: u64 = 0x7472_7574;
const BOOT_TAG: u64 = 0x626f_6f74;
const REP_TAG: u64 = 0x7265_7073;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorrCase {
    Uncorrelated,
    Correlated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InteractionCase {
    Single,
    Double,
}

impl CorrCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorrCase::Uncorrelated => "uncorrelated",
            CorrCase::Correlated => "correlated",
        }
    }
}

impl InteractionCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            InteractionCase::Single => "single",
            InteractionCase::Double => "double",
        }
    }
}

impl FromStr for CorrCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncorrelated" => Ok(CorrCase::Uncorrelated),
            "correlated" => Ok(CorrCase::Correlated),
            _ => Err(invalid("corr_case", format!("expected uncorrelated or correlated, got `{s}`"))),
        }
    }
}

impl FromStr for InteractionCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(InteractionCase::Single),
            "double" => Ok(InteractionCase::Double),
            _ => Err(invalid("interaction_case", format!("expected single or double, got `{s}`"))),
        }
    }
}

/// Generating mechanism. Interaction coefficients are stored so that
/// additive variants can be built.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scenario {
    pub corr: CorrCase,
    pub interaction: InteractionCase,
    pub h12: f64,
    pub h23: f64,
}

impl Scenario {
    pub fn new(corr: CorrCase, interaction: InteractionCase) -> Self {
        Self {
            corr,
            interaction,
            h12: 1.5,
            h23: match interaction {
                InteractionCase::Single => 0.0,
                InteractionCase::Double => 0.6,
            },
        }
    }

    /// Same mediators, no mediator interactions in the outcome.
    pub fn additive(corr: CorrCase) -> Self {
        Self {
            h12: 0.0,
            h23: 0.0,
            ..Self::new(corr, InteractionCase::Single)
        }
    }

    pub fn all() -> Vec<Scenario> {
        let mut v = Vec::new();
        for i in [InteractionCase::Single, InteractionCase::Double] {
            for c in [CorrCase::Uncorrelated, CorrCase::Correlated] {
                v.push(Scenario::new(c, i));
            }
        }
        v
    }

    /// Mediator covariance under arm `z`.
    pub fn sigma(&self, z: u8) -> DMatrix<f64> {
        let (diag, off) = match (z, self.corr) {
            (1, CorrCase::Uncorrelated) => (0.64, 0.0),
            (1, CorrCase::Correlated) => (0.64, 0.128),
            (_, CorrCase::Uncorrelated) => (0.04, 0.0),
            (_, CorrCase::Correlated) => (0.04, 0.01),
        };
        DMatrix::from_fn(K, K, |i, j| if i == j { diag } else { off })
    }

    pub fn mediator_mean(&self, z: u8, x: &[f64]) -> [f64; K] {
        let z = z as f64;
        [
            2.0 + 0.4 * z + 0.5 * x[0] + 0.4 * x[1] + 0.5 * x[2],
            1.0 + 0.4 * z - 0.4 * x[0] + 0.4 * x[1] - 0.5 * x[2],
            -0.5 - 0.4 * z + 0.5 * x[0] + 0.4 * x[1] + 0.5 * x[2],
        ]
    }

    pub fn interaction_term(&self, m: &[f64]) -> f64 {
        self.h12 * m[0] * m[1] + self.h23 * m[1] * m[2]
    }

    /// Noise-free outcome under arm `z` at mediators `m`.
    pub fn outcome_mean(&self, z: u8, m: &[f64], x: &[f64]) -> f64 {
        1.0 - z as f64 + 0.8 * (m[0] + m[1] + m[2]) + self.interaction_term(m) + x[0] + x[1] + 0.8 * x[2]
    }

    pub fn outcome_sd(&self) -> f64 {
        0.1
    }

    /// Case names used by the published simulation table, where the
    /// correlation cases are numbered and the interaction cases lettered.
    pub fn table_label(&self) -> String {
        let c = match self.corr {
            CorrCase::Uncorrelated => "Case 1",
            CorrCase::Correlated => "Case 2",
        };
        let i = match self.interaction {
            InteractionCase::Single => "Case A",
            InteractionCase::Double => "Case B",
        };
        format!("{i} / {c}")
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.corr.as_str(), self.interaction.as_str())
    }
}

fn draw_covariates<R: Rng + ?Sized>(rng: &mut R) -> [f64; P] {
    [
        1.5 + 0.3 * standard_normal(rng),
        -1.5 + 0.3 * standard_normal(rng),
        2.0 + 0.1 * standard_normal(rng),
    ]
}

/// Both potential mediator vectors of every generated unit.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRecord {
    pub m0: Vec<[f64; K]>,
    pub m1: Vec<[f64; K]>,
}

struct Chols([DMatrix<f64>; 2]);

impl Chols {
    fn new(sc: &Scenario) -> Self {
        Self([0u8, 1].map(|z| sc.sigma(z).cholesky().expect("scenario covariance is PD").l()))
    }

    fn apply(&self, z: u8, e: &[f64; K], mean: [f64; K]) -> [f64; K] {
        let l = &self.0[z as usize];
        std::array::from_fn(|i| mean[i] + (0..=i).map(|j| l[(i, j)] * e[j]).sum::<f64>())
    }
}

/// `n` units with `Z ~ Bernoulli(0.5)` independent of the covariates. The
/// unobserved world is drawn independently given the covariates.
pub fn generate_scenario<R: Rng + ?Sized>(sc: &Scenario, n: usize, rng: &mut R) -> Result<(Dataset, LatentRecord)> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let ch = Chols::new(sc);
    let mut units = Vec::with_capacity(n);
    let mut latent = LatentRecord {
        m0: Vec::with_capacity(n),
        m1: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x = draw_covariates(rng);
        let z: u8 = if rng.random::<f64>() < 0.5 { 1 } else { 0 };
        let e0: [f64; K] = std::array::from_fn(|_| standard_normal(rng));
        let e1: [f64; K] = std::array::from_fn(|_| standard_normal(rng));
        let m0 = ch.apply(0, &e0, sc.mediator_mean(0, &x));
        let m1 = ch.apply(1, &e1, sc.mediator_mean(1, &x));
        let m = if z == 1 { m1 } else { m0 };
        let y = sc.outcome_mean(z, &m, &x) + sc.outcome_sd() * standard_normal(rng);
        units.push(ObservedUnit::new(z, m.to_vec(), y, x.to_vec()));
        latent.m0.push(m0);
        latent.m1.push(m1);
    }
    let mut data = Dataset::new(units, K, P, f64::NEG_INFINITY);
    data.covariate_names = vec!["x1".into(), "x2".into(), "x3".into()];
    Ok((data, latent))
}

/// Dependence between the two mediator worlds in the truth oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CrossWorld {
    /// Worlds independent given the covariates.
    Independent,
    /// Standardised innovations of the two worlds share correlation `c`.
    SharedGaussian(f64),
}

impl fmt::Display for CrossWorld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CrossWorld::Independent => write!(f, "independent"),
            CrossWorld::SharedGaussian(c) => write!(f, "shared_gaussian({c})"),
        }
    }
}

/// True population effects, aligned with [`mediation_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub cross_world: CrossWorld,
    pub n_mc: usize,
}

impl Truth {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Brute-force Monte Carlo over covariates and both mediator worlds, using
/// noise-free outcomes. Deterministic in `seed`.
pub fn truth_oracle(sc: &Scenario, n_mc: usize, cross_world: CrossWorld, seed: u64) -> Result<Truth> {
    if n_mc == 0 {
        return Err(invalid("n_mc", "must be at least 1"));
    }
    let c = match cross_world {
        CrossWorld::Independent => 0.0,
        CrossWorld::SharedGaussian(c) if (-1.0..=1.0).contains(&c) => c,
        CrossWorld::SharedGaussian(c) => return Err(invalid("cross_world", format!("correlation {c} outside [-1, 1]"))),
    };
    let s = (1.0 - c * c).sqrt();
    let ch = Chols::new(sc);
    const CHUNKS: usize = 64;
    let all = (1usize << K) - 1;
    let partial: Vec<PatternMeans> = (0..CHUNKS)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = RngStream::derived(seed, &[TRUTH_TAG, chunk as u64]);
            let count = n_mc / CHUNKS + usize::from(chunk < n_mc % CHUNKS);
            let mut pm = PatternMeans {
                k: K,
                control: 0.0,
                treated: vec![0.0; all + 1],
                control_mixed: Vec::new(),
            };
            for _ in 0..count {
                let x = draw_covariates(&mut rng);
                let e0: [f64; K] = std::array::from_fn(|_| standard_normal(&mut rng));
                let e1: [f64; K] = std::array::from_fn(|i| c * e0[i] + s * standard_normal(&mut rng));
                let m0 = ch.apply(0, &e0, sc.mediator_mean(0, &x));
                let m1 = ch.apply(1, &e1, sc.mediator_mean(1, &x));
                pm.control += sc.outcome_mean(0, &m0, &x);
                for p in 0..=all {
                    let m: [f64; K] = std::array::from_fn(|k| if p & (1 << k) != 0 { m1[k] } else { m0[k] });
                    pm.treated[p] += sc.outcome_mean(1, &m, &x);
                }
            }
            pm
        })
        .collect();
    let mut total = PatternMeans {
        k: K,
        control: 0.0,
        treated: vec![0.0; all + 1],
        control_mixed: Vec::new(),
    };
    for p in &partial {
        total.control += p.control;
        for (a, b) in total.treated.iter_mut().zip(&p.treated) {
            *a += b;
        }
    }
    let f = 1.0 / n_mc as f64;
    total.control *= f;
    total.treated.iter_mut().for_each(|v| *v *= f);
    Ok(Truth {
        names: mediation_names(K, false),
        values: crate::effects::mediation_contrasts(&total),
        cross_world,
        n_mc,
    })
}

/// Least-squares coefficients of the mediator and outcome regressions.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineFit {
    /// Treatment coefficient in each mediator regression.
    pub alpha_z: Vec<f64>,
    /// Treatment coefficient in the outcome regression.
    pub beta_z: f64,
    /// Mediator coefficients in the outcome regression.
    pub beta_m: Vec<f64>,
    /// Effects aligned with [`mediation_names`].
    pub values: Vec<f64>,
}

/// Ordinary least squares with a main-effects design, effects as products
/// of coefficients.
pub fn baseline_point(data: &Dataset) -> Result<BaselineFit> {
    let n = data.n();
    let (k, p) = (data.k, data.p);
    let med_design = DMatrix::from_fn(n, 2 + p, |i, c| {
        let u = &data.units[i];
        match c {
            0 => 1.0,
            1 => u.z as f64,
            _ => u.x[c - 2],
        }
    });
    let mut alpha_z = Vec::with_capacity(k);
    for j in 0..k {
        let b = DVector::from_fn(n, |i, _| data.units[i].m[j]);
        let coef = least_squares(&med_design, &b).ok_or(Error::RankDeficient { context: "mediator regression" })?;
        alpha_z.push(coef[1]);
    }
    let out_design = DMatrix::from_fn(n, 2 + k + p, |i, c| {
        let u = &data.units[i];
        match c {
            0 => 1.0,
            1 => u.z as f64,
            c if c < 2 + k => u.m[c - 2],
            c => u.x[c - 2 - k],
        }
    });
    let y = DVector::from_fn(n, |i, _| data.units[i].y);
    let coef = least_squares(&out_design, &y).ok_or(Error::RankDeficient { context: "outcome regression" })?;
    let beta_z = coef[1];
    let beta_m: Vec<f64> = (0..k).map(|j| coef[2 + j]).collect();
    let nie: Vec<f64> = (0..k).map(|j| alpha_z[j] * beta_m[j]).collect();
    let jnie: f64 = nie.iter().sum();
    let pr = crate::effects::pairs(k);
    let mut values = vec![beta_z + jnie, beta_z];
    values.extend_from_slice(&nie);
    values.extend(pr.iter().map(|&(a, b)| nie[a] + nie[b]));
    values.push(jnie);
    // additive by construction
    values.extend(pr.iter().map(|_| 0.0));
    Ok(BaselineFit {
        alpha_z,
        beta_z,
        beta_m,
        values,
    })
}

/// Point estimates with percentile-bootstrap 95% intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineEstimate {
    pub names: Vec<String>,
    pub fit: BaselineFit,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Resamples whose design was rank deficient.
    pub failed_resamples: usize,
}

pub fn parametric_baseline(data: &Dataset, n_boot: usize, seed: u64) -> Result<BaselineEstimate> {
    let fit = baseline_point(data)?;
    let n = data.n();
    let boots: Vec<Option<Vec<f64>>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = RngStream::derived(seed, &[BOOT_TAG, b as u64]);
            let units = (0..n).map(|_| data.units[rng.random_range(0..n)].clone()).collect();
            let resampled = Dataset { units, ..data.clone() };
            baseline_point(&resampled).ok().map(|f| f.values)
        })
        .collect();
    let ok: Vec<&Vec<f64>> = boots.iter().flatten().collect();
    let m = fit.values.len();
    let mut lo = vec![f64::NAN; m];
    let mut hi = vec![f64::NAN; m];
    for e in 0..m {
        let mut col: Vec<f64> = ok.iter().map(|v| v[e]).collect();
        col.sort_by(f64::total_cmp);
        lo[e] = crate::effects::quantile_sorted(&col, 0.025);
        hi[e] = crate::effects::quantile_sorted(&col, 0.975);
    }
    Ok(BaselineEstimate {
        names: mediation_names(data.k, false),
        fit,
        lo,
        hi,
        failed_resamples: n_boot - ok.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    pub n: usize,
    pub n_reps: usize,
    pub chain: ChainConfig,
    /// Mediator draws per unit in the effect integrals.
    pub effects_n_mc: usize,
    /// Summarise every `draw_stride`-th retained draw.
    pub draw_stride: usize,
    pub truth_n_mc: usize,
    pub cross_world: CrossWorld,
    /// Bootstrap resamples for the baseline; 0 skips intervals.
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            n: 500,
            n_reps: 25,
            chain: ChainConfig {
                n_iter: 2000,
                n_burn: 500,
                thin: 3,
                ..Default::default()
            },
            effects_n_mc: 20,
            draw_stride: 5,
            truth_n_mc: 1_000_000,
            cross_world: CrossWorld::Independent,
            n_boot: 0,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessRow {
    pub corr_case: CorrCase,
    pub interaction_case: InteractionCase,
    pub estimand: String,
    pub method: &'static str,
    pub truth: f64,
    pub bias: f64,
    pub mse: f64,
    pub n_reps: usize,
}

/// Estimates of one replication, aligned with [`mediation_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct Replication {
    pub index: usize,
    pub bnp: Vec<f64>,
    pub parametric: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessResult {
    pub scenario: Scenario,
    pub truth: Truth,
    pub rows: Vec<HarnessRow>,
    pub replications: Vec<Replication>,
    /// `(replication index, error message)` of failed replications.
    pub failures: Vec<(usize, String)>,
}

/// Posterior-mean mediation effects from a fitted chain.
pub fn bnp_estimate(data: &Dataset, chain: &ChainConfig, n_mc: usize, draw_stride: usize, seed: u64) -> Result<Vec<f64>> {
    let out = run_chain(data, chain)?;
    let sel = stride_draws(&out.draws, draw_stride);
    if sel.is_empty() {
        return Err(invalid("draws", "no retained draws"));
    }
    let per: Vec<Vec<f64>> = sel
        .iter()
        .map(|d| crate::effects::mediation_contrasts(&DrawEngine::new(d, data, false).population_means(n_mc, seed, &Untilted)))
        .collect();
    let m = per[0].len();
    Ok((0..m).map(|e| per.iter().map(|v| v[e]).sum::<f64>() / per.len() as f64).collect())
}

/// Runs one replication: generate, fit both methods.
pub fn run_replication(sc: &Scenario, cfg: &HarnessConfig, r: usize) -> Result<Replication> {
    let mut rng = RngStream::derived(cfg.seed, &[REP_TAG, r as u64]);
    let (data, _) = generate_scenario(sc, cfg.n, &mut rng)?;
    let chain = ChainConfig {
        seed: rng.random(),
        ..cfg.chain.clone()
    };
    let bnp = bnp_estimate(&data, &chain, cfg.effects_n_mc, cfg.draw_stride, rng.random())?;
    let parametric = if cfg.n_boot > 0 {
        parametric_baseline(&data, cfg.n_boot, rng.random())?.fit.values
    } else {
        baseline_point(&data)?.values
    };
    Ok(Replication { index: r, bnp, parametric })
}

/// Bias and MSE against `truth` for both methods over successful
/// replications.
pub fn tabulate(sc: &Scenario, truth: &Truth, reps: &[Replication]) -> Vec<HarnessRow> {
    let mut rows = Vec::new();
    for (method, get) in [("BNP", (|r: &Replication| &r.bnp) as fn(&Replication) -> &Vec<f64>), ("Parametric", |r: &Replication| &r.parametric)] {
        for (e, name) in truth.names.iter().enumerate() {
            let errs: Vec<f64> = reps.iter().map(|r| get(r)[e] - truth.values[e]).collect();
            let n = errs.len().max(1) as f64;
            rows.push(HarnessRow {
                corr_case: sc.corr,
                interaction_case: sc.interaction,
                estimand: name.clone(),
                method,
                truth: truth.values[e],
                bias: errs.iter().sum::<f64>() / n,
                mse: errs.iter().map(|v| v * v).sum::<f64>() / n,
                n_reps: reps.len(),
            });
        }
    }
    rows
}

/// Replications run in parallel, one random stream each, merged by index.
pub fn replication_harness(sc: &Scenario, cfg: &HarnessConfig, truth: Option<Truth>) -> Result<HarnessResult> {
    if cfg.n_reps == 0 {
        return Err(invalid("n_reps", "must be at least 1"));
    }
    let truth = match truth {
        Some(t) => t,
        None => truth_oracle(sc, cfg.truth_n_mc, cfg.cross_world, cfg.seed)?,
    };
    let results: Vec<Result<Replication>> = (0..cfg.n_reps).into_par_iter().map(|r| run_replication(sc, cfg, r)).collect();
    let mut reps = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(v) => reps.push(v),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failures.push((r, e.to_string()));
            }
        }
    }
    Ok(HarnessResult {
        scenario: *sc,
        rows: tabulate(sc, &truth, &reps),
        truth,
        replications: reps,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_dataset;

    #[test]
    fn scenario_constants() {
        let c = Scenario::new(CorrCase::Correlated, InteractionCase::Single);
        assert_eq!(c.sigma(1)[(0, 1)], 0.128);
        assert_eq!(c.sigma(1)[(1, 1)], 0.64);
        assert_eq!(c.sigma(0)[(2, 0)], 0.01);
        assert_eq!(Scenario::new(CorrCase::Uncorrelated, InteractionCase::Single).sigma(0)[(0, 1)], 0.0);
        assert_eq!(c.h12, 1.5);
        assert_eq!(Scenario::new(CorrCase::Correlated, InteractionCase::Double).h23, 0.6);
        assert_eq!(c.table_label(), "Case A / Case 2");
        assert_eq!("double".parse::<InteractionCase>().unwrap(), InteractionCase::Double);
        assert!("triple".parse::<InteractionCase>().is_err());
    }

    #[test]
    fn generated_data_is_valid_and_reproducible() {
        let sc = Scenario::new(CorrCase::Correlated, InteractionCase::Double);
        let (a, la) = generate_scenario(&sc, 200, &mut RngStream::new(3, 0)).unwrap();
        let (b, _) = generate_scenario(&sc, 200, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(a, b);
        let a = validate_dataset(a).unwrap();
        assert_eq!((a.k, a.p, a.lower_bound), (3, 3, f64::NEG_INFINITY));
        for (u, (m0, m1)) in a.units.iter().zip(la.m0.iter().zip(&la.m1)) {
            let m = if u.z == 1 { m1 } else { m0 };
            assert_eq!(&u.m[..], &m[..]);
        }
        let treated = a.arm_count(1) as f64 / 200.0;
        assert!((treated - 0.5).abs() < 0.15);
    }

    #[test]
    fn truth_matches_published_values() {
        let t = truth_oracle(&Scenario::new(CorrCase::Uncorrelated, InteractionCase::Single), 1_000_000, CrossWorld::Independent, 1).unwrap();
        for (name, want) in [("TE", 0.73), ("JNIE_all", 1.73), ("NIE_1", -0.16), ("NIE_2", 2.45), ("NIE_3", -0.32), ("JNIE_12", 2.05), ("JNIE_13", -0.48), ("JNIE_23", 2.13)] {
            let got = t.get(name).unwrap();
            assert!((got - want).abs() < 0.02, "{name}: {got} vs {want}");
        }
        let t = truth_oracle(&Scenario::new(CorrCase::Correlated, InteractionCase::Single), 1_000_000, CrossWorld::Independent, 1).unwrap();
        assert!((t.get("TE").unwrap() - 0.92).abs() < 0.02);
        assert!((t.get("NIE_1").unwrap() - 0.03).abs() < 0.02);
    }

    #[test]
    fn direct_effect_is_minus_one_everywhere() {
        for sc in Scenario::all() {
            let t = truth_oracle(&sc, 20_000, CrossWorld::SharedGaussian(0.5), 2).unwrap();
            assert!((t.get("NDE").unwrap() + 1.0).abs() < 1e-9, "{sc}");
            assert_eq!(t.get("TE").unwrap(), t.get("NDE").unwrap() + t.get("JNIE_all").unwrap());
        }
    }

    #[test]
    fn additive_truth_has_additive_indirect_effects() {
        let t = truth_oracle(&Scenario::additive(CorrCase::Correlated), 50_000, CrossWorld::Independent, 3).unwrap();
        let g = |s: &str| t.get(s).unwrap();
        assert!((g("JNIE_all") - g("NIE_1") - g("NIE_2") - g("NIE_3")).abs() < 1e-9);
        for (j, k) in [(1, 2), (1, 3), (2, 3)] {
            assert!((g(&format!("JNIE_{j}{k}")) - g(&format!("NIE_{j}")) - g(&format!("NIE_{k}"))).abs() < 1e-9);
        }
        // 0.8 per unit of mediator change: 0.8 * (0.4 + 0.4 - 0.4)
        assert!((g("JNIE_all") - 0.32).abs() < 0.02);
    }

    #[test]
    fn zero_cross_world_coupling_is_independence() {
        let sc = Scenario::new(CorrCase::Correlated, InteractionCase::Double);
        let a = truth_oracle(&sc, 10_000, CrossWorld::Independent, 4).unwrap();
        let b = truth_oracle(&sc, 10_000, CrossWorld::SharedGaussian(0.0), 4).unwrap();
        assert_eq!(a.values, b.values);
        assert!(truth_oracle(&sc, 10, CrossWorld::SharedGaussian(1.5), 4).is_err());
    }

    fn noiseless(n: usize, alpha1: f64) -> Dataset {
        let mut rng = RngStream::new(8, 1);
        // units come in pairs sharing covariates and the first mediator's
        // noise, so that mediator's arm coefficient is recovered exactly
        let mut shared = (vec![], 0.0);
        let units = (0..n)
            .map(|i| {
                let z = (i % 2) as u8;
                let zf = z as f64;
                if z == 0 {
                    shared = (vec![standard_normal(&mut rng), standard_normal(&mut rng)], standard_normal(&mut rng));
                }
                let x = shared.0.clone();
                let m = vec![
                    1.0 + alpha1 * zf + 0.5 * x[0] + 0.3 * shared.1,
                    -0.5 + 0.7 * zf - 0.3 * x[1] + 0.2 * standard_normal(&mut rng),
                    0.2 - 0.4 * zf + x[0] * 0.1 + 0.2 * standard_normal(&mut rng),
                ];
                let y = 2.0 - 1.0 * zf + 0.5 * m[0] + 1.5 * m[1] - 0.8 * m[2] + 0.3 * x[0] - 0.2 * x[1];
                ObservedUnit::new(z, m, y, x)
            })
            .collect();
        Dataset::new(units, 3, 2, f64::NEG_INFINITY)
    }

    #[test]
    fn baseline_recovers_noiseless_coefficients() {
        let fit = baseline_point(&noiseless(50, 0.6)).unwrap();
        assert!((fit.beta_z + 1.0).abs() < 1e-8);
        for (b, want) in fit.beta_m.iter().zip([0.5, 1.5, -0.8]) {
            assert!((b - want).abs() < 1e-8);
        }
        assert!((fit.alpha_z[0] - 0.6).abs() < 1e-8);
        let names = mediation_names(3, false);
        let nie1 = fit.values[names.iter().position(|n| n == "NIE_1").unwrap()];
        assert!((nie1 - 0.3).abs() < 1e-8);
        assert_eq!(fit.values[0], fit.values[1] + fit.values[8]);
    }

    #[test]
    fn baseline_without_treatment_effect_on_mediator() {
        let fit = baseline_point(&noiseless(50, 0.0)).unwrap();
        assert!(fit.values[2].abs() < 1e-12);
    }

    #[test]
    fn baseline_rejects_rank_deficient_design() {
        let mut d = noiseless(20, 0.5);
        for u in &mut d.units {
            u.x[1] = 2.0 * u.x[0];
        }
        assert!(matches!(baseline_point(&d), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn bootstrap_intervals_cover_point() {
        let sc = Scenario::new(CorrCase::Uncorrelated, InteractionCase::Single);
        let (data, _) = generate_scenario(&sc, 300, &mut RngStream::new(9, 0)).unwrap();
        let a = parametric_baseline(&data, 200, 5).unwrap();
        let b = parametric_baseline(&data, 200, 5).unwrap();
        assert_eq!(a, b);
        for e in 0..9 {
            assert!(a.lo[e] <= a.fit.values[e] && a.fit.values[e] <= a.hi[e], "{}", a.names[e]);
        }
    }

    fn tiny_config() -> HarnessConfig {
        HarnessConfig {
            n: 60,
            n_reps: 2,
            chain: ChainConfig {
                n_iter: 30,
                n_burn: 10,
                thin: 4,
                ..Default::default()
            },
            effects_n_mc: 3,
            draw_stride: 1,
            truth_n_mc: 10_000,
            ..Default::default()
        }
    }

    #[test]
    fn harness_is_reproducible_and_tabulates() {
        let sc = Scenario::new(CorrCase::Uncorrelated, InteractionCase::Single);
        let cfg = tiny_config();
        let a = replication_harness(&sc, &cfg, None).unwrap();
        let b = replication_harness(&sc, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert!(a.failures.is_empty());
        assert_eq!(a.rows.len(), 2 * 12);
        assert!(a.rows.iter().all(|r| r.n_reps == 2));
        // single replication: bias is the estimate minus the truth
        let one = tabulate(&sc, &a.truth, &a.replications[..1]);
        for (row, e) in one.iter().take(12).zip(0..) {
            assert_eq!(row.bias, a.replications[0].bnp[e] - a.truth.values[e]);
            assert_eq!(row.mse, row.bias * row.bias);
        }
        let perfect = Replication {
            index: 0,
            bnp: a.truth.values.clone(),
            parametric: a.truth.values.clone(),
        };
        assert!(tabulate(&sc, &a.truth, &[perfect]).iter().all(|r| r.bias == 0.0 && r.mse == 0.0));
    }
}
