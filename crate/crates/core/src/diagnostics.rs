//! Fit and convergence diagnostics: DIC₃ for mediator margins, posterior
//! predictive replicates and per-parameter trace statistics.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::chain::ChainAcceptance;
use crate::distributions::{gamma_rate, standard_normal};
use crate::effects::quantile_sorted;
use crate::error::{invalid, Error, Result};
use crate::imputation::MediatorSampler;
use crate::linalg::LowerCholesky;
use crate::marginal::{least_squares, MarginalParams};
use crate::model::{Dataset, PosteriorDraw};
use crate::rng::RngStream;

const PREDICTIVE_TAG: u64 = 0x7070_6368;

/// Observed values of one mediator in one arm, with their covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginSample {
    /// Dataset row of each value, used in error reports.
    pub index: Vec<usize>,
    pub t: Vec<f64>,
    /// Row-major `n × p` covariates.
    pub x: Vec<f64>,
    pub p: usize,
    pub lower: f64,
}

impl MarginSample {
    pub fn from_dataset(data: &Dataset, k: usize, z: u8) -> Result<Self> {
        if k >= data.k || z > 1 {
            return Err(invalid("margin", format!("no margin ({k}, {z}) with K = {}", data.k)));
        }
        let index = data.arm_indices(z);
        Ok(Self {
            t: index.iter().map(|&i| data.units[i].m[k]).collect(),
            x: index.iter().flat_map(|&i| data.units[i].x.iter().copied()).collect(),
            index,
            p: data.p,
            lower: data.lower_bound,
        })
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
}

/// `−4 · mean_l Σᵢ log f(tᵢ | θ_l) + 2 Σᵢ log( mean_l f(tᵢ | θ_l) )`.
///
/// A single draw is accepted and gives `−2 Σᵢ log f(tᵢ | θ)`.
pub fn dic3(draws: &[MarginalParams], sample: &MarginSample) -> Result<f64> {
    if draws.is_empty() {
        return Err(invalid("draws", "need at least one draw"));
    }
    if sample.n() == 0 {
        return Err(invalid("sample", "margin has no observations"));
    }
    // ln f for every (draw, unit)
    let lnf: Vec<Vec<f64>> = draws
        .par_iter()
        .map(|d| (0..sample.n()).map(|i| d.ln_pdf(sample.t[i], sample.row(i))).collect())
        .collect();
    let m = draws.len() as f64;
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..sample.n() {
        let col: Vec<f64> = lnf.iter().map(|r| r[i]).collect();
        if col.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::ZeroPredictiveDensity { index: sample.index[i] });
        }
        first += col.iter().sum::<f64>();
        second += crate::linalg::log_sum_exp(&col) - m.ln();
    }
    Ok(-4.0 * first / m + 2.0 * second)
}

/// DIC₃ of margin `(k, z)` over the retained draws.
pub fn margin_dic3(draws: &[PosteriorDraw], data: &Dataset, k: usize, z: u8) -> Result<f64> {
    let sample = MarginSample::from_dataset(data, k, z)?;
    let params: Vec<MarginalParams> = draws.iter().map(|d| d.marginal(k, z).clone()).collect();
    dic3(&params, &sample)
}

/// Draws from the flat-prior posterior of a single normal regression of the
/// margin on its covariates, packed as one-component margins.
pub fn parametric_margin_draws(sample: &MarginSample, n_draws: usize, seed: u64) -> Result<Vec<MarginalParams>> {
    let n = sample.n();
    let q = sample.p + 1;
    if n <= q + 1 {
        return Err(invalid("sample", format!("{n} observations cannot support {q} coefficients")));
    }
    let design = DMatrix::from_fn(n, q, |i, j| if j == 0 { 1.0 } else { sample.row(i)[j - 1] });
    let y = DVector::from_column_slice(&sample.t);
    let coef = least_squares(&design, &y).ok_or(Error::RankDeficient { context: "parametric margin" })?;
    let resid = &y - &design * &coef;
    let df = (n - q) as f64;
    let s2 = resid.norm_squared() / df;
    let xtx_inv = (design.transpose() * &design).try_inverse().ok_or(Error::RankDeficient { context: "parametric margin" })?;
    let chol = LowerCholesky::new(&xtx_inv)?;
    let mut rng = RngStream::new(seed, 0x706d);
    let mut z = vec![0.0; q];
    let mut e = vec![0.0; q];
    Ok((0..n_draws)
        .map(|_| {
            // σ² | y ~ scaled inverse χ²(n − q, s²)
            let sigma2 = df * s2 / (2.0 * gamma_rate(&mut rng, df / 2.0, 1.0));
            z.iter_mut().for_each(|v| *v = standard_normal(&mut rng));
            chol.mul_lower(&z, &mut e);
            let b: Vec<f64> = (0..q).map(|j| coef[j] + sigma2.sqrt() * e[j]).collect();
            MarginalParams {
                intercepts: vec![b[0]],
                precisions: vec![1.0 / sigma2],
                beta: b[1..].to_vec(),
                sticks: vec![1.0],
                weights: vec![1.0],
                lambda: 1.0,
                mu: b[0],
                s: 1.0,
                a_star: 1.0,
                lower: sample.lower,
            }
        })
        .collect())
}

/// Replicated datasets from the posterior predictive distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveCheck {
    pub k: usize,
    /// `[replicate][unit * K + k]`, mediators under each unit's own arm.
    pub mediators: Vec<Vec<f64>>,
    /// `[replicate][unit]`.
    pub outcomes: Vec<Vec<f64>>,
    /// Iteration of the draw behind each replicate.
    pub iterations: Vec<usize>,
    pub mediator_means: Vec<f64>,
    pub outcome_means: Vec<f64>,
}

impl PredictiveCheck {
    pub fn n_rep(&self) -> usize {
        self.outcomes.len()
    }

    /// Central `level` band of the outcome replicates for every unit.
    pub fn outcome_band(&self, level: f64) -> Vec<(f64, f64)> {
        let n = self.outcome_means.len();
        (0..n).map(|i| band(self.outcomes.iter().map(|r| r[i]).collect(), level)).collect()
    }

    pub fn mediator_band(&self, k: usize, level: f64) -> Vec<(f64, f64)> {
        let n = self.outcome_means.len();
        (0..n).map(|i| band(self.mediators.iter().map(|r| r[i * self.k + k]).collect(), level)).collect()
    }

    /// Share of observed outcomes inside their central `level` band.
    pub fn outcome_coverage(&self, data: &Dataset, level: f64) -> f64 {
        let hits = self.outcome_band(level).iter().zip(&data.units).filter(|((lo, hi), u)| *lo <= u.y && u.y <= *hi).count();
        hits as f64 / data.n() as f64
    }

    pub fn mediator_coverage(&self, data: &Dataset, k: usize, level: f64) -> f64 {
        let hits = self.mediator_band(k, level).iter().zip(&data.units).filter(|((lo, hi), u)| *lo <= u.m[k] && u.m[k] <= *hi).count();
        hits as f64 / data.n() as f64
    }

    /// Each outcome replicate sorted ascending, for overlaying on the sorted
    /// observed outcomes.
    pub fn sorted_outcome_curves(&self) -> Vec<Vec<f64>> {
        self.outcomes
            .iter()
            .map(|r| {
                let mut v = r.clone();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect()
    }

    pub fn sorted_mediator_curves(&self, k: usize) -> Vec<Vec<f64>> {
        self.mediators
            .iter()
            .map(|r| {
                let mut v: Vec<f64> = r.iter().skip(k).step_by(self.k).copied().collect();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect()
    }
}

fn band(mut v: Vec<f64>, level: f64) -> (f64, f64) {
    v.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    (quantile_sorted(&v, a), quantile_sorted(&v, 1.0 - a))
}

/// `n_rep` replicates of every unit's mediators and outcome given its
/// covariates and arm; replicate `r` uses draws spread evenly over the chain.
pub fn posterior_predictive(draws: &[PosteriorDraw], data: &Dataset, n_rep: usize, seed: u64) -> Result<PredictiveCheck> {
    if n_rep == 0 {
        return Err(invalid("n_rep", "must be at least 1"));
    }
    if draws.is_empty() {
        return Err(invalid("draws", "no retained draws"));
    }
    for d in draws {
        crate::effects::check_draw(d, data)?;
    }
    let k = data.k;
    let picks: Vec<usize> = (0..n_rep).map(|r| r * draws.len() / n_rep).collect();
    let reps: Vec<(Vec<f64>, Vec<f64>)> = picks
        .par_iter()
        .enumerate()
        .map(|(r, &di)| {
            let d = &draws[di];
            let cond = [d.outcome(0).conditional(), d.outcome(1).conditional()];
            let mut rng = RngStream::derived(seed, &[PREDICTIVE_TAG, r as u64, d.iteration() as u64]);
            let mut zs = vec![0.0; 2 * k];
            let mut h = vec![0.0; 2 * k];
            let mut w = vec![0.0; 2 * k + data.p];
            let mut med = Vec::with_capacity(data.n() * k);
            let mut ys = Vec::with_capacity(data.n());
            for u in &data.units {
                let s = MediatorSampler::new(d, &u.x);
                s.sample_scores(&mut rng, &mut zs, &mut h);
                for j in 0..2 * k {
                    w[j] = s.to_mediator(j, h[j]);
                }
                w[2 * k..].copy_from_slice(&u.x);
                let off = u.z as usize * k;
                med.extend_from_slice(&w[off..off + k]);
                ys.push(cond[u.z as usize].sample(&w, &mut rng));
            }
            (med, ys)
        })
        .collect();
    let nr = n_rep as f64;
    let mut mediator_means = vec![0.0; data.n() * k];
    let mut outcome_means = vec![0.0; data.n()];
    for (m, y) in &reps {
        mediator_means.iter_mut().zip(m).for_each(|(a, v)| *a += v / nr);
        outcome_means.iter_mut().zip(y).for_each(|(a, v)| *a += v / nr);
    }
    let (mediators, outcomes) = reps.into_iter().unzip();
    Ok(PredictiveCheck {
        k,
        mediators,
        outcomes,
        iterations: picks.iter().map(|&i| draws[i].iteration()).collect(),
        mediator_means,
        outcome_means,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStats {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub lag1: f64,
    pub ess: f64,
    /// Set when the trace is constant, in which case `lag1` is reported as 0.
    pub degenerate: bool,
}

/// Summary of one scalar trace; the effective sample size uses the
/// initial positive sequence of paired autocovariances.
pub fn trace_stats(name: &str, v: &[f64]) -> TraceStats {
    let n = v.len();
    let nf = n as f64;
    let mean = v.iter().sum::<f64>() / nf;
    let sd = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt() } else { 0.0 };
    let degenerate = n < 3 || v.iter().all(|x| *x == v[0]);
    if degenerate {
        return TraceStats {
            name: name.to_string(),
            n,
            mean,
            sd: if n < 2 { 0.0 } else { sd },
            lag1: 0.0,
            ess: nf,
            degenerate: true,
        };
    }
    TraceStats {
        name: name.to_string(),
        n,
        mean,
        sd,
        lag1: pearson(&v[..n - 1], &v[1..]),
        ess: ess(v),
        degenerate: false,
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

fn ess(v: &[f64]) -> f64 {
    let n = v.len();
    let nf = n as f64;
    let mean = v.iter().sum::<f64>() / nf;
    let acov = |lag: usize| (0..n - lag).map(|t| (v[t] - mean) * (v[t + lag] - mean)).sum::<f64>() / nf;
    let g0 = acov(0);
    let mut sum = 0.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = acov(2 * m) + acov(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        m += 1;
    }
    let tau = (-1.0 + 2.0 * sum / g0).max(1.0 / nf.log10().max(1.0));
    nf / tau
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSummary {
    pub stats: Vec<TraceStats>,
    pub acceptance: Vec<(&'static str, f64)>,
}

/// Global-parameter traces of a chain: per-margin concentration and
/// hyperparameters, the copula entries and the outcome concentrations.
pub fn global_traces(draws: &[PosteriorDraw]) -> Vec<(String, Vec<f64>)> {
    let Some(first) = draws.first() else {
        return Vec::new();
    };
    let k = first.k();
    let mut out = Vec::new();
    for z in 0..2u8 {
        for j in 0..k {
            let tag = format!("m{}_z{}", j + 1, z);
            let m = |f: fn(&MarginalParams) -> f64| draws.iter().map(|d| f(d.marginal(j, z))).collect::<Vec<_>>();
            out.push((format!("{tag}_lambda"), m(|p| p.lambda)));
            out.push((format!("{tag}_mu"), m(|p| p.mu)));
            out.push((format!("{tag}_s"), m(|p| p.s)));
            out.push((format!("{tag}_a_star"), m(|p| p.a_star)));
        }
    }
    let d = 2 * k;
    for a in 0..d {
        for b in a + 1..d {
            out.push((format!("r_{}_{}", a + 1, b + 1), draws.iter().map(|x| x.correlation().get(a, b)).collect()));
        }
    }
    if first.correlation().rho().is_some() {
        out.push(("rho".to_string(), draws.iter().map(|x| x.correlation().rho().unwrap_or(f64::NAN)).collect()));
    }
    for z in 0..2u8 {
        out.push((format!("outcome_z{z}_alpha"), draws.iter().map(|x| x.outcome(z).alpha).collect()));
    }
    out
}

pub fn trace_summary(draws: &[PosteriorDraw], acceptance: &ChainAcceptance) -> TraceSummary {
    TraceSummary {
        stats: global_traces(draws).iter().map(|(n, v)| trace_stats(n, v)).collect(),
        acceptance: acceptance.rates(),
    }
}
