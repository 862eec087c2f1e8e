//! Relaxation of the cross-world outcome assumption.
//!
//! Units whose potential mediators move a lot between arms (measured by a
//! Mahalanobis distance of the cross-world differences) get an exponentially
//! tilted treated-arm outcome law when their mediators are set to the
//! opposite arm. Units below the threshold keep the untilted law.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::effects::{check_draw, full_pattern, mediation_contrasts, mediation_names, stride_draws, subsets, summarize, DrawEngine, Pattern, Summary, TreatedMean, Workspace};
use crate::error::{invalid, Error, Result};
use crate::imputation::MediatorSampler;
use crate::linalg::{log_sum_exp, min_eigenvalue, symmetrize, LowerCholesky};
use crate::model::{Dataset, PosteriorDraw};
use crate::outcome::{Component, OutcomeConditional};
use crate::rng::RngStream;

const COV_TAG: u64 = 0x7365_6e73;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Centre and scale of the observed treated outcomes; the tilt acts on the
/// standardized outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: f64,
    pub sd: f64,
}

impl Standardizer {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !mean.is_finite() || !(sd > 0.0) || !sd.is_finite() {
            return Err(invalid("standardizer", format!("need finite mean and positive sd, got ({mean}, {sd})")));
        }
        Ok(Self { mean, sd })
    }

    pub fn from_treated(data: &Dataset) -> Result<Self> {
        let (m, s) = data.outcome_moments(1);
        Self::new(m, s)
    }

    /// Slope of the tilt on the outcome scale.
    pub fn slope(&self, chi_product: f64) -> f64 {
        chi_product.ln() / self.sd
    }

    /// Default evaluation point for the density-ratio bound.
    pub fn y_star(&self) -> f64 {
        self.mean + self.sd
    }
}

/// Normal mixture after an exponential tilt.
#[derive(Clone, Debug, PartialEq)]
pub struct TiltedMixture {
    components: Vec<Component>,
}

impl TiltedMixture {
    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn ln_density(&self, y: f64) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() - 0.5 * (LN_2PI + c.var.ln() + (y - c.mean).powi(2) / c.var))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn density(&self, y: f64) -> f64 {
        self.ln_density(y).exp()
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }
}

/// Tilts `base` by `exp(t (y − centre))`: each component keeps its variance,
/// its mean moves by `t·var`, and its weight is reweighted by the
/// component's moment generating function.
pub(crate) fn tilt_components(base: &[Component], t: f64, centre: f64, out: &mut Vec<Component>) {
    out.clear();
    let mut max = f64::NEG_INFINITY;
    for c in base {
        let lw = c.weight.ln() + t * (c.mean - centre) + 0.5 * t * t * c.var;
        max = max.max(lw);
        out.push(Component {
            weight: lw,
            mean: c.mean + t * c.var,
            var: c.var,
        });
    }
    let mut total = 0.0;
    for c in out.iter_mut() {
        c.weight = (c.weight - max).exp();
        total += c.weight;
    }
    out.iter_mut().for_each(|c| c.weight /= total);
}

/// Mean of the tilted mixture without materialising it.
fn tilted_mean(base: &[Component], t: f64, centre: f64, lw: &mut Vec<f64>) -> f64 {
    lw.clear();
    let mut max = f64::NEG_INFINITY;
    for c in base {
        let v = c.weight.ln() + t * (c.mean - centre) + 0.5 * t * t * c.var;
        max = max.max(v);
        lw.push(v);
    }
    let mut total = 0.0;
    let mut acc = 0.0;
    for (c, v) in base.iter().zip(lw.iter()) {
        let w = (v - max).exp();
        total += w;
        acc += w * (c.mean + t * c.var);
    }
    acc / total
}

pub fn tilted_conditional_density(base: &[Component], chi_product: f64, std: &Standardizer) -> Result<TiltedMixture> {
    if !(chi_product > 0.0) || !chi_product.is_finite() {
        return Err(invalid("chi_product", format!("must be positive and finite, got {chi_product}")));
    }
    if base.is_empty() {
        return Err(invalid("base", "mixture has no components"));
    }
    if chi_product == 1.0 {
        return Ok(TiltedMixture { components: base.to_vec() });
    }
    let mut components = Vec::with_capacity(base.len());
    tilt_components(base, std.slope(chi_product), std.mean, &mut components);
    Ok(TiltedMixture { components })
}

/// Covariance of the cross-world differences `M(1) − M(0)`, with the
/// Cholesky factor of every principal sub-block.
#[derive(Clone, Debug)]
pub struct DifferenceCovariance {
    cov: DMatrix<f64>,
    corr: DMatrix<f64>,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Block {
    mask: usize,
    members: Vec<usize>,
    chol: LowerCholesky,
    factor: f64,
}

impl DifferenceCovariance {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        let k = cov.nrows();
        if k == 0 || cov.ncols() != k {
            return Err(Error::DimensionMismatch {
                expected: k.max(1),
                found: cov.ncols(),
            });
        }
        let sd: Vec<f64> = (0..k).map(|i| cov[(i, i)].sqrt()).collect();
        if sd.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: min_eigenvalue(&cov),
            });
        }
        let corr = DMatrix::from_fn(k, k, |i, j| cov[(i, j)] / (sd[i] * sd[j]));
        let mut blocks = Vec::new();
        for members in subsets(k) {
            let sub = DMatrix::from_fn(members.len(), members.len(), |a, b| cov[(members[a], members[b])]);
            let chol = LowerCholesky::new(&sub).map_err(|_| Error::NotPositiveDefinite {
                min_eigenvalue: min_eigenvalue(&sub),
            })?;
            let sum: f64 = members.iter().flat_map(|&a| members.iter().map(move |&b| (a, b))).map(|(a, b)| corr[(a, b)]).sum();
            blocks.push(Block {
                mask: members.iter().map(|&j| 1usize << j).sum(),
                members,
                chol,
                factor: sum.sqrt(),
            });
        }
        Ok(Self { cov, corr, blocks })
    }

    pub fn k(&self) -> usize {
        self.cov.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn correlation(&self) -> &DMatrix<f64> {
        &self.corr
    }

    /// Threshold multiplier for a subset: `sqrt(1ᵀ C 1)` over its correlation block.
    pub fn threshold_factor(&self, members: &[usize]) -> Option<f64> {
        self.block(members).map(|b| b.factor)
    }

    fn block(&self, members: &[usize]) -> Option<&Block> {
        self.blocks.iter().find(|b| b.members == members)
    }

    fn block_by_mask(&self, mask: usize) -> &Block {
        self.blocks.iter().find(|b| b.mask == mask).expect("nonempty subset")
    }
}

/// Monte Carlo estimate of the difference covariance implied by a draw's
/// marginals and copula, at the average covariate vector.
pub fn difference_covariance(draw: &PosteriorDraw, data: &Dataset, n_samples: usize, seed: u64) -> Result<DifferenceCovariance> {
    check_draw(draw, data)?;
    if n_samples < 2 * data.k + 2 {
        return Err(invalid("n_samples", format!("need at least {} samples", 2 * data.k + 2)));
    }
    let k = data.k;
    let n = data.n() as f64;
    let xbar: Vec<f64> = (0..data.p).map(|j| data.units.iter().map(|u| u.x[j]).sum::<f64>() / n).collect();
    let sampler = MediatorSampler::new(draw, &xbar);
    let mut rng = RngStream::derived(seed, &[COV_TAG, draw.iteration() as u64]);
    let mut z = vec![0.0; 2 * k];
    let mut h = vec![0.0; 2 * k];
    let mut mean = vec![0.0; k];
    let mut m2 = DMatrix::zeros(k, k);
    let mut delta = vec![0.0; k];
    for s in 0..n_samples {
        sampler.sample_scores(&mut rng, &mut z, &mut h);
        for j in 0..k {
            delta[j] = sampler.to_mediator(k + j, h[k + j]) - sampler.to_mediator(j, h[j]);
        }
        // Welford update
        let c = (s + 1) as f64;
        let before: Vec<f64> = delta.iter().zip(&mean).map(|(d, m)| d - m).collect();
        for j in 0..k {
            mean[j] += before[j] / c;
        }
        for a in 0..k {
            for b in 0..k {
                m2[(a, b)] += before[a] * (delta[b] - mean[b]);
            }
        }
    }
    let mut cov = m2 / (n_samples as f64 - 1.0);
    symmetrize(&mut cov);
    DifferenceCovariance::new(cov)
}

/// Distances of one unit's cross-world differences for every nonempty
/// subset of mediators, in [`subsets`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct DStatistics {
    pub subsets: Vec<Vec<usize>>,
    pub values: Vec<f64>,
    pub factors: Vec<f64>,
}

impl DStatistics {
    pub fn thresholds(&self, epsilon: f64) -> Vec<f64> {
        self.factors.iter().map(|f| epsilon * f).collect()
    }

    pub fn get(&self, members: &[usize]) -> Option<f64> {
        self.subsets.iter().position(|s| s == members).map(|i| self.values[i])
    }
}

fn mahalanobis(block: &Block, delta: &[f64], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(block.members.iter().map(|&j| delta[j]));
    let mut tmp = vec![0.0; scratch.len()];
    block.chol.inv_quad(scratch, &mut tmp).sqrt()
}

pub fn d_statistics(delta: &[f64], cov: &DifferenceCovariance) -> Result<DStatistics> {
    if delta.len() != cov.k() {
        return Err(Error::DimensionMismatch {
            expected: cov.k(),
            found: delta.len(),
        });
    }
    let mut scratch = Vec::with_capacity(delta.len());
    Ok(DStatistics {
        subsets: cov.blocks.iter().map(|b| b.members.clone()).collect(),
        values: cov.blocks.iter().map(|b| mahalanobis(b, delta, &mut scratch)).collect(),
        factors: cov.blocks.iter().map(|b| b.factor).collect(),
    })
}

fn unit_deltas(draw: &PosteriorDraw, i: usize) -> Vec<f64> {
    let k = draw.k();
    let m = draw.unit_mediators(i);
    (0..k).map(|j| m[k + j] - m[j]).collect()
}

/// Admissible region for the tilt parameters: every `χ_k ≥ 1` and
/// `Πχ_k ≤ upper`, where `upper` is `None` when no unit reaches the
/// all-mediator threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ChiBounds {
    pub upper: Option<f64>,
    pub n_units: usize,
}

impl ChiBounds {
    pub fn admits(&self, chi: &[f64]) -> bool {
        chi.iter().all(|&c| c >= 1.0) && self.upper.is_none_or(|u| chi.iter().product::<f64>() <= u)
    }
}

/// Ratio of the averaged arm-0 and arm-1 outcome densities at `y_star`,
/// over units whose all-mediator distance reaches its threshold.
pub fn chi_bounds(draw: &PosteriorDraw, data: &Dataset, cov: &DifferenceCovariance, epsilon: f64, y_star: f64) -> Result<ChiBounds> {
    check_draw(draw, data)?;
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon", "must be positive"));
    }
    let k = data.k;
    let all = cov.block_by_mask(full_pattern(k));
    let threshold = epsilon * all.factor;
    let cond = [draw.outcome(0).conditional(), draw.outcome(1).conditional()];
    let mut ws = Workspace::new(2 * k + data.p);
    let mut w = vec![0.0; 2 * k + data.p];
    let mut scratch = Vec::new();
    let (mut f0, mut f1, mut n) = (0.0, 0.0, 0usize);
    for i in 0..data.n() {
        if mahalanobis(all, &unit_deltas(draw, i), &mut scratch) < threshold {
            continue;
        }
        w[..2 * k].copy_from_slice(draw.unit_mediators(i));
        w[2 * k..].copy_from_slice(&data.units[i].x);
        f0 += cond[0].ln_density_with(y_star, &w, &mut ws.buf, &mut ws.scratch).exp();
        f1 += cond[1].ln_density_with(y_star, &w, &mut ws.buf, &mut ws.scratch).exp();
        n += 1;
    }
    // a vanishing treated density leaves the product unbounded as well
    let upper = (n > 0 && f1 > 0.0).then(|| f0 / f1);
    Ok(ChiBounds { upper, n_units: n })
}

/// Treated-arm means tilted per unit and pattern.
struct Tilt<'a> {
    slopes: &'a [f64],
    tilted: &'a [bool],
    n_patterns: usize,
    centre: f64,
}

impl TreatedMean for Tilt<'_> {
    fn mean(&self, cond: &OutcomeConditional, unit: usize, pattern: Pattern, w: &[f64], ws: &mut Workspace) -> f64 {
        let t = self.slopes[pattern];
        if t == 0.0 || !self.tilted[unit * self.n_patterns + pattern] {
            return cond.mean_with(w, &mut ws.buf, &mut ws.scratch);
        }
        cond.components_into(w, &mut ws.comps, &mut ws.buf, &mut ws.scratch);
        tilted_mean(&ws.comps, t, self.centre, &mut ws.buf)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityConfig {
    pub epsilons: Vec<f64>,
    /// Tilt vectors `(χ_1, …, χ_K)`; an empty list yields an empty grid.
    pub chis: Vec<Vec<f64>>,
    pub n_mc: usize,
    pub seed: u64,
    pub draw_stride: usize,
    /// Monte Carlo size for the difference covariance.
    pub cov_samples: usize,
    pub standardizer: Option<Standardizer>,
    /// Density-ratio evaluation point; defaults to one sd above the treated mean.
    pub y_star: Option<f64>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.5, 1.0, 1.5, 2.0],
            chis: Vec::new(),
            n_mc: 100,
            seed: 0,
            draw_stride: 1,
            cov_samples: 4000,
            standardizer: None,
            y_star: None,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0)) {
            return Err(invalid("epsilon", format!("must be positive, got {e}")));
        }
        for chi in &self.chis {
            if chi.len() != k {
                return Err(invalid("chi", format!("need {k} entries, got {}", chi.len())));
            }
            if let Some(c) = chi.iter().find(|c| !(**c >= 1.0) || !c.is_finite()) {
                return Err(invalid("chi", format!("entries must be finite and at least 1, got {c}")));
            }
        }
        if self.n_mc == 0 {
            return Err(invalid("n_mc", "must be at least 1"));
        }
        Ok(())
    }
}

/// A grid of `χ` vectors: all ones plus each single mediator and all
/// mediators jointly at every level.
pub fn default_chi_grid(k: usize, levels: &[f64]) -> Vec<Vec<f64>> {
    let mut grid = vec![vec![1.0; k]];
    for &c in levels {
        for j in 0..k {
            let mut v = vec![1.0; k];
            v[j] = c;
            grid.push(v);
        }
        if k > 1 {
            grid.push(vec![c; k]);
        }
    }
    grid
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityPoint {
    pub epsilon: f64,
    pub chi: Vec<f64>,
    pub draws: Vec<Vec<f64>>,
    pub summary: Vec<Summary>,
    /// Share of unit-pattern pairs with a nontrivial tilt, averaged over draws.
    pub tilted_share: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonBounds {
    pub epsilon: f64,
    pub per_draw: Vec<ChiBounds>,
}

impl EpsilonBounds {
    /// Median of the finite upper bounds, `None` if every draw is unbounded.
    pub fn median_upper(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.per_draw.iter().filter_map(|b| b.upper).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(crate::effects::quantile_sorted(&v, 0.5))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityGrid {
    pub names: Vec<String>,
    pub iterations: Vec<usize>,
    pub standardizer: Standardizer,
    pub y_star: f64,
    pub points: Vec<SensitivityPoint>,
    pub bounds: Vec<EpsilonBounds>,
}

/// Per-unit distances for each pattern of the treated arm; the subset of a
/// pattern is the set of mediators held at their control value.
fn pattern_distances(draw: &PosteriorDraw, cov: &DifferenceCovariance) -> (Vec<f64>, Vec<f64>) {
    let k = draw.k();
    let np = 1usize << k;
    let full = full_pattern(k);
    let mut scratch = Vec::new();
    let factors: Vec<f64> = (0..np).map(|p| if p == full { f64::INFINITY } else { cov.block_by_mask(full ^ p).factor }).collect();
    let mut dist = vec![0.0; draw.n() * np];
    for i in 0..draw.n() {
        let delta = unit_deltas(draw, i);
        for p in 0..np {
            if p != full {
                dist[i * np + p] = mahalanobis(cov.block_by_mask(full ^ p), &delta, &mut scratch);
            }
        }
    }
    (dist, factors)
}

pub fn sensitivity_effects(draws: &[PosteriorDraw], data: &Dataset, cfg: &SensitivityConfig) -> Result<SensitivityGrid> {
    if draws.is_empty() {
        return Err(invalid("draws", "no retained draws"));
    }
    let k = data.k;
    cfg.validate(k)?;
    let std = match cfg.standardizer {
        Some(s) => s,
        None => Standardizer::from_treated(data)?,
    };
    let y_star = cfg.y_star.unwrap_or(std.y_star());
    let sel = stride_draws(draws, cfg.draw_stride);
    for d in &sel {
        check_draw(d, data)?;
    }
    let np = 1usize << k;
    let full = full_pattern(k);
    let slopes: Vec<Vec<f64>> = cfg
        .chis
        .iter()
        .map(|chi| {
            (0..np)
                .map(|p| {
                    let prod: f64 = (0..k).filter(|j| (full ^ p) & (1 << j) != 0).map(|j| chi[j]).product();
                    if prod == 1.0 {
                        0.0
                    } else {
                        std.slope(prod)
                    }
                })
                .collect()
        })
        .collect();
    let per_draw: Vec<(Vec<Vec<f64>>, Vec<f64>, Vec<ChiBounds>)> = sel
        .par_iter()
        .map(|d| -> Result<_> {
            let cov = difference_covariance(d, data, cfg.cov_samples, cfg.seed)?;
            let (dist, factors) = pattern_distances(d, &cov);
            let engine = DrawEngine::new(d, data, false);
            let mut values = Vec::with_capacity(cfg.epsilons.len() * cfg.chis.len());
            let mut shares = Vec::with_capacity(values.capacity());
            for &eps in &cfg.epsilons {
                let tilted: Vec<bool> = dist.iter().enumerate().map(|(ix, &v)| v >= eps * factors[ix % np]).collect();
                for s in &slopes {
                    let how = Tilt {
                        slopes: s,
                        tilted: &tilted,
                        n_patterns: np,
                        centre: std.mean,
                    };
                    let active = tilted.iter().enumerate().filter(|(ix, &b)| b && s[ix % np] != 0.0).count();
                    shares.push(active as f64 / tilted.len() as f64);
                    values.push(mediation_contrasts(&engine.population_means(cfg.n_mc, cfg.seed, &how)));
                }
            }
            let bounds = cfg.epsilons.iter().map(|&e| chi_bounds(d, data, &cov, e, y_star)).collect::<Result<Vec<_>>>()?;
            Ok((values, shares, bounds))
        })
        .collect::<Result<_>>()?;
    let names = mediation_names(k, false);
    let mut points = Vec::with_capacity(cfg.epsilons.len() * cfg.chis.len());
    for (e, &eps) in cfg.epsilons.iter().enumerate() {
        for (c, chi) in cfg.chis.iter().enumerate() {
            let g = e * cfg.chis.len() + c;
            let draws_g: Vec<Vec<f64>> = per_draw.iter().map(|d| d.0[g].clone()).collect();
            let summary = (0..names.len()).map(|n| summarize(&draws_g.iter().map(|v| v[n]).collect::<Vec<_>>())).collect();
            let tilted_share = per_draw.iter().map(|d| d.1[g]).sum::<f64>() / per_draw.len() as f64;
            points.push(SensitivityPoint {
                epsilon: eps,
                chi: chi.clone(),
                draws: draws_g,
                summary,
                tilted_share,
            });
        }
    }
    let bounds = cfg
        .epsilons
        .iter()
        .enumerate()
        .map(|(e, &eps)| EpsilonBounds {
            epsilon: eps,
            per_draw: per_draw.iter().map(|d| d.2[e].clone()).collect(),
        })
        .collect();
    Ok(SensitivityGrid {
        names,
        iterations: sel.iter().map(|d| d.iteration()).collect(),
        standardizer: std,
        y_star,
        points,
        bounds,
    })
}
