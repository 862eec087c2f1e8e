//! Causal estimands per posterior draw: mediation contrasts, principal
//! (associative and dissociative) effects, strata cross-tables and CEP
//! surfaces.
//!
//! Mediator patterns are bitmasks over mediators: bit `k` set means
//! mediator `k` takes its value under treatment. The treated outcome
//! regression is evaluated at `(M(0), M(p), x)`, i.e. the pattern replaces
//! the treated-mediator slot while the control slot keeps the unit's
//! natural control mediators.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::distributions::{clamp_unit, standard_normal, std_normal_cdf};
use crate::error::{invalid, Result};
use crate::imputation::MediatorSampler;
use crate::linalg::LowerCholesky;
use crate::marginal::MarginalMixture;
use crate::model::{Dataset, PosteriorDraw};
use crate::outcome::{Component, OutcomeConditional};
use crate::rng::RngStream;

const EFFECT_TAG: u64 = 0x6566_6665_6374;
const CEP_TAG: u64 = 0x6365_7073;

pub type Pattern = usize;

pub fn full_pattern(k: usize) -> Pattern {
    (1 << k) - 1
}

pub fn pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|j| (j + 1..k).map(move |l| (j, l))).collect()
}

/// Patterns entering the contrasts: all treated, all control, and all
/// treated with one or two mediators switched to control.
pub fn contrast_patterns(k: usize) -> Vec<Pattern> {
    let all = full_pattern(k);
    let mut v = vec![all, 0];
    v.extend((0..k).map(|j| all ^ (1 << j)));
    v.extend(pairs(k).into_iter().map(|(j, l)| all ^ (1 << j) ^ (1 << l)));
    v.sort_unstable();
    v.dedup();
    v
}

/// One-based mediator indices joined into a label, e.g. `[0, 2] -> "13"`.
pub fn index_label(idx: &[usize]) -> String {
    let sep = if idx.iter().any(|&i| i >= 9) { "_" } else { "" };
    idx.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(sep)
}

/// Population means of the outcome under mediator patterns for one draw.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternMeans {
    pub k: usize,
    /// `E[Y(0; M(0,…,0))]`.
    pub control: f64,
    /// `E[Y(1; M(p))]` indexed by pattern; NaN where not needed.
    pub treated: Vec<f64>,
    /// `E[Y(0; M(p))]` indexed by pattern, only for single-mediator
    /// patterns and only when starred contrasts are requested.
    pub control_mixed: Vec<f64>,
}

impl PatternMeans {
    fn zeros(k: usize, star: bool) -> Self {
        let len = 1 << k;
        Self {
            k,
            control: 0.0,
            treated: vec![0.0; len],
            control_mixed: if star { vec![0.0; len] } else { Vec::new() },
        }
    }

    fn add(&mut self, o: &PatternMeans) {
        self.control += o.control;
        for (a, b) in self.treated.iter_mut().zip(&o.treated) {
            *a += b;
        }
        for (a, b) in self.control_mixed.iter_mut().zip(&o.control_mixed) {
            *a += b;
        }
    }

    fn scale(&mut self, f: f64) {
        self.control *= f;
        self.treated.iter_mut().for_each(|v| *v *= f);
        self.control_mixed.iter_mut().for_each(|v| *v *= f);
    }

    fn mask_unused(&mut self) {
        let used = contrast_patterns(self.k);
        for (p, v) in self.treated.iter_mut().enumerate() {
            if !used.contains(&p) {
                *v = f64::NAN;
            }
        }
        for (p, v) in self.control_mixed.iter_mut().enumerate() {
            if p.count_ones() != 1 {
                *v = f64::NAN;
            }
        }
    }
}

/// Estimand names in reporting order: TE, NDE, NIE_k, JNIE_jk, JNIE_all,
/// overlap_jk, then the starred NIE*_k when requested.
pub fn mediation_names(k: usize, star: bool) -> Vec<String> {
    let mut v = vec!["TE".to_string(), "NDE".to_string()];
    v.extend((0..k).map(|j| format!("NIE_{}", j + 1)));
    v.extend(pairs(k).iter().map(|&(j, l)| format!("JNIE_{}", index_label(&[j, l]))));
    v.push("JNIE_all".to_string());
    v.extend(pairs(k).iter().map(|&(j, l)| format!("overlap_{}", index_label(&[j, l]))));
    if star {
        v.extend((0..k).map(|j| format!("NIE*_{}", j + 1)));
    }
    v
}

/// Contrasts aligned with [`mediation_names`]. `TE` is formed as
/// `NDE + JNIE_all` so the decomposition holds to the last bit.
pub fn mediation_contrasts(pm: &PatternMeans) -> Vec<f64> {
    let k = pm.k;
    let all = full_pattern(k);
    let e1 = &pm.treated;
    let nde = e1[0] - pm.control;
    let jnie = e1[all] - e1[0];
    let nie: Vec<f64> = (0..k).map(|j| e1[all] - e1[all ^ (1 << j)]).collect();
    let pr = pairs(k);
    let jnie_pair: Vec<f64> = pr.iter().map(|&(j, l)| e1[all] - e1[all ^ (1 << j) ^ (1 << l)]).collect();
    let mut v = vec![nde + jnie, nde];
    v.extend_from_slice(&nie);
    v.extend_from_slice(&jnie_pair);
    v.push(jnie);
    v.extend(pr.iter().zip(&jnie_pair).map(|(&(j, l), jp)| nie[j] + nie[l] - jp));
    if !pm.control_mixed.is_empty() {
        v.extend((0..k).map(|j| pm.control_mixed[1 << j] - pm.control));
    }
    v
}

/// Reusable buffers for conditional-mean evaluation.
#[derive(Clone, Debug, Default)]
pub(crate) struct Workspace {
    pub buf: Vec<f64>,
    pub scratch: Vec<f64>,
    pub comps: Vec<Component>,
}

impl Workspace {
    pub fn new(r: usize) -> Self {
        Self {
            buf: Vec::with_capacity(32),
            scratch: vec![0.0; r],
            comps: Vec::with_capacity(32),
        }
    }
}

/// How the treated outcome mean is evaluated under a mediator pattern.
pub(crate) trait TreatedMean: Sync {
    fn mean(&self, cond: &OutcomeConditional, unit: usize, pattern: Pattern, w: &[f64], ws: &mut Workspace) -> f64;
}

pub(crate) struct Untilted;

impl TreatedMean for Untilted {
    #[inline]
    fn mean(&self, cond: &OutcomeConditional, _: usize, _: Pattern, w: &[f64], ws: &mut Workspace) -> f64 {
        cond.mean_with(w, &mut ws.buf, &mut ws.scratch)
    }
}

/// Everything needed to integrate over counterfactual mediators for one
/// posterior draw.
pub(crate) struct DrawEngine<'a> {
    pub draw: &'a PosteriorDraw,
    pub data: &'a Dataset,
    pub cond: [OutcomeConditional; 2],
    chol: LowerCholesky,
    patterns: Vec<Pattern>,
    star: bool,
}

impl<'a> DrawEngine<'a> {
    pub fn new(draw: &'a PosteriorDraw, data: &'a Dataset, star: bool) -> Self {
        Self {
            draw,
            data,
            cond: [draw.outcome(0).conditional(), draw.outcome(1).conditional()],
            chol: LowerCholesky::new(draw.correlation().matrix()).expect("stored correlation is PD"),
            patterns: contrast_patterns(draw.k()),
            star,
        }
    }

    fn input_dim(&self) -> usize {
        2 * self.draw.k() + self.data.p
    }

    /// Monte Carlo pattern means for unit `i`; the same mediator draws feed
    /// every pattern.
    pub fn unit_means<T: TreatedMean>(&self, i: usize, n_mc: usize, seed: u64, how: &T) -> PatternMeans {
        let k = self.draw.k();
        let d = 2 * k;
        let x = &self.data.units[i].x;
        let sampler = MediatorSampler::from_parts(self.chol.clone(), self.draw.marginals().iter().map(|m| m.mixture(x)).collect());
        let mut tags = vec![EFFECT_TAG, self.draw.iteration() as u64];
        tags.extend(self.data.units[i].content_tags());
        let mut rng = RngStream::derived(seed, &tags);
        let mut zs = vec![0.0; d];
        let mut h = vec![0.0; d];
        let mut t = vec![0.0; d];
        let mut w = vec![0.0; self.input_dim()];
        w[d..].copy_from_slice(x);
        let mut ws = Workspace::new(self.input_dim());
        let mut acc = PatternMeans::zeros(k, self.star);
        for _ in 0..n_mc {
            sampler.sample_scores(&mut rng, &mut zs, &mut h);
            for j in 0..d {
                t[j] = sampler.to_mediator(j, h[j]);
            }
            w[..d].copy_from_slice(&t);
            acc.control += self.cond[0].mean_with(&w, &mut ws.buf, &mut ws.scratch);
            for &p in &self.patterns {
                for m in 0..k {
                    w[k + m] = if p & (1 << m) != 0 { t[k + m] } else { t[m] };
                }
                acc.treated[p] += how.mean(&self.cond[1], i, p, &w, &mut ws);
            }
            if self.star {
                w[k..d].copy_from_slice(&t[k..]);
                for m in 0..k {
                    w[m] = t[k + m];
                    acc.control_mixed[1 << m] += self.cond[0].mean_with(&w, &mut ws.buf, &mut ws.scratch);
                    w[m] = t[m];
                }
            }
        }
        acc.scale(1.0 / n_mc as f64);
        acc
    }

    /// Population pattern means: unit means averaged in unit order.
    pub fn population_means<T: TreatedMean>(&self, n_mc: usize, seed: u64, how: &T) -> PatternMeans {
        let per_unit: Vec<PatternMeans> = (0..self.data.n()).into_par_iter().map(|i| self.unit_means(i, n_mc, seed, how)).collect();
        let mut total = PatternMeans::zeros(self.draw.k(), self.star);
        for u in &per_unit {
            total.add(u);
        }
        total.scale(1.0 / self.data.n() as f64);
        total.mask_unused();
        total
    }
}

/// Per-draw mediation contrasts, aligned with [`mediation_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct DrawMediation {
    pub means: PatternMeans,
    pub values: Vec<f64>,
}

/// Mediation effects for one draw, integrating over the empirical
/// covariate distribution with `n_mc` shared mediator draws per unit.
pub fn mediation_effects(draw: &PosteriorDraw, data: &Dataset, n_mc: usize, nie_star: bool, seed: u64) -> Result<DrawMediation> {
    check_draw(draw, data)?;
    if n_mc == 0 {
        return Err(invalid("n_mc", "must be at least 1"));
    }
    let engine = DrawEngine::new(draw, data, nie_star);
    let means = engine.population_means(n_mc, seed, &Untilted);
    let values = mediation_contrasts(&means);
    Ok(DrawMediation { means, values })
}

pub(crate) fn check_draw(draw: &PosteriorDraw, data: &Dataset) -> Result<()> {
    if draw.k() != data.k || draw.n() != data.n() {
        return Err(invalid("draw", format!("draw has K = {}, n = {} but the dataset has K = {}, n = {}", draw.k(), draw.n(), data.k, data.n())));
    }
    Ok(())
}

/// Predicted unit-level `Y(1) − Y(0)` at each unit's full potential
/// mediator vector in the draw.
pub fn unit_effects(draw: &PosteriorDraw, data: &Dataset) -> Vec<f64> {
    let cond = [draw.outcome(0).conditional(), draw.outcome(1).conditional()];
    let d = 2 * draw.k();
    let mut w = vec![0.0; d + data.p];
    let mut ws = Workspace::new(w.len());
    (0..data.n())
        .map(|i| {
            w[..d].copy_from_slice(draw.unit_mediators(i));
            w[d..].copy_from_slice(&data.units[i].x);
            let e1 = cond[1].mean_with(&w, &mut ws.buf, &mut ws.scratch);
            let e0 = cond[0].mean_with(&w, &mut ws.buf, &mut ws.scratch);
            e1 - e0
        })
        .collect()
}

/// `M_k(1) − M_k(0)` for every unit, row-major `n × K`.
pub fn mediator_changes(draw: &PosteriorDraw) -> Vec<f64> {
    let k = draw.k();
    (0..draw.n())
        .flat_map(|i| {
            let t = draw.unit_mediators(i);
            (0..k).map(move |j| t[k + j] - t[j])
        })
        .collect()
}

/// Posterior s.d. of the unit-level mediator changes, pooled over units
/// and draws.
pub fn sigma_hat(draws: &[PosteriorDraw]) -> Vec<f64> {
    let Some(first) = draws.first() else {
        return Vec::new();
    };
    let k = first.k();
    let mut sum = vec![0.0; k];
    let mut sum2 = vec![0.0; k];
    let mut count = 0usize;
    for d in draws {
        let dm = mediator_changes(d);
        for row in dm.chunks(k) {
            for j in 0..k {
                sum[j] += row[j];
                sum2[j] += row[j] * row[j];
            }
        }
        count += d.n();
    }
    let n = count as f64;
    (0..k)
        .map(|j| {
            let m = sum[j] / n;
            ((sum2[j] - n * m * m) / (n - 1.0).max(1.0)).max(0.0).sqrt()
        })
        .collect()
}

/// Non-empty subsets of `0..k`, by size then lexicographically.
pub fn subsets(k: usize) -> Vec<Vec<usize>> {
    let mut v: Vec<Vec<usize>> = (1..1usize << k).map(|m| (0..k).filter(|j| m & (1 << j) != 0).collect()).collect();
    v.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    v
}

/// Position of a single mediator change relative to the thresholds
/// `c_d ≤ c_a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Decrease,
    LowerGap,
    NoChange,
    UpperGap,
    Increase,
}

pub fn classify(delta: f64, c_d: f64, c_a: f64) -> Band {
    if delta < -c_a {
        Band::Decrease
    } else if delta > c_a {
        Band::Increase
    } else if delta.abs() < c_d {
        Band::NoChange
    } else if delta < 0.0 {
        Band::LowerGap
    } else {
        Band::UpperGap
    }
}

/// Stratum average for one draw; `None` when no unit falls in the stratum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StratumEffect {
    pub value: Option<f64>,
    pub count: usize,
}

impl StratumEffect {
    fn from_sum(sum: f64, count: usize) -> Self {
        Self {
            value: (count > 0).then(|| sum / count as f64),
            count,
        }
    }
}

/// EDE, EAE⁻ and EAE⁺ per subset, ordered as [`subsets`].
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalDraw {
    pub ede: Vec<StratumEffect>,
    pub eae_minus: Vec<StratumEffect>,
    pub eae_plus: Vec<StratumEffect>,
}

/// Principal effects from mediator changes (`n × K`) and unit effects with
/// absolute per-mediator thresholds.
pub fn principal_from_changes(changes: &[f64], effects: &[f64], k: usize, c_d: &[f64], c_a: &[f64]) -> PrincipalDraw {
    let subs = subsets(k);
    let mut out = PrincipalDraw {
        ede: Vec::with_capacity(subs.len()),
        eae_minus: Vec::with_capacity(subs.len()),
        eae_plus: Vec::with_capacity(subs.len()),
    };
    for s in &subs {
        let (mut sd, mut nd, mut sm, mut nm, mut sp, mut np) = (0.0, 0, 0.0, 0, 0.0, 0);
        for (row, &e) in changes.chunks(k).zip(effects) {
            if s.iter().all(|&j| row[j].abs() < c_d[j]) {
                sd += e;
                nd += 1;
            }
            if s.iter().all(|&j| row[j] < -c_a[j]) {
                sm += e;
                nm += 1;
            }
            if s.iter().all(|&j| row[j] > c_a[j]) {
                sp += e;
                np += 1;
            }
        }
        out.ede.push(StratumEffect::from_sum(sd, nd));
        out.eae_minus.push(StratumEffect::from_sum(sm, nm));
        out.eae_plus.push(StratumEffect::from_sum(sp, np));
    }
    out
}

/// Principal effects for one draw. `c_d` and `c_a` are absolute thresholds
/// per mediator.
pub fn principal_effects(draw: &PosteriorDraw, data: &Dataset, c_d: &[f64], c_a: &[f64]) -> Result<PrincipalDraw> {
    check_draw(draw, data)?;
    check_thresholds(draw.k(), c_d, c_a)?;
    Ok(principal_from_changes(&mediator_changes(draw), &unit_effects(draw, data), draw.k(), c_d, c_a))
}

fn check_thresholds(k: usize, c_d: &[f64], c_a: &[f64]) -> Result<()> {
    if c_d.len() != k || c_a.len() != k {
        return Err(invalid("thresholds", format!("need {k} thresholds of each kind")));
    }
    if c_d.iter().chain(c_a).any(|c| !(*c >= 0.0)) {
        return Err(invalid("thresholds", "must be non-negative"));
    }
    Ok(())
}

/// 3×3 cross-classification of unit effects by the change in mediators
/// `j` (rows) and `l` (columns): decrease, no change, increase. Units in
/// the gap between `c_d` and `c_a` are left out.
pub fn strata_cross(changes: &[f64], effects: &[f64], k: usize, pair: (usize, usize), c_d: &[f64], c_a: &[f64]) -> [[StratumEffect; 3]; 3] {
    let mut sum = [[0.0; 3]; 3];
    let mut cnt = [[0usize; 3]; 3];
    let cat = |b: Band| match b {
        Band::Decrease => Some(0),
        Band::NoChange => Some(1),
        Band::Increase => Some(2),
        _ => None,
    };
    for (row, &e) in changes.chunks(k).zip(effects) {
        let a = cat(classify(row[pair.0], c_d[pair.0], c_a[pair.0]));
        let b = cat(classify(row[pair.1], c_d[pair.1], c_a[pair.1]));
        if let (Some(a), Some(b)) = (a, b) {
            sum[a][b] += e;
            cnt[a][b] += 1;
        }
    }
    std::array::from_fn(|a| std::array::from_fn(|b| StratumEffect::from_sum(sum[a][b], cnt[a][b])))
}

/// Posterior mean, s.d. and central 95% interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Summary {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            sd: f64::NAN,
            lo: f64::NAN,
            hi: f64::NAN,
            n,
        };
    }
    let (mean, sd) = crate::model::mean_sd(values);
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Summary {
        mean,
        sd,
        lo: quantile_sorted(&s, 0.025),
        hi: quantile_sorted(&s, 0.975),
        n,
    }
}

/// Summary over the draws where a stratum was occupied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StratumSummary {
    pub summary: Summary,
    pub empty_draws: usize,
    pub mean_count: f64,
}

pub fn summarize_strata(draws: &[StratumEffect]) -> StratumSummary {
    let vals: Vec<f64> = draws.iter().filter_map(|d| d.value).collect();
    StratumSummary {
        summary: summarize(&vals),
        empty_draws: draws.len() - vals.len(),
        mean_count: draws.iter().map(|d| d.count as f64).sum::<f64>() / draws.len().max(1) as f64,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectsConfig {
    pub n_mc: usize,
    pub seed: u64,
    pub nie_star: bool,
    /// Dissociative threshold as a multiple of `σ̂_k`.
    pub c_dissociative: f64,
    /// Associative threshold as a multiple of `σ̂_k`.
    pub c_associative: f64,
    /// Use every `draw_stride`-th retained draw.
    pub draw_stride: usize,
    pub strata_pair: (usize, usize),
}

impl Default for EffectsConfig {
    fn default() -> Self {
        Self {
            n_mc: 100,
            seed: 1,
            nie_star: false,
            c_dissociative: 0.25,
            c_associative: 0.25,
            draw_stride: 1,
            strata_pair: (0, 1),
        }
    }
}

/// Every estimand over the retained draws, with posterior summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectSummary {
    pub names: Vec<String>,
    /// Iteration index of each summarised draw.
    pub iterations: Vec<usize>,
    /// Per-draw values aligned with `names`.
    pub draws: Vec<Vec<f64>>,
    pub summary: Vec<Summary>,
    pub sigma_hat: Vec<f64>,
    pub thresholds_d: Vec<f64>,
    pub thresholds_a: Vec<f64>,
    pub subsets: Vec<Vec<usize>>,
    pub principal: Vec<PrincipalDraw>,
    /// `[EDE, EAE⁻, EAE⁺]` per subset.
    pub principal_summary: Vec<[StratumSummary; 3]>,
    pub strata_pair: (usize, usize),
    pub strata: Vec<[[StratumEffect; 3]; 3]>,
    pub strata_summary: [[StratumSummary; 3]; 3],
}

impl EffectSummary {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Summary> {
        self.index(name).map(|i| &self.summary[i])
    }
}

/// Selects every `stride`-th draw.
pub fn stride_draws(draws: &[PosteriorDraw], stride: usize) -> Vec<&PosteriorDraw> {
    draws.iter().step_by(stride.max(1)).collect()
}

pub fn compute_effects(draws: &[PosteriorDraw], data: &Dataset, cfg: &EffectsConfig) -> Result<EffectSummary> {
    if draws.is_empty() {
        return Err(invalid("draws", "no retained draws"));
    }
    let k = data.k;
    if cfg.strata_pair.0 >= k || cfg.strata_pair.1 >= k || (k > 1 && cfg.strata_pair.0 == cfg.strata_pair.1) {
        return Err(invalid("strata_pair", format!("needs two distinct mediators below {k}")));
    }
    let sel = stride_draws(draws, cfg.draw_stride);
    for d in &sel {
        check_draw(d, data)?;
    }
    let sigma = sigma_hat(draws);
    let c_d: Vec<f64> = sigma.iter().map(|s| cfg.c_dissociative * s).collect();
    let c_a: Vec<f64> = sigma.iter().map(|s| cfg.c_associative * s).collect();
    check_thresholds(k, &c_d, &c_a)?;
    let per_draw: Vec<(Vec<f64>, PrincipalDraw, [[StratumEffect; 3]; 3])> = sel
        .par_iter()
        .map(|d| {
            let engine = DrawEngine::new(d, data, cfg.nie_star);
            let values = mediation_contrasts(&engine.population_means(cfg.n_mc, cfg.seed, &Untilted));
            let changes = mediator_changes(d);
            let eff = unit_effects(d, data);
            let pr = principal_from_changes(&changes, &eff, k, &c_d, &c_a);
            let st = strata_cross(&changes, &eff, k, cfg.strata_pair, &c_d, &c_a);
            (values, pr, st)
        })
        .collect();
    let names = mediation_names(k, cfg.nie_star);
    let summary = (0..names.len())
        .map(|e| summarize(&per_draw.iter().map(|d| d.0[e]).collect::<Vec<_>>()))
        .collect();
    let subs = subsets(k);
    let principal: Vec<PrincipalDraw> = per_draw.iter().map(|d| d.1.clone()).collect();
    let principal_summary = (0..subs.len())
        .map(|s| {
            let col = |f: fn(&PrincipalDraw) -> &Vec<StratumEffect>| summarize_strata(&principal.iter().map(|p| f(p)[s]).collect::<Vec<_>>());
            [col(|p| &p.ede), col(|p| &p.eae_minus), col(|p| &p.eae_plus)]
        })
        .collect();
    let strata: Vec<[[StratumEffect; 3]; 3]> = per_draw.iter().map(|d| d.2).collect();
    let strata_summary = std::array::from_fn(|a| std::array::from_fn(|b| summarize_strata(&strata.iter().map(|s| s[a][b]).collect::<Vec<_>>())));
    Ok(EffectSummary {
        names,
        iterations: sel.iter().map(|d| d.iteration()).collect(),
        draws: per_draw.into_iter().map(|d| d.0).collect(),
        summary,
        sigma_hat: sigma,
        thresholds_d: c_d,
        thresholds_a: c_a,
        subsets: subs,
        principal,
        principal_summary,
        strata_pair: cfg.strata_pair,
        strata,
        strata_summary,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CepConfig {
    pub grid_size: usize,
    pub n_mc: usize,
    pub draw_stride: usize,
    pub unit_stride: usize,
    pub seed: u64,
}

impl Default for CepConfig {
    fn default() -> Self {
        Self {
            grid_size: 15,
            n_mc: 5,
            draw_stride: 10,
            unit_stride: 5,
            seed: 1,
        }
    }
}

/// Causal effect on the outcome over a grid of `(M_k(0), M_k(1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct CepSurface {
    pub k: usize,
    pub grid0: Vec<f64>,
    pub grid1: Vec<f64>,
    /// `grid0.len() × grid1.len()`, row-major.
    pub values: Vec<f64>,
    /// Unit-level `(M_k(0), M_k(1))` pairs of the first summarised draw.
    pub cloud: Vec<(f64, f64)>,
}

impl CepSurface {
    pub fn at(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.grid1.len() + b]
    }
}

/// Evenly spaced grid over the observed range of mediator `k` in both arms.
pub fn default_grid(data: &Dataset, k: usize, size: usize) -> Vec<f64> {
    let (lo, hi) = data
        .units
        .iter()
        .map(|u| u.m[k])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if size <= 1 || hi <= lo {
        return vec![lo];
    }
    (0..size).map(|i| lo + (hi - lo) * i as f64 / (size - 1) as f64).collect()
}

/// Regression of the other latent scores on the two scores of mediator `k`.
struct ScoreConditional {
    rest: Vec<usize>,
    /// `rest.len() × 2`, row-major.
    coef: Vec<f64>,
    chol: Option<LowerCholesky>,
}

impl ScoreConditional {
    fn new(r: &DMatrix<f64>, k: usize, kk: usize) -> Self {
        let g = [k, kk + k];
        let rest: Vec<usize> = (0..2 * kk).filter(|j| !g.contains(j)).collect();
        let rgg = DMatrix::from_fn(2, 2, |a, b| r[(g[a], g[b])]);
        let inv = rgg.try_inverse().unwrap_or_else(|| DMatrix::identity(2, 2));
        let rrg = DMatrix::from_fn(rest.len(), 2, |a, b| r[(rest[a], g[b])]);
        let coef = &rrg * inv;
        let mut cov = DMatrix::from_fn(rest.len(), rest.len(), |a, b| r[(rest[a], rest[b])]) - &coef * rrg.transpose();
        crate::linalg::symmetrize(&mut cov);
        let chol = if rest.is_empty() {
            None
        } else {
            let mut jitter = 0.0;
            loop {
                let m = &cov + DMatrix::identity(rest.len(), rest.len()) * jitter;
                match LowerCholesky::new(&m) {
                    Ok(c) => break Some(c),
                    Err(_) => jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 },
                }
            }
        };
        let coef = (0..rest.len()).flat_map(|a| [coef[(a, 0)], coef[(a, 1)]]).collect();
        Self { rest, coef, chol }
    }
}

/// CEP surface for mediator `k`, averaging over units, draws and the
/// other mediators' conditional copula distribution.
pub fn cep_surface(draws: &[PosteriorDraw], data: &Dataset, k: usize, grid0: &[f64], grid1: &[f64], cfg: &CepConfig) -> Result<CepSurface> {
    if draws.is_empty() {
        return Err(invalid("draws", "no retained draws"));
    }
    if k >= data.k {
        return Err(invalid("k", format!("mediator index {k} out of range")));
    }
    if cfg.n_mc == 0 {
        return Err(invalid("n_mc", "must be at least 1"));
    }
    let sel = stride_draws(draws, cfg.draw_stride);
    for d in &sel {
        check_draw(d, data)?;
    }
    let kk = data.k;
    let units: Vec<usize> = (0..data.n()).step_by(cfg.unit_stride.max(1)).collect();
    let cells = grid0.len() * grid1.len();
    let per_draw: Vec<Vec<f64>> = sel
        .par_iter()
        .map(|d| {
            let cond = [d.outcome(0).conditional(), d.outcome(1).conditional()];
            let sc = ScoreConditional::new(d.correlation().matrix(), k, kk);
            let mut out = vec![0.0; cells];
            let dim = 2 * kk + data.p;
            let mut w = vec![0.0; dim];
            let mut ws = Workspace::new(dim);
            let mut z = vec![0.0; sc.rest.len()];
            let mut e = vec![0.0; sc.rest.len()];
            for &i in &units {
                let x = &data.units[i].x;
                let mix: Vec<MarginalMixture> = d.marginals().iter().map(|m| m.mixture(x)).collect();
                w[2 * kk..].copy_from_slice(x);
                let mut tags = vec![CEP_TAG, d.iteration() as u64, k as u64];
                tags.extend(data.units[i].content_tags());
                let mut rng = RngStream::derived(cfg.seed, &tags);
                for (a, &v0) in grid0.iter().enumerate() {
                    let h0 = mix[k].latent(v0);
                    for (b, &v1) in grid1.iter().enumerate() {
                        let h1 = mix[kk + k].latent(v1);
                        w[k] = v0;
                        w[kk + k] = v1;
                        let mut acc = 0.0;
                        for _ in 0..cfg.n_mc {
                            if let Some(ch) = &sc.chol {
                                for v in z.iter_mut() {
                                    *v = standard_normal(&mut rng);
                                }
                                ch.mul_lower(&z, &mut e);
                                for (r, &j) in sc.rest.iter().enumerate() {
                                    let hr = sc.coef[2 * r] * h0 + sc.coef[2 * r + 1] * h1 + e[r];
                                    w[j] = mix[j].quantile_unchecked(clamp_unit(std_normal_cdf(hr)));
                                }
                            }
                            acc += cond[1].mean_with(&w, &mut ws.buf, &mut ws.scratch) - cond[0].mean_with(&w, &mut ws.buf, &mut ws.scratch);
                        }
                        out[a * grid1.len() + b] += acc / cfg.n_mc as f64;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= units.len() as f64);
            out
        })
        .collect();
    let mut values = vec![0.0; cells];
    for v in &per_draw {
        for (a, b) in values.iter_mut().zip(v) {
            *a += b;
        }
    }
    values.iter_mut().for_each(|v| *v /= per_draw.len() as f64);
    let first = sel[0];
    let cloud = (0..data.n())
        .map(|i| {
            let t = first.unit_mediators(i);
            (t[k], t[kk + k])
        })
        .collect();
    Ok(CepSurface {
        k,
        grid0: grid0.to_vec(),
        grid1: grid1.to_vec(),
        values,
        cloud,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assemble_draw, equicorrelated, linear_outcome, margins, normal_margin, random_dataset};
    use proptest::prelude::*;


    #[test]
    fn pattern_bookkeeping() {
        assert_eq!(contrast_patterns(3), (0..8).collect::<Vec<_>>());
        assert_eq!(contrast_patterns(4).len(), 1 + 1 + 4 + 6);
        assert_eq!(mediation_names(3, false).len(), 12);
        assert_eq!(mediation_names(3, true).len(), 15);
        assert_eq!(subsets(3), vec![vec![0], vec![1], vec![2], vec![0, 1], vec![0, 2], vec![1, 2], vec![0, 1, 2]]);
        assert_eq!(index_label(&[0, 2]), "13");
    }

    #[test]
    fn constant_outcome_has_no_indirect_effect() {
        let data = random_dataset(40, 3, 2, 1);
        let d = 1 + 6 + 2;
        let draw = assemble_draw(
            &data,
            margins(3, 2),
            equicorrelated(6, 0.3),
            [linear_outcome(1.0, &vec![0.0; d - 1], 1.0), linear_outcome(3.5, &vec![0.0; d - 1], 1.0)],
            2,
        );
        let r = mediation_effects(&draw, &data, 10, true, 9).unwrap();
        let names = mediation_names(3, true);
        for (n, v) in names.iter().zip(&r.values) {
            match n.as_str() {
                "TE" | "NDE" => assert_eq!(*v, 2.5, "{n}"),
                _ => assert_eq!(*v, 0.0, "{n}"),
            }
        }
    }

    #[test]
    fn additive_outcome_has_no_overlap_and_decomposes() {
        let data = random_dataset(30, 3, 1, 2);
        let coefs = [0.3, -0.2, 0.5, 1.0, 0.8, -0.6, 0.4];
        let draw = assemble_draw(&data, margins(3, 1), equicorrelated(6, 0.4), [linear_outcome(0.0, &coefs, 1.0), linear_outcome(1.0, &coefs, 0.5)], 3);
        let r = mediation_effects(&draw, &data, 25, false, 4).unwrap();
        let names = mediation_names(3, false);
        let get = |s: &str| r.values[names.iter().position(|n| n == s).unwrap()];
        for o in ["overlap_12", "overlap_13", "overlap_23"] {
            assert!(get(o).abs() < 1e-10, "{o} = {}", get(o));
        }
        assert_eq!(get("TE"), get("NDE") + get("JNIE_all"));
        // additive: JNIE_all equals the sum of single-mediator NIEs
        assert!((get("JNIE_all") - get("NIE_1") - get("NIE_2") - get("NIE_3")).abs() < 1e-10);
    }

    #[test]
    fn effects_are_deterministic_and_order_invariant() {
        let data = random_dataset(30, 2, 1, 5);
        let coefs = [0.3, -0.2, 0.5, 1.0, 0.1];
        let mut o1 = linear_outcome(1.0, &coefs, 0.5);
        // a second cluster makes the regression nonlinear
        o1.mu.extend_from_slice(&[2.0, 1.0, 1.0, -1.0, 0.5, 0.0]);
        o1.sigma.push(DMatrix::identity(6, 6));
        o1.sticks = vec![0.6, 1.0];
        o1.weights = vec![0.6, 0.4];
        let draw = assemble_draw(&data, margins(2, 1), equicorrelated(4, 0.2), [linear_outcome(0.0, &coefs, 1.0), o1.clone()], 6);
        let a = mediation_effects(&draw, &data, 15, false, 8).unwrap();
        let b = mediation_effects(&draw, &data, 15, false, 8).unwrap();
        assert_eq!(a, b);
        // streams are keyed by unit content, so only the summation order changes
        let mut rev = data.clone();
        rev.units.reverse();
        let reversed = assemble_draw(&rev, margins(2, 1), equicorrelated(4, 0.2), [linear_outcome(0.0, &coefs, 1.0), o1], 6);
        let c = mediation_effects(&reversed, &rev, 15, false, 8).unwrap();
        for (x, y) in a.values.iter().zip(&c.values) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn principal_examples() {
        let data = random_dataset(50, 2, 1, 7);
        let coefs = [0.3, -0.2, 0.5, 1.0, 0.1];
        let draw = assemble_draw(&data, margins(2, 1), equicorrelated(4, 0.2), [linear_outcome(0.0, &coefs, 1.0), linear_outcome(1.0, &coefs, 1.0)], 8);
        let eff = unit_effects(&draw, &data);
        let te = eff.iter().sum::<f64>() / eff.len() as f64;
        let big = principal_effects(&draw, &data, &[1e9, 1e9], &[1e9, 1e9]).unwrap();
        for s in &big.ede {
            assert_eq!(s.count, 50);
            assert!((s.value.unwrap() - te).abs() < 1e-12);
        }
        let zero = principal_effects(&draw, &data, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        for s in &zero.ede {
            assert_eq!(*s, StratumEffect { value: None, count: 0 });
        }
    }

    #[test]
    fn two_stratum_oracle() {
        let n = 40;
        let changes: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let effects: Vec<f64> = changes.iter().map(|&d| if d < 0.0 { -2.0 } else { 0.0 }).collect();
        let p = principal_from_changes(&changes, &effects, 1, &[0.5], &[0.5]);
        assert_eq!(p.eae_minus[0], StratumEffect { value: Some(-2.0), count: 20 });
        assert_eq!(p.eae_plus[0], StratumEffect { value: Some(0.0), count: 20 });
        assert_eq!(p.ede[0].count, 0);
    }

    #[test]
    fn strata_cross_counts_add_up() {
        let changes = [-1.0, -1.0, 0.0, 1.0, 1.0, 0.0, 0.3, 0.0];
        let effects = [1.0, 2.0, 3.0, 4.0];
        let t = strata_cross(&changes, &effects, 2, (0, 1), &[0.2, 0.2], &[0.5, 0.5]);
        assert_eq!(t[0][0], StratumEffect { value: Some(1.0), count: 1 });
        assert_eq!(t[1][2], StratumEffect { value: Some(2.0), count: 1 });
        assert_eq!(t[2][1], StratumEffect { value: Some(3.0), count: 1 });
        // the 0.3 change sits in the gap between the thresholds
        let total: usize = t.iter().flatten().map(|c| c.count).sum();
        assert_eq!(total, 3);
    }

    proptest! {
        #[test]
        fn single_mediator_bands_partition(delta in -5.0f64..5.0, c_d in 0.0f64..2.0, extra in 0.0f64..2.0) {
            let c_a = c_d + extra;
            let memberships = [
                delta < -c_a,
                delta.abs() < c_d,
                delta > c_a,
                (-c_a..=-c_d).contains(&delta) && !(delta.abs() < c_d),
                (c_d..=c_a).contains(&delta) && !(delta.abs() < c_d),
            ];
            prop_assert_eq!(memberships.iter().filter(|b| **b).count(), 1);
            let band = classify(delta, c_d, c_a);
            let idx = match band {
                Band::Decrease => 0,
                Band::NoChange => 1,
                Band::Increase => 2,
                Band::LowerGap => 3,
                Band::UpperGap => 4,
            };
            prop_assert!(memberships[idx]);
        }

        #[test]
        fn pair_effects_ignore_listing_order(j in 0usize..3, l in 0usize..3) {
            prop_assume!(j != l);
            let (a, b) = (j.min(l), j.max(l));
            prop_assert_eq!(index_label(&[a, b]), index_label(&[j.min(l), j.max(l)]));
            let all = full_pattern(3);
            prop_assert_eq!(all ^ (1 << j) ^ (1 << l), all ^ (1 << l) ^ (1 << j));
        }
    }

    #[test]
    fn summary_quantiles() {
        let v: Vec<f64> = (0..101).map(|i| i as f64).collect();
        let s = summarize(&v);
        assert_eq!(s.mean, 50.0);
        assert!((s.lo - 2.5).abs() < 1e-12 && (s.hi - 97.5).abs() < 1e-12);
        assert!(summarize(&[]).mean.is_nan());
    }

    #[test]
    fn cep_surface_for_linear_outcome() {
        let data = random_dataset(20, 2, 1, 9);
        // effect = (c1 - c0) + b (M_1(1) - M_1(0)); other slots have no weight
        let b = 0.7;
        let o0 = linear_outcome(0.5, &[b, 0.0, 0.0, 0.0, 0.2], 1.0);
        let o1 = linear_outcome(2.0, &[0.0, 0.0, b, 0.0, 0.2], 1.0);
        let draw = assemble_draw(&data, margins(2, 1), equicorrelated(4, 0.3), [o0, o1], 10);
        let grid = [-1.0, 0.0, 1.5];
        let cfg = CepConfig {
            draw_stride: 1,
            unit_stride: 3,
            n_mc: 3,
            ..Default::default()
        };
        let s = cep_surface(std::slice::from_ref(&draw), &data, 0, &grid, &grid, &cfg).unwrap();
        for (a, &v0) in grid.iter().enumerate() {
            for (c, &v1) in grid.iter().enumerate() {
                let expect = 1.5 + b * (v1 - v0);
                assert!((s.at(a, c) - expect).abs() < 1e-6, "{} vs {expect}", s.at(a, c));
            }
            // constant along the diagonal
            assert!((s.at(a, a) - 1.5).abs() < 1e-6);
        }
        assert_eq!(s.cloud.len(), 20);
    }

    #[test]
    fn cep_surface_tracks_conditional_copula() {
        let data = random_dataset(10, 2, 1, 11);
        // treated outcome loads on M_2(1), which is correlated with M_1(.)
        let o0 = linear_outcome(0.0, &[0.0; 5], 1.0);
        let o1 = linear_outcome(0.0, &[0.0, 0.0, 0.0, 1.0, 0.0], 1.0);
        let r = DMatrix::from_row_slice(4, 4, &[1.0, 0.2, 0.3, 0.1, 0.2, 1.0, 0.1, 0.4, 0.3, 0.1, 1.0, 0.5, 0.1, 0.4, 0.5, 1.0]);
        let ms: Vec<_> = (0..4).map(|_| normal_margin(0.0, 1.0, &[0.0], f64::NEG_INFINITY)).collect();
        let draw = assemble_draw(&data, ms, r.clone(), [o0, o1], 12);
        let cfg = CepConfig {
            draw_stride: 1,
            unit_stride: 1,
            n_mc: 4000,
            ..Default::default()
        };
        let (a, b) = (0.8, -0.4);
        let s = cep_surface(std::slice::from_ref(&draw), &data, 0, &[a], &[b], &cfg).unwrap();
        // E[H_3 | H_0 = a, H_2 = b] by Gaussian conditioning
        let rgg = DMatrix::from_row_slice(2, 2, &[1.0, r[(0, 2)], r[(2, 0)], 1.0]);
        let rrg = nalgebra::RowDVector::from_row_slice(&[r[(3, 0)], r[(3, 2)]]);
        let expect = (rrg * rgg.try_inverse().unwrap() * nalgebra::DVector::from_row_slice(&[a, b]))[0];
        // MC s.e. with 40000 draws of unit-variance noise is 0.005
        assert!((s.values[0] - expect).abs() < 0.025, "{} vs {expect}", s.values[0]);
    }
}
