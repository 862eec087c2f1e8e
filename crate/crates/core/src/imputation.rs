//! Data augmentation for the unobserved cross-world mediators, and draws of
//! mediator vectors under mixed treatment patterns.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::distributions::{clamp_unit, standard_normal, std_normal_cdf, uniform};
use crate::error::{invalid, Result};
use crate::linalg::LowerCholesky;
use crate::marginal::{latent_score, Acceptance, MarginalMixture, MarginalParams};
use crate::model::{Dataset, PosteriorDraw, PotentialMediatorState};
use crate::outcome::OutcomeConditional;
use crate::rng::RngStream;

const IMPUTE_TAG: u64 = 0x696d_7075_7465;

/// Everything one unit's update needs besides its own state.
pub struct UnitContext<'a> {
    /// Margins of all 2K coordinates evaluated at the unit's covariates.
    pub mixtures: &'a [MarginalMixture],
    pub r_inv: &'a DMatrix<f64>,
    /// Outcome regression of the unit's own arm; `None` drops the outcome
    /// factor from the target.
    pub outcome: Option<&'a OutcomeConditional>,
    pub y: f64,
    pub x: &'a [f64],
    /// Random-walk standard deviation per coordinate.
    pub steps: &'a [f64],
    pub lower: f64,
}

/// Random-walk Metropolis updates of the unit's missing coordinates, one at
/// a time in index order. Returns (accepted, proposed).
pub fn impute_unit<R: Rng + ?Sized>(state: &mut PotentialMediatorState, ctx: &UnitContext, rng: &mut R) -> (u64, u64) {
    let d = state.t.len();
    let mut w = Vec::with_capacity(d + ctx.x.len());
    w.extend_from_slice(&state.t);
    w.extend_from_slice(ctx.x);
    let r = ctx.outcome.map_or(0, |o| o.input_dim());
    let mut buf = Vec::new();
    let mut scratch = vec![0.0; r.max(1)];
    let mut out_ll = match ctx.outcome {
        Some(o) => o.ln_density_with(ctx.y, &w, &mut buf, &mut scratch),
        None => 0.0,
    };
    let (mut acc, mut prop) = (0, 0);
    for j in 0..d {
        if state.observed[j] {
            continue;
        }
        prop += 1;
        let t_old = state.t[j];
        let t_new = t_old + ctx.steps[j] * standard_normal(rng);
        if !(t_new >= ctx.lower) {
            continue;
        }
        let mix = &ctx.mixtures[j];
        let h_old = state.h[j];
        let h_new = mix.latent(t_new);
        let pjj = ctx.r_inv[(j, j)];
        let c: f64 = (0..d).filter(|&k| k != j).map(|k| ctx.r_inv[(j, k)] * state.h[k]).sum();
        let mut lr = 0.5 * (1.0 - pjj) * (h_new * h_new - h_old * h_old) - (h_new - h_old) * c + mix.ln_pdf(t_new) - mix.ln_pdf(t_old);
        let mut out_new = 0.0;
        if let Some(o) = ctx.outcome {
            w[j] = t_new;
            out_new = o.ln_density_with(ctx.y, &w, &mut buf, &mut scratch);
            w[j] = t_old;
            lr += out_new - out_ll;
        }
        let ok = lr >= 0.0 || (lr > f64::NEG_INFINITY && uniform(rng, 0.0, 1.0).ln() < lr);
        if ok {
            acc += 1;
            state.t[j] = t_new;
            state.h[j] = h_new;
            w[j] = t_new;
            out_ll = out_new;
        }
    }
    (acc, prop)
}

/// Random-walk scales: `scale ×` the observed s.d. of each coordinate.
pub fn proposal_steps(data: &Dataset, scale: f64) -> Vec<f64> {
    let k = data.k;
    (0..2 * k)
        .map(|j| {
            let z = (j / k) as u8;
            let vals: Vec<f64> = data.units.iter().filter(|u| u.z == z).map(|u| u.m[j % k]).collect();
            let (_, sd) = crate::model::mean_sd(&vals);
            scale * if sd > 0.0 { sd } else { 1.0 }
        })
        .collect()
}

/// Step 3 over all units, in parallel with one derived stream per unit.
#[allow(clippy::too_many_arguments)]
pub fn impute_all(
    states: &mut [PotentialMediatorState],
    data: &Dataset,
    marginals: &[MarginalParams],
    r_inv: &DMatrix<f64>,
    outcome: &[OutcomeConditional; 2],
    steps: &[f64],
    seed: u64,
    iteration: u64,
) -> Acceptance {
    let counts: Vec<(u64, u64)> = states
        .par_iter_mut()
        .enumerate()
        .map(|(i, st)| {
            let unit = &data.units[i];
            let mixtures: Vec<MarginalMixture> = marginals.iter().map(|m| m.mixture(&unit.x)).collect();
            let ctx = UnitContext {
                mixtures: &mixtures,
                r_inv,
                outcome: Some(&outcome[unit.z as usize]),
                y: unit.y,
                x: &unit.x,
                steps,
                lower: data.lower_bound,
            };
            let mut rng = RngStream::derived(seed, &[IMPUTE_TAG, iteration, i as u64]);
            impute_unit(st, &ctx, &mut rng)
        })
        .collect();
    let mut acc = Acceptance::default();
    for (a, p) in counts {
        acc.accepted += a;
        acc.proposed += p;
    }
    acc
}

/// Starting potential mediators: observed half from the data, the other
/// half drawn from its margin at the unit's covariates.
pub fn initial_states<R: Rng + ?Sized>(data: &Dataset, marginals: &[MarginalParams], rng: &mut R) -> Vec<PotentialMediatorState> {
    let k = data.k;
    data.units
        .iter()
        .map(|u| {
            let mut t = vec![0.0; 2 * k];
            let mut h = vec![0.0; 2 * k];
            for j in 0..2 * k {
                let mix = marginals[j].mixture(&u.x);
                if (j / k) as u8 == u.z {
                    t[j] = u.m[j % k];
                } else {
                    let v = uniform(rng, 0.0, 1.0);
                    t[j] = mix.quantile_unchecked(v).max(data.lower_bound);
                }
                h[j] = mix.latent(t[j]);
            }
            PotentialMediatorState::new(u, t, h).expect("observed half copied from the unit")
        })
        .collect()
}

/// Joint draws of the 2K potential mediators at fixed covariates under one
/// posterior draw.
#[derive(Clone, Debug)]
pub struct MediatorSampler {
    chol: LowerCholesky,
    mixtures: Vec<MarginalMixture>,
}

impl MediatorSampler {
    pub fn new(draw: &PosteriorDraw, x: &[f64]) -> Self {
        Self {
            chol: LowerCholesky::new(draw.correlation().matrix()).expect("stored correlation is PD"),
            mixtures: draw.marginals().iter().map(|m| m.mixture(x)).collect(),
        }
    }

    pub fn from_parts(chol: LowerCholesky, mixtures: Vec<MarginalMixture>) -> Self {
        Self { chol, mixtures }
    }

    pub fn dim(&self) -> usize {
        self.mixtures.len()
    }

    pub fn chol(&self) -> &LowerCholesky {
        &self.chol
    }

    pub fn mixture(&self, j: usize) -> &MarginalMixture {
        &self.mixtures[j]
    }

    /// Latent scores `H ~ N(0, R)`; `z` is scratch of length `dim`.
    pub fn sample_scores<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64], h: &mut [f64]) {
        for v in z.iter_mut() {
            *v = standard_normal(rng);
        }
        self.chol.mul_lower(z, h);
    }

    /// Coordinate `j` on the mediator scale from its latent score.
    #[inline]
    pub fn to_mediator(&self, j: usize, h: f64) -> f64 {
        self.mixtures[j].quantile_unchecked(clamp_unit(std_normal_cdf(h)))
    }

    /// Latent score of coordinate `j` at mediator value `t`.
    pub fn to_score(&self, j: usize, t: f64) -> f64 {
        latent_score(self.mixtures[j].cdf(t))
    }
}

/// `n_mc` draws of `(M_1(p_1), …, M_K(p_K))` at covariates `x`, where
/// `pattern[k]` is the arm of mediator `k`.
pub fn draw_counterfactual_mediators<R: Rng + ?Sized>(
    draw: &PosteriorDraw,
    x: &[f64],
    pattern: &[u8],
    n_mc: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let k = draw.k();
    if pattern.len() != k || pattern.iter().any(|&p| p > 1) {
        return Err(invalid("pattern", format!("need {k} entries in {{0,1}}")));
    }
    let s = MediatorSampler::new(draw, x);
    let mut z = vec![0.0; 2 * k];
    let mut h = vec![0.0; 2 * k];
    Ok((0..n_mc)
        .map(|_| {
            s.sample_scores(rng, &mut z, &mut h);
            (0..k)
                .map(|m| {
                    let j = pattern[m] as usize * k + m;
                    s.to_mediator(j, h[j])
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::{build_constrained_r, CorrelationMatrix, PriorMode};
    use crate::distributions::{std_normal_quantile, Mvn};
    use crate::marginal::weights_from_sticks;
    use crate::model::ObservedUnit;
    use crate::outcome::OutcomeParams;

    fn margin(intercepts: &[f64], precisions: &[f64], sticks: &[f64], lower: f64) -> MarginalParams {
        MarginalParams {
            intercepts: intercepts.to_vec(),
            precisions: precisions.to_vec(),
            beta: vec![],
            weights: weights_from_sticks(sticks),
            sticks: sticks.to_vec(),
            lambda: 1.0,
            mu: 0.0,
            s: 1.0,
            a_star: 2.0,
            lower,
        }
    }

    fn ks_against(values: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = values.len() as f64;
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = cdf(v);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Outcome regression whose single cluster makes Y independent of the rest.
    fn independent_outcome(dim: usize) -> OutcomeConditional {
        let mut sigma = DMatrix::identity(dim, dim);
        sigma[(0, 0)] = 2.0;
        OutcomeParams {
            mu: vec![0.5; dim],
            sigma: vec![sigma],
            sticks: vec![1.0],
            weights: vec![1.0],
            alpha: 1.0,
            m1: vec![0.0; dim],
            k0: 1.0,
            psi1: DMatrix::identity(dim, dim),
        }
        .conditional()
    }

    #[test]
    fn identity_copula_recovers_margin() {
        let m0 = margin(&[1.0, 3.0], &[4.0, 1.0], &[0.4, 1.0], 0.0);
        let m1 = margin(&[2.0, 0.5], &[1.0, 9.0], &[0.7, 1.0], 0.0);
        let mixtures = vec![m0.mixture(&[]), m1.mixture(&[])];
        let unit = ObservedUnit::new(0, vec![1.2], 0.3, vec![]);
        let t0 = 1.2;
        let t1 = 1.0;
        let h = vec![mixtures[0].latent(t0), mixtures[1].latent(t1)];
        let mut st = PotentialMediatorState::new(&unit, vec![t0, t1], h).unwrap();
        let r_inv = DMatrix::identity(2, 2);
        let out = independent_outcome(3);
        let ctx = UnitContext {
            mixtures: &mixtures,
            r_inv: &r_inv,
            outcome: Some(&out),
            y: 0.3,
            x: &[],
            steps: &[1.0, 1.5],
            lower: 0.0,
        };
        let mut rng = RngStream::new(1, 0);
        for _ in 0..1000 {
            impute_unit(&mut st, &ctx, &mut rng);
        }
        let mut kept = Vec::with_capacity(100_000);
        for _ in 0..100_000 {
            for _ in 0..4 {
                impute_unit(&mut st, &ctx, &mut rng);
            }
            assert_eq!(st.t[0], t0);
            kept.push(st.t[1]);
        }
        let ks = ks_against(&mut kept, |t| mixtures[1].cdf(t));
        assert!(ks < 0.02, "ks {ks}");
    }

    #[test]
    fn zero_step_never_moves() {
        let m = margin(&[1.0, 2.0], &[1.0, 1.0], &[0.5, 1.0], 0.0);
        let mixtures = vec![m.mixture(&[]), m.mixture(&[])];
        let unit = ObservedUnit::new(1, vec![0.7], 0.0, vec![]);
        let h = vec![mixtures[0].latent(2.0), mixtures[1].latent(0.7)];
        let mut st = PotentialMediatorState::new(&unit, vec![2.0, 0.7], h).unwrap();
        let r_inv = DMatrix::identity(2, 2);
        let ctx = UnitContext {
            mixtures: &mixtures,
            r_inv: &r_inv,
            outcome: None,
            y: 0.0,
            x: &[],
            steps: &[0.0, 0.0],
            lower: 0.0,
        };
        let mut rng = RngStream::new(2, 0);
        for _ in 0..100 {
            impute_unit(&mut st, &ctx, &mut rng);
            assert_eq!(st.t, vec![2.0, 0.7]);
        }
    }

    #[test]
    fn strong_copula_tracks_observed_percentile() {
        let m0 = margin(&[1.0, 3.0], &[4.0, 1.0], &[0.6, 1.0], f64::NEG_INFINITY);
        let m1 = margin(&[2.0, 2.0], &[1.0, 1.0], &[1.0, 1.0], f64::NEG_INFINITY);
        let mixtures = vec![m0.mixture(&[]), m1.mixture(&[])];
        let t0 = mixtures[0].quantile(0.9).unwrap();
        let unit = ObservedUnit::new(0, vec![t0], 0.0, vec![]);
        let h = vec![mixtures[0].latent(t0), 0.0];
        let mut st = PotentialMediatorState::new(&unit, vec![t0, 2.0], h).unwrap();
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.99, 0.99, 1.0]);
        let r_inv = r.clone().try_inverse().unwrap();
        let ctx = UnitContext {
            mixtures: &mixtures,
            r_inv: &r_inv,
            outcome: None,
            y: 0.0,
            x: &[],
            steps: &[0.2, 0.2],
            lower: f64::NEG_INFINITY,
        };
        // oracle: H1 | H0 from Gaussian conditioning, pushed through the margin
        let cond = Mvn::new(vec![0.0, 0.0], r).unwrap().conditional(&[0], &[std_normal_quantile(0.9)]).unwrap();
        let (cm, csd) = (cond.mean()[0], cond.cov()[(0, 0)].sqrt());
        let nodes = 2000;
        let mut oracle = 0.0;
        let mut wsum = 0.0;
        for i in 0..nodes {
            let g = -8.0 + 16.0 * (i as f64 + 0.5) / nodes as f64;
            let w = (-0.5 * g * g).exp();
            oracle += w * mixtures[1].quantile(clamp_unit(std_normal_cdf(cm + csd * g))).unwrap();
            wsum += w;
        }
        oracle /= wsum;
        let mut rng = RngStream::new(3, 0);
        for _ in 0..2000 {
            impute_unit(&mut st, &ctx, &mut rng);
        }
        let n = 200_000;
        let mut sum = 0.0;
        for _ in 0..n {
            impute_unit(&mut st, &ctx, &mut rng);
            sum += st.t[1];
        }
        let mean = sum / n as f64;
        assert!((mean - oracle).abs() < 0.02, "{mean} vs {oracle}");
        assert!((oracle - mixtures[1].quantile(0.9).unwrap()).abs() < 0.1);
    }

    fn toy_draw(r: CorrelationMatrix, margins: Vec<MarginalParams>) -> PosteriorDraw {
        let d = r.dim();
        let od = 1 + d;
        let out = OutcomeParams {
            mu: vec![0.0; od],
            sigma: vec![DMatrix::identity(od, od)],
            sticks: vec![1.0],
            weights: vec![1.0],
            alpha: 1.0,
            m1: vec![0.0; od],
            k0: 1.0,
            psi1: DMatrix::identity(od, od),
        };
        PosteriorDraw::new(0, 0, margins, r, [out.clone(), out], vec![1.0; d]).unwrap()
    }

    #[test]
    fn observable_pattern_matches_margins() {
        let ms: Vec<MarginalParams> = (0..4).map(|j| margin(&[1.0 + j as f64, 2.0], &[2.0, 0.5], &[0.5, 1.0], 0.0)).collect();
        let r0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
        let draw = toy_draw(build_constrained_r(&r0, &r0, 0.5).unwrap(), ms.clone());
        let mut rng = RngStream::new(4, 0);
        let d = draw_counterfactual_mediators(&draw, &[], &[1, 1], 100_000, &mut rng).unwrap();
        for k in 0..2 {
            let mut col: Vec<f64> = d.iter().map(|r| r[k]).collect();
            let mix = ms[2 + k].mixture(&[]);
            assert!(ks_against(&mut col, |t| mix.cdf(t)) < 0.02);
        }
        assert!(draw_counterfactual_mediators(&draw, &[], &[1], 1, &mut rng).is_err());
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn identity_correlation_gives_independent_coordinates() {
        let ms: Vec<MarginalParams> = (0..6).map(|j| margin(&[1.0 + j as f64 * 0.3, 2.0], &[2.0, 0.5], &[0.5, 1.0], 0.0)).collect();
        let draw = toy_draw(CorrelationMatrix::initial(3, PriorMode::Uniform), ms);
        let mut rng = RngStream::new(5, 0);
        let d = draw_counterfactual_mediators(&draw, &[], &[0, 1, 1], 100_000, &mut rng).unwrap();
        for a in 0..3 {
            for b in a + 1..3 {
                let ca: Vec<f64> = d.iter().map(|r| r[a]).collect();
                let cb: Vec<f64> = d.iter().map(|r| r[b]).collect();
                assert!(correlation(&ca, &cb).abs() < 0.02);
            }
        }
    }

    #[test]
    fn mixed_pattern_keeps_within_arm_correlation() {
        // identical Gaussian margins: mediator correlation equals score
        // correlation, which for rho close to 1 is the within-arm value
        let ms: Vec<MarginalParams> = (0..6).map(|_| margin(&[0.0, 0.0], &[1.0, 1.0], &[1.0, 1.0], f64::NEG_INFINITY)).collect();
        let block = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.3, 0.5, 1.0, 0.4, 0.3, 0.4, 1.0]);
        let rho = 0.999;
        let draw = toy_draw(build_constrained_r(&block, &block, rho).unwrap(), ms);
        let mut rng = RngStream::new(6, 0);
        let n = 100_000;
        let d = draw_counterfactual_mediators(&draw, &[], &[0, 1, 1], n, &mut rng).unwrap();
        let c1: Vec<f64> = d.iter().map(|r| r[0]).collect();
        let c2: Vec<f64> = d.iter().map(|r| r[1]).collect();
        let expected = rho * 0.5;
        let se = (1.0 - expected * expected) / (n as f64).sqrt();
        assert!((correlation(&c1, &c2) - expected).abs() < 4.0 * se);
    }

    #[test]
    fn counterfactual_draws_are_reproducible() {
        let ms: Vec<MarginalParams> = (0..4).map(|_| margin(&[1.0, 2.0], &[2.0, 0.5], &[0.5, 1.0], 0.0)).collect();
        let draw = toy_draw(CorrelationMatrix::initial(2, PriorMode::RhoConstrained), ms);
        let a = draw_counterfactual_mediators(&draw, &[], &[0, 1], 50, &mut RngStream::new(7, 0)).unwrap();
        let b = draw_counterfactual_mediators(&draw, &[], &[0, 1], 50, &mut RngStream::new(7, 0)).unwrap();
        assert_eq!(a, b);
    }
}
