//! Dirichlet-process mixtures of truncated normals for each
//! (mediator, arm) margin, updated by a block Metropolis sweep.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::distributions::{
    beta, categorical_from_ln_weights, clamp_unit, gamma_rate, standard_normal, std_normal_quantile,
    uniform, TruncatedNormal,
};
use crate::error::{invalid, Error, Result};
use crate::linalg::{log_sum_exp, LowerCholesky};
use crate::model::HyperRate;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Parameters of one margin's truncated stick-breaking mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalParams {
    pub intercepts: Vec<f64>,
    /// Cluster precisions (inverse variances).
    pub precisions: Vec<f64>,
    /// Covariate coefficients shared by all clusters.
    pub beta: Vec<f64>,
    /// Stick fractions; the last one is fixed at 1.
    pub sticks: Vec<f64>,
    pub weights: Vec<f64>,
    /// DP mass.
    pub lambda: f64,
    /// Base-measure mean and precision for the intercepts.
    pub mu: f64,
    pub s: f64,
    pub a_star: f64,
    pub lower: f64,
}

pub fn weights_from_sticks(sticks: &[f64]) -> Vec<f64> {
    let mut rest = 1.0;
    sticks
        .iter()
        .map(|&v| {
            let w = v * rest;
            rest *= 1.0 - v;
            w
        })
        .collect()
}

impl MarginalParams {
    pub fn k_max(&self) -> usize {
        self.intercepts.len()
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k_max();
        if k == 0 || self.precisions.len() != k || self.sticks.len() != k || self.weights.len() != k {
            return Err(invalid("marginal", "cluster vectors have inconsistent lengths"));
        }
        if self.precisions.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(invalid("precisions", "must be positive and finite"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("weights", "must be non-negative and sum to one"));
        }
        if self.sticks[k - 1] != 1.0 {
            return Err(invalid("sticks", "last stick fraction must be 1"));
        }
        if !(self.lambda > 0.0) || !(self.s > 0.0) {
            return Err(invalid("lambda/s", "must be positive"));
        }
        if !(1.0..=5.0).contains(&self.a_star) {
            return Err(invalid("a_star", format!("{} outside [1, 5]", self.a_star)));
        }
        if self.intercepts.iter().chain(&self.beta).any(|v| !v.is_finite()) {
            return Err(invalid("marginal", "non-finite coefficient"));
        }
        Ok(())
    }

    #[inline]
    pub fn shift(&self, x: &[f64]) -> f64 {
        self.beta.iter().zip(x).map(|(b, v)| b * v).sum()
    }

    /// The mixture at covariate vector `x`.
    pub fn mixture(&self, x: &[f64]) -> MarginalMixture {
        let shift = self.shift(x);
        let comps = (0..self.k_max())
            .filter(|&k| self.weights[k] > 0.0)
            .map(|k| {
                (
                    self.weights[k],
                    TruncatedNormal::new_unchecked(self.intercepts[k] + shift, self.precisions[k].sqrt().recip(), self.lower),
                )
            })
            .collect();
        MarginalMixture {
            comps,
            lower: self.lower,
        }
    }

    pub fn pdf(&self, t: f64, x: &[f64]) -> f64 {
        self.mixture(x).pdf(t)
    }

    pub fn ln_pdf(&self, t: f64, x: &[f64]) -> f64 {
        self.mixture(x).ln_pdf(t)
    }

    pub fn cdf(&self, t: f64, x: &[f64]) -> f64 {
        self.mixture(x).cdf(t)
    }

    pub fn quantile(&self, u: f64, x: &[f64]) -> Result<f64> {
        self.mixture(x).quantile(u)
    }
}

/// Finite mixture of truncated normals sharing one support bound.
#[derive(Clone, Debug)]
pub struct MarginalMixture {
    comps: Vec<(f64, TruncatedNormal)>,
    lower: f64,
}

impl MarginalMixture {
    pub fn pdf(&self, t: f64) -> f64 {
        self.comps.iter().map(|(w, c)| w * c.pdf(t)).sum()
    }

    pub fn ln_pdf(&self, t: f64) -> f64 {
        let d = self.pdf(t);
        if d > 0.0 || t < self.lower {
            return d.ln();
        }
        let terms: Vec<f64> = self.comps.iter().map(|(w, c)| w.ln() + c.ln_pdf(t)).collect();
        log_sum_exp(&terms)
    }

    pub fn cdf(&self, t: f64) -> f64 {
        self.comps.iter().map(|(w, c)| w * c.cdf(t)).sum::<f64>().clamp(0.0, 1.0)
    }

    pub fn sf(&self, t: f64) -> f64 {
        self.comps.iter().map(|(w, c)| w * c.sf(t)).sum::<f64>().clamp(0.0, 1.0)
    }

    /// Gaussian score `Φ⁻¹(F(t))` with the CDF clamped away from 0 and 1.
    pub fn latent(&self, t: f64) -> f64 {
        latent_score(self.cdf(t))
    }

    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(invalid("u", format!("quantile argument must lie in (0,1), got {u}")));
        }
        Ok(self.quantile_unchecked(u))
    }

    /// Safeguarded Newton iteration bracketed by the component quantiles.
    pub(crate) fn quantile_unchecked(&self, u: f64) -> f64 {
        if self.comps.len() == 1 {
            return self.comps[0].1.quantile_unchecked(u);
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (_, c) in &self.comps {
            let q = c.quantile_unchecked(u);
            lo = lo.min(q);
            hi = hi.max(q);
        }
        if hi - lo <= 1e-15 * (1.0 + lo.abs()) {
            return lo;
        }
        // residual g(t) = F(t) - u, computed from the upper tail above the median
        let upper = u > 0.5;
        let target = if upper { 1.0 - u } else { u };
        let resid = |t: f64| -> f64 {
            if upper {
                target - self.sf(t)
            } else {
                self.cdf(t) - target
            }
        };
        let mut t = 0.5 * (lo + hi);
        for _ in 0..100 {
            let g = resid(t);
            if g == 0.0 {
                return t;
            }
            if g < 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let d = self.pdf(t);
            let mut next = t - g / d;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= 1e-14 * (1.0 + t.abs()) || hi - lo <= 1e-14 * (1.0 + t.abs()) {
                return next;
            }
            t = next;
        }
        t
    }
}

#[inline]
pub fn latent_score(cdf: f64) -> f64 {
    std_normal_quantile(clamp_unit(cdf))
}

/// Hyperparameters fixed from the data at initialisation.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalPrior {
    pub mu_star: f64,
    /// Precision of the prior on `mu`.
    pub s_star: f64,
    /// Residual variance of a least-squares fit of the margin.
    pub sigma_hat: f64,
    pub hyper_rate: HyperRate,
    pub beta_sd: f64,
    pub tau_shape: f64,
    pub tau_rate: f64,
}

impl MarginalPrior {
    /// Builds the prior from the observed values of one margin, returning it
    /// with the least-squares coefficients.
    pub fn from_observed(t: &[f64], x: &[f64], p: usize, hyper_rate: HyperRate, beta_sd: f64) -> Result<(Self, f64, Vec<f64>)> {
        let (intercept, coef, sigma_hat) = ols_fit(t, x, p)?;
        let prior = Self {
            mu_star: intercept,
            s_star: 2.0 / sigma_hat,
            sigma_hat,
            hyper_rate,
            beta_sd,
            tau_shape: 1.0,
            tau_rate: sigma_hat / 2.0,
        };
        Ok((prior, intercept, coef))
    }

    pub fn b_star(&self, a_star: f64) -> f64 {
        match self.hyper_rate {
            HyperRate::DataScaled => self.sigma_hat / 2.0,
            HyperRate::HundredAStar => 100.0 * a_star,
        }
    }

    fn ln_hyper(&self, mu: f64, s: f64, a_star: f64) -> f64 {
        if !(1.0..=5.0).contains(&a_star) || !(s > 0.0) {
            return f64::NEG_INFINITY;
        }
        let b = self.b_star(a_star);
        ln_normal(mu, self.mu_star, self.s_star) + ln_gamma_pdf(s, a_star, b)
    }

    fn ln_intercept(&self, b0: f64, mu: f64, s: f64) -> f64 {
        ln_normal(b0, mu, s)
    }

    fn ln_tau(&self, tau: f64) -> f64 {
        ln_gamma_pdf(tau, self.tau_shape, self.tau_rate)
    }

    fn ln_beta(&self, beta: &[f64]) -> f64 {
        let prec = 1.0 / (self.beta_sd * self.beta_sd);
        beta.iter().map(|&b| ln_normal(b, 0.0, prec)).sum()
    }

    /// Log prior of every component touched by the Metropolis moves.
    pub fn ln_prior(&self, p: &MarginalParams) -> f64 {
        let mut lp = self.ln_hyper(p.mu, p.s, p.a_star) + self.ln_beta(&p.beta);
        for k in 0..p.k_max() {
            lp += self.ln_intercept(p.intercepts[k], p.mu, p.s) + self.ln_tau(p.precisions[k]);
        }
        lp
    }
}

/// `ln N(x; mean, 1/prec)`.
#[inline]
fn ln_normal(x: f64, mean: f64, prec: f64) -> f64 {
    0.5 * (prec.ln() - LN_2PI) - 0.5 * prec * (x - mean) * (x - mean)
}

/// Gamma log density with shape/rate parameters.
#[inline]
fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Least squares of `t` on `[1, x]`: intercept, slopes, residual variance.
pub fn ols_fit(t: &[f64], x: &[f64], p: usize) -> Result<(f64, Vec<f64>, f64)> {
    let n = t.len();
    if n < p + 2 || x.len() != n * p {
        return Err(invalid("margin", format!("{n} observations cannot support {p} covariates and a variance")));
    }
    let design = DMatrix::from_fn(n, p + 1, |i, c| if c == 0 { 1.0 } else { x[i * p + c - 1] });
    let coef = least_squares(&design, &DVector::from_column_slice(t)).ok_or(Error::RankDeficient {
        context: "marginal initialisation",
    })?;
    let fitted = &design * &coef;
    let rss: f64 = t.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let sigma_hat = (rss / (n - p - 1) as f64).max(1e-12);
    Ok((coef[0], coef.as_slice()[1..].to_vec(), sigma_hat))
}

/// QR least squares; `None` when the design is rank deficient.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let qr = a.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diagonal().iter().any(|v| v.abs() <= 1e-10 * scale.max(1e-300)) {
        return None;
    }
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb)
}

/// Coupling of one margin to the others through the copula:
/// `pjj = (R⁻¹)_jj` and `c[i] = Σ_{k≠j} (R⁻¹)_jk H_ki`.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub pjj: f64,
    pub c: Vec<f64>,
}

impl Coupling {
    pub fn none(n: usize) -> Self {
        Self { pjj: 1.0, c: vec![0.0; n] }
    }

    /// Coupling of margin `j` given all latent score columns.
    pub fn from_scores(r_inv: &DMatrix<f64>, h: &[Vec<f64>], j: usize) -> Self {
        let n = h[j].len();
        let mut c = vec![0.0; n];
        for (k, col) in h.iter().enumerate() {
            if k == j {
                continue;
            }
            let w = r_inv[(j, k)];
            if w == 0.0 {
                continue;
            }
            for (ci, hk) in c.iter_mut().zip(col) {
                *ci += w * hk;
            }
        }
        Self { pjj: r_inv[(j, j)], c }
    }

    fn is_identity(&self) -> bool {
        self.pjj == 1.0 && self.c.iter().all(|&v| v == 0.0)
    }
}

/// Values of one margin: `t[i]` with covariates `x[i*p..(i+1)*p]`.
#[derive(Clone, Copy, Debug)]
pub struct MarginData<'a> {
    pub t: &'a [f64],
    pub x: &'a [f64],
    pub p: usize,
}

impl<'a> MarginData<'a> {
    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
}

/// Log of the conditional density of one margin's parameters given the
/// other margins' latent scores, up to a constant.
pub fn marginal_logpost(params: &MarginalParams, prior: &MarginalPrior, data: &MarginData, coupling: &Coupling) -> f64 {
    let mut total = prior.ln_prior(params);
    for i in 0..data.n() {
        let mix = params.mixture(data.row(i));
        let t = data.t[i];
        let h = mix.latent(t);
        total += 0.5 * (1.0 - coupling.pjj) * h * h - h * coupling.c[i] + mix.ln_pdf(t);
    }
    total
}

/// Metropolis acceptance probability from a log ratio.
#[inline]
pub fn mh_accept_prob(log_ratio: f64) -> f64 {
    if log_ratio.is_nan() {
        0.0
    } else {
        log_ratio.min(0.0).exp()
    }
}

#[inline]
fn accept<R: Rng + ?Sized>(rng: &mut R, log_ratio: f64) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    if log_ratio.is_nan() || log_ratio == f64::NEG_INFINITY {
        return false;
    }
    uniform(rng, 0.0, 1.0).ln() < log_ratio
}

/// Accepted / proposed counts of one Metropolis block.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Acceptance {
    pub accepted: u64,
    pub proposed: u64,
}

impl Acceptance {
    pub fn record(&mut self, ok: bool) {
        self.proposed += 1;
        self.accepted += ok as u64;
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn merge(&mut self, other: &Acceptance) {
        self.accepted += other.accepted;
        self.proposed += other.proposed;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MarginalAcceptance {
    pub weights: Acceptance,
    pub hyper: Acceptance,
    pub intercept: Acceptance,
    pub beta: Acceptance,
    pub variance: Acceptance,
}

/// Proposal tuning for the sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalTuning {
    pub intercept_step: f64,
    pub variance_concentration: f64,
}

impl Default for MarginalTuning {
    fn default() -> Self {
        Self {
            intercept_step: 0.1,
            variance_concentration: 100.0,
        }
    }
}

/// Running mean and covariance of the coefficient history.
#[derive(Clone, Debug, PartialEq)]
struct Adaptive {
    count: usize,
    mean: Vec<f64>,
    scatter: DMatrix<f64>,
}

impl Adaptive {
    fn new(p: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; p],
            scatter: DMatrix::zeros(p, p),
        }
    }

    fn push(&mut self, v: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        let p = v.len();
        let delta: Vec<f64> = (0..p).map(|i| v[i] - self.mean[i]).collect();
        for i in 0..p {
            self.mean[i] += delta[i] / n;
        }
        for a in 0..p {
            for b in 0..p {
                self.scatter[(a, b)] += delta[a] * (v[b] - self.mean[b]);
            }
        }
    }

    /// Proposal covariance for the next coefficient move.
    fn proposal(&self) -> DMatrix<f64> {
        let p = self.mean.len();
        let pf = p as f64;
        let emp = if self.count <= 2 * p || self.count < 2 {
            DMatrix::identity(p, p) * 0.01
        } else {
            &self.scatter / (self.count as f64 - 1.0)
        };
        emp * (2.38 * 2.38 / (2.0 * pf)) + DMatrix::identity(p, p) * (0.01 / (2.0 * pf))
    }
}

/// Per-unit component densities and CDFs for the current parameters,
/// stored cluster-major.
struct Cache {
    n: usize,
    pdf: Vec<f64>,
    cdf: Vec<f64>,
    shift: Vec<f64>,
    h: Vec<f64>,
    lnlik: f64,
    cop: f64,
}

struct Totals {
    lnlik: f64,
    cop: f64,
}

fn fill_column(params: &MarginalParams, k: usize, data: &MarginData, shift: &[f64], pdf: &mut [f64], cdf: &mut [f64]) {
    let sd = params.precisions[k].sqrt().recip();
    let b0 = params.intercepts[k];
    for i in 0..data.n() {
        let c = TruncatedNormal::new_unchecked(b0 + shift[i], sd, params.lower);
        let t = data.t[i];
        pdf[i] = c.pdf(t);
        cdf[i] = c.cdf(t);
    }
}

fn compute_shift(params: &MarginalParams, data: &MarginData, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate().take(data.n()) {
        *o = params.shift(data.row(i));
    }
}

/// Sums the log-likelihood and copula term for cached columns; latent
/// scores go to `h`. `skip` and `alt` substitute one cluster's column.
#[allow(clippy::too_many_arguments)]
fn totals(
    params: &MarginalParams,
    data: &MarginData,
    shift: &[f64],
    pdf: &[f64],
    cdf: &[f64],
    alt: Option<(usize, &[f64], &[f64])>,
    coupling: &Coupling,
    with_scores: bool,
    h: &mut [f64],
) -> Totals {
    let n = data.n();
    let kmax = params.k_max();
    let w = &params.weights;
    let mut lnlik = 0.0;
    let mut cop = 0.0;
    let half = 0.5 * (1.0 - coupling.pjj);
    for i in 0..n {
        let mut d = 0.0;
        let mut f = 0.0;
        for k in 0..kmax {
            let (pk, ck) = match alt {
                Some((a, ap, ac)) if a == k => (ap[i], ac[i]),
                _ => (pdf[k * n + i], cdf[k * n + i]),
            };
            d += w[k] * pk;
            f += w[k] * ck;
        }
        lnlik += if d > 0.0 {
            d.ln()
        } else {
            slow_ln_density(params, data.t[i], shift[i])
        };
        if with_scores {
            let hi = latent_score(f);
            h[i] = hi;
            cop += half * hi * hi - hi * coupling.c[i];
        }
    }
    Totals { lnlik, cop }
}

fn slow_ln_density(params: &MarginalParams, t: f64, shift: f64) -> f64 {
    if t < params.lower {
        return f64::NEG_INFINITY;
    }
    let terms: Vec<f64> = (0..params.k_max())
        .filter(|&k| params.weights[k] > 0.0)
        .map(|k| {
            let c = TruncatedNormal::new_unchecked(params.intercepts[k] + shift, params.precisions[k].sqrt().recip(), params.lower);
            params.weights[k].ln() + c.ln_pdf(t)
        })
        .collect();
    log_sum_exp(&terms)
}

/// Sampler state of one margin.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalState {
    pub params: MarginalParams,
    pub labels: Vec<usize>,
    pub prior: MarginalPrior,
    pub acceptance: MarginalAcceptance,
    adapt: Adaptive,
}

impl MarginalState {
    pub fn new(params: MarginalParams, prior: MarginalPrior, n: usize) -> Result<Self> {
        params.validate()?;
        let p = params.p();
        Ok(Self {
            params,
            labels: vec![0; n],
            prior,
            acceptance: MarginalAcceptance::default(),
            adapt: Adaptive::new(p),
        })
    }

    /// Starting state: least-squares coefficients, intercepts scattered
    /// around the base mean, equal weights.
    pub fn initial<R: Rng + ?Sized>(
        prior: MarginalPrior,
        intercept: f64,
        beta_hat: Vec<f64>,
        k_max: usize,
        lower: f64,
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let spread = (prior.sigma_hat / 2.0).sqrt();
        let intercepts = (0..k_max)
            .map(|k| if k == 0 { intercept } else { intercept + spread * standard_normal(rng) })
            .collect();
        let sticks: Vec<f64> = (0..k_max).map(|k| 1.0 / (k_max - k) as f64).collect();
        let params = MarginalParams {
            intercepts,
            precisions: vec![2.0 / prior.sigma_hat; k_max],
            beta: beta_hat,
            weights: weights_from_sticks(&sticks),
            sticks,
            lambda: 1.0,
            mu: prior.mu_star,
            s: prior.s_star,
            a_star: 3.0,
            lower,
        };
        Self::new(params, prior, n)
    }

    /// One full Step-1 sweep (sticks and mass, hyperparameters, intercepts,
    /// coefficients, precisions). The final latent scores are written to
    /// `h_out`, which must hold `data.n()` values.
    pub fn sweep<R: Rng + ?Sized>(
        &mut self,
        data: &MarginData,
        coupling: &Coupling,
        tuning: &MarginalTuning,
        h_out: &mut [f64],
        rng: &mut R,
    ) {
        let mut cache = self.build_cache(data, coupling);
        self.update_weights(data, coupling, &mut cache, rng);
        self.update_hyper(rng);
        self.update_intercepts(data, coupling, tuning, &mut cache, rng);
        self.update_beta(data, coupling, &mut cache, rng);
        self.update_precisions(data, coupling, tuning, &mut cache, rng);
        h_out[..data.n()].copy_from_slice(&cache.h);
    }

    fn build_cache(&self, data: &MarginData, coupling: &Coupling) -> Cache {
        let n = data.n();
        let kmax = self.params.k_max();
        let mut shift = vec![0.0; n];
        compute_shift(&self.params, data, &mut shift);
        let mut pdf = vec![0.0; n * kmax];
        let mut cdf = vec![0.0; n * kmax];
        for k in 0..kmax {
            fill_column(&self.params, k, data, &shift, &mut pdf[k * n..(k + 1) * n], &mut cdf[k * n..(k + 1) * n]);
        }
        let mut h = vec![0.0; n];
        let with_scores = !coupling.is_identity();
        let t = totals(&self.params, data, &shift, &pdf, &cdf, None, coupling, with_scores, &mut h);
        Cache {
            n,
            pdf,
            cdf,
            shift,
            h,
            lnlik: t.lnlik,
            cop: t.cop,
        }
    }

    fn update_weights<R: Rng + ?Sized>(&mut self, data: &MarginData, coupling: &Coupling, cache: &mut Cache, rng: &mut R) {
        let n = data.n();
        let kmax = self.params.k_max();
        let mut counts = vec![0usize; kmax];
        let mut lw = vec![0.0; kmax];
        for i in 0..n {
            for k in 0..kmax {
                let v = self.params.weights[k] * cache.pdf[k * n + i];
                lw[k] = v.ln();
            }
            if lw.iter().all(|&v| v == f64::NEG_INFINITY) {
                // all kernels underflow; fall back to log densities
                for (k, l) in lw.iter_mut().enumerate() {
                    let c = TruncatedNormal::new_unchecked(
                        self.params.intercepts[k] + cache.shift[i],
                        self.params.precisions[k].sqrt().recip(),
                        self.params.lower,
                    );
                    *l = self.params.weights[k].ln() + c.ln_pdf(data.t[i]);
                }
            }
            let z = categorical_from_ln_weights(rng, &lw);
            self.labels[i] = z;
            counts[z] += 1;
        }
        let mut sticks = vec![1.0; kmax];
        let mut tail: usize = counts.iter().sum();
        for k in 0..kmax - 1 {
            tail -= counts[k];
            let v = beta(rng, 1.0 + counts[k] as f64, self.params.lambda + tail as f64);
            sticks[k] = v.min(1.0 - 1e-15);
        }
        let weights = weights_from_sticks(&sticks);
        // the conjugate draw targets the likelihood alone; correct for the copula term
        let mut cand = self.params.clone();
        cand.sticks = sticks;
        cand.weights = weights;
        let mut h = vec![0.0; n];
        let with_scores = !coupling.is_identity();
        let t = totals(&cand, data, &cache.shift, &cache.pdf, &cache.cdf, None, coupling, with_scores, &mut h);
        let ok = accept(rng, t.cop - cache.cop);
        self.acceptance.weights.record(ok);
        if ok {
            self.params = cand;
            cache.lnlik = t.lnlik;
            cache.cop = t.cop;
            cache.h = h;
        }
        let rate = 1.0 - self.params.sticks[..kmax - 1].iter().map(|v| (1.0 - v).ln()).sum::<f64>();
        self.params.lambda = gamma_rate(rng, kmax as f64, rate);
    }

    fn update_hyper<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let a_prop = uniform(rng, 1.0, 5.0);
        let mu_prop = self.params.mu + (self.prior.sigma_hat / 2.0).sqrt() * standard_normal(rng);
        let s_prop = uniform(rng, self.params.s - 0.1, self.params.s + 0.1);
        if !(s_prop > 0.0) {
            self.acceptance.hyper.record(false);
            return;
        }
        let p = &self.params;
        let mut old = self.prior.ln_hyper(p.mu, p.s, p.a_star);
        let mut new = self.prior.ln_hyper(mu_prop, s_prop, a_prop);
        for &b0 in &p.intercepts {
            old += self.prior.ln_intercept(b0, p.mu, p.s);
            new += self.prior.ln_intercept(b0, mu_prop, s_prop);
        }
        let ok = accept(rng, new - old);
        self.acceptance.hyper.record(ok);
        if ok {
            self.params.a_star = a_prop;
            self.params.mu = mu_prop;
            self.params.s = s_prop;
        }
    }

    fn update_intercepts<R: Rng + ?Sized>(
        &mut self,
        data: &MarginData,
        coupling: &Coupling,
        tuning: &MarginalTuning,
        cache: &mut Cache,
        rng: &mut R,
    ) {
        let n = cache.n;
        let mut pdf_k = vec![0.0; n];
        let mut cdf_k = vec![0.0; n];
        let mut h = vec![0.0; n];
        let with_scores = !coupling.is_identity();
        for k in 0..self.params.k_max() {
            let old = self.params.intercepts[k];
            let prop = old + tuning.intercept_step * standard_normal(rng);
            let mut cand = self.params.clone();
            cand.intercepts[k] = prop;
            fill_column(&cand, k, data, &cache.shift, &mut pdf_k, &mut cdf_k);
            let t = totals(&cand, data, &cache.shift, &cache.pdf, &cache.cdf, Some((k, &pdf_k, &cdf_k)), coupling, with_scores, &mut h);
            let lr = (t.lnlik + t.cop + self.prior.ln_intercept(prop, cand.mu, cand.s))
                - (cache.lnlik + cache.cop + self.prior.ln_intercept(old, cand.mu, cand.s));
            let ok = accept(rng, lr);
            self.acceptance.intercept.record(ok);
            if ok {
                self.params = cand;
                cache.pdf[k * n..(k + 1) * n].copy_from_slice(&pdf_k);
                cache.cdf[k * n..(k + 1) * n].copy_from_slice(&cdf_k);
                cache.lnlik = t.lnlik;
                cache.cop = t.cop;
                std::mem::swap(&mut cache.h, &mut h);
            }
        }
    }

    fn update_beta<R: Rng + ?Sized>(&mut self, data: &MarginData, coupling: &Coupling, cache: &mut Cache, rng: &mut R) {
        let p = self.params.p();
        if p == 0 {
            return;
        }
        let cov = self.adapt.proposal();
        let chol = LowerCholesky::new(&cov).expect("adaptive proposal covariance is positive definite");
        let z: Vec<f64> = (0..p).map(|_| standard_normal(rng)).collect();
        let mut step = vec![0.0; p];
        chol.mul_lower(&z, &mut step);
        let mut cand = self.params.clone();
        for (b, s) in cand.beta.iter_mut().zip(&step) {
            *b += s;
        }
        let n = cache.n;
        let kmax = cand.k_max();
        let mut shift = vec![0.0; n];
        compute_shift(&cand, data, &mut shift);
        let mut pdf = vec![0.0; n * kmax];
        let mut cdf = vec![0.0; n * kmax];
        for k in 0..kmax {
            fill_column(&cand, k, data, &shift, &mut pdf[k * n..(k + 1) * n], &mut cdf[k * n..(k + 1) * n]);
        }
        let mut h = vec![0.0; n];
        let with_scores = !coupling.is_identity();
        let t = totals(&cand, data, &shift, &pdf, &cdf, None, coupling, with_scores, &mut h);
        let lr = (t.lnlik + t.cop + self.prior.ln_beta(&cand.beta)) - (cache.lnlik + cache.cop + self.prior.ln_beta(&self.params.beta));
        let ok = accept(rng, lr);
        self.acceptance.beta.record(ok);
        if ok {
            self.params = cand;
            *cache = Cache {
                n,
                pdf,
                cdf,
                shift,
                h,
                lnlik: t.lnlik,
                cop: t.cop,
            };
        }
        self.adapt.push(&self.params.beta);
    }

    fn update_precisions<R: Rng + ?Sized>(
        &mut self,
        data: &MarginData,
        coupling: &Coupling,
        tuning: &MarginalTuning,
        cache: &mut Cache,
        rng: &mut R,
    ) {
        let n = cache.n;
        let c = tuning.variance_concentration;
        let mut pdf_k = vec![0.0; n];
        let mut cdf_k = vec![0.0; n];
        let mut h = vec![0.0; n];
        let with_scores = !coupling.is_identity();
        for k in 0..self.params.k_max() {
            let tau = self.params.precisions[k];
            let v = 1.0 / tau;
            let v_prop = gamma_rate(rng, c * v, c);
            let tau_prop = 1.0 / v_prop;
            if !(v_prop > 1e-300) || !tau_prop.is_finite() {
                self.acceptance.variance.record(false);
                continue;
            }
            let mut cand = self.params.clone();
            cand.precisions[k] = tau_prop;
            fill_column(&cand, k, data, &cache.shift, &mut pdf_k, &mut cdf_k);
            let t = totals(&cand, data, &cache.shift, &cache.pdf, &cache.cdf, Some((k, &pdf_k, &cdf_k)), coupling, with_scores, &mut h);
            // target on the variance scale carries the 1/v² Jacobian
            let lr = (t.lnlik + t.cop + self.prior.ln_tau(tau_prop) - 2.0 * v_prop.ln())
                - (cache.lnlik + cache.cop + self.prior.ln_tau(tau) - 2.0 * v.ln())
                + ln_gamma_pdf(v, c * v_prop, c)
                - ln_gamma_pdf(v_prop, c * v, c);
            let ok = accept(rng, lr);
            self.acceptance.variance.record(ok);
            if ok {
                self.params = cand;
                cache.pdf[k * n..(k + 1) * n].copy_from_slice(&pdf_k);
                cache.cdf[k * n..(k + 1) * n].copy_from_slice(&cdf_k);
                cache.lnlik = t.lnlik;
                cache.cop = t.cop;
                std::mem::swap(&mut cache.h, &mut h);
            }
        }
    }
}

/// Fits one margin on its own (no copula coupling) and returns the kept
/// parameter draws.
#[allow(clippy::too_many_arguments)]
pub fn fit_marginal<R: Rng + ?Sized>(
    data: &MarginData,
    lower: f64,
    k_max: usize,
    hyper_rate: HyperRate,
    beta_sd: f64,
    tuning: &MarginalTuning,
    n_iter: usize,
    n_burn: usize,
    thin: usize,
    rng: &mut R,
) -> Result<Vec<MarginalParams>> {
    if n_burn >= n_iter || thin == 0 {
        return Err(invalid("n_burn/thin", "need n_burn < n_iter and thin >= 1"));
    }
    let (prior, b0, bh) = MarginalPrior::from_observed(data.t, data.x, data.p, hyper_rate, beta_sd)?;
    let mut state = MarginalState::initial(prior, b0, bh, k_max, lower, data.n(), rng)?;
    let coupling = Coupling::none(data.n());
    let mut h = vec![0.0; data.n()];
    let mut out = Vec::with_capacity((n_iter - n_burn) / thin);
    for it in 0..n_iter {
        state.sweep(data, &coupling, tuning, &mut h, rng);
        if it >= n_burn && (it - n_burn + 1) % thin == 0 {
            out.push(state.params.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::copula_loglik;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn params(intercepts: &[f64], precisions: &[f64], sticks: &[f64], beta: &[f64], lower: f64) -> MarginalParams {
        MarginalParams {
            intercepts: intercepts.to_vec(),
            precisions: precisions.to_vec(),
            beta: beta.to_vec(),
            weights: weights_from_sticks(sticks),
            sticks: sticks.to_vec(),
            lambda: 1.0,
            mu: 0.0,
            s: 1.0,
            a_star: 2.0,
            lower,
        }
    }

    fn prior() -> MarginalPrior {
        MarginalPrior {
            mu_star: 0.0,
            s_star: 1.0,
            sigma_hat: 1.0,
            hyper_rate: HyperRate::DataScaled,
            beta_sd: 10.0,
            tau_shape: 1.0,
            tau_rate: 0.5,
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let w = weights_from_sticks(&[0.3, 0.5, 0.2, 1.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[1] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn single_active_cluster_is_truncnorm() {
        let p = params(&[1.0, 5.0], &[4.0, 1.0], &[1.0, 1.0], &[0.5], 0.0);
        let tn = TruncatedNormal::new(1.0 + 0.5 * 2.0, 0.25, 0.0).unwrap();
        for &t in &[0.1, 1.0, 2.0, 3.5] {
            assert!((p.cdf(t, &[2.0]) - tn.cdf(t)).abs() < 1e-15);
            assert!((p.pdf(t, &[2.0]) - tn.pdf(t)).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_components_match_single() {
        let one = params(&[0.3, 9.0], &[2.0, 1.0], &[1.0, 1.0], &[], 0.0);
        let two = params(&[0.3, 0.3], &[2.0, 2.0], &[0.5, 1.0], &[], 0.0);
        for &t in &[0.05, 0.4, 1.3] {
            assert!((one.cdf(t, &[]) - two.cdf(t, &[])).abs() < 1e-15);
            assert!((one.quantile(0.37, &[]).unwrap() - two.quantile(0.37, &[]).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn quantile_errors() {
        let p = params(&[0.0, 1.0], &[1.0, 1.0], &[0.5, 1.0], &[], 0.0);
        assert!(p.quantile(0.0, &[]).is_err());
        assert!(p.quantile(1.0, &[]).is_err());
    }

    proptest! {
        #[test]
        fn quantile_round_trip(b in proptest::collection::vec(-2.0f64..2.0, 3),
                               tau in proptest::collection::vec(0.2f64..20.0, 3),
                               v0 in 0.05f64..0.95, v1 in 0.05f64..0.95,
                               bounded in any::<bool>(), u in 0.001f64..0.999) {
            let lower = if bounded { 0.0 } else { f64::NEG_INFINITY };
            let p = params(&b, &tau, &[v0, v1, 1.0], &[0.7], lower);
            let x = [0.4];
            let t = p.quantile(u, &x).unwrap();
            prop_assert!(t >= lower);
            prop_assert!((p.cdf(t, &x) - u).abs() < 1e-10);
            let back = p.quantile(p.cdf(t, &x), &x).unwrap();
            prop_assert!((back - t).abs() < 1e-8 * (1.0 + t.abs()));
        }

        #[test]
        fn label_permutation_invariance(b in proptest::collection::vec(-2.0f64..2.0, 3),
                                        tau in proptest::collection::vec(0.2f64..20.0, 3),
                                        v0 in 0.05f64..0.95, v1 in 0.05f64..0.95,
                                        t in 0.0f64..3.0) {
            let p = params(&b, &tau, &[v0, v1, 1.0], &[], 0.0);
            let perm = [2usize, 0, 1];
            let mut q = p.clone();
            q.intercepts = perm.iter().map(|&k| p.intercepts[k]).collect();
            q.precisions = perm.iter().map(|&k| p.precisions[k]).collect();
            q.weights = perm.iter().map(|&k| p.weights[k]).collect();
            prop_assert!((p.pdf(t, &[]) - q.pdf(t, &[])).abs() < 1e-12 * (1.0 + p.pdf(t, &[])));
            prop_assert!((p.cdf(t, &[]) - q.cdf(t, &[])).abs() < 1e-12);
        }
    }

    fn synthetic(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = RngStream::new(seed, 0);
        let mut t = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let xi = standard_normal(&mut rng);
            x.push(xi);
            t.push(2.0 + 0.8 * xi + 0.5 * standard_normal(&mut rng));
        }
        (t, x)
    }

    #[test]
    fn identity_copula_reduces_to_likelihood_plus_prior() {
        let (t, x) = synthetic(40, 1);
        let data = MarginData { t: &t, x: &x, p: 1 };
        let p = params(&[2.0, 1.0], &[4.0, 1.0], &[0.6, 1.0], &[0.8], f64::NEG_INFINITY);
        let pr = prior();
        let lp = marginal_logpost(&p, &pr, &data, &Coupling::none(40));
        let direct: f64 = (0..40).map(|i| p.ln_pdf(t[i], &x[i..i + 1])).sum::<f64>() + pr.ln_prior(&p);
        assert!((lp - direct).abs() < 1e-9);
    }

    #[test]
    fn logpost_difference_matches_full_copula_likelihood() {
        let (t, x) = synthetic(30, 2);
        let data = MarginData { t: &t, x: &x, p: 1 };
        let pr = prior();
        let r = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.2, 0.4, 1.0, -0.3, 0.2, -0.3, 1.0]);
        let r_inv = r.clone().try_inverse().unwrap();
        let mut rng = RngStream::new(3, 0);
        let others: Vec<Vec<f64>> = (0..2).map(|_| (0..30).map(|_| standard_normal(&mut rng)).collect()).collect();
        let full = |p: &MarginalParams| {
            let h0: Vec<f64> = (0..30).map(|i| p.mixture(&x[i..i + 1]).latent(t[i])).collect();
            let cols = vec![h0, others[0].clone(), others[1].clone()];
            let hmat: Vec<Vec<f64>> = (0..30).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
            let lik: f64 = (0..30).map(|i| p.ln_pdf(t[i], &x[i..i + 1])).sum();
            copula_loglik(&hmat, &r).unwrap() + lik + pr.ln_prior(p)
        };
        let cols = vec![vec![0.0; 30], others[0].clone(), others[1].clone()];
        let coupling = Coupling::from_scores(&r_inv, &cols, 0);
        let a = params(&[2.0, 1.0], &[4.0, 1.0], &[0.6, 1.0], &[0.8], f64::NEG_INFINITY);
        let mut b = a.clone();
        b.intercepts[0] = 2.2;
        b.beta[0] = 0.7;
        let d_post = marginal_logpost(&b, &pr, &data, &coupling) - marginal_logpost(&a, &pr, &data, &coupling);
        let d_full = full(&b) - full(&a);
        assert!((d_post - d_full).abs() < 1e-9, "{d_post} vs {d_full}");
    }

    #[test]
    fn zero_coupling_ignores_shifted_scores() {
        let (t, x) = synthetic(20, 4);
        let data = MarginData { t: &t, x: &x, p: 1 };
        let r = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let r_inv = r.try_inverse().unwrap();
        let mut rng = RngStream::new(5, 0);
        let mut cols: Vec<Vec<f64>> = (0..3).map(|_| (0..20).map(|_| standard_normal(&mut rng)).collect()).collect();
        let p = params(&[2.0, 1.0], &[4.0, 1.0], &[0.6, 1.0], &[0.8], f64::NEG_INFINITY);
        let a = marginal_logpost(&p, &prior(), &data, &Coupling::from_scores(&r_inv, &cols, 0));
        for v in cols[2].iter_mut() {
            *v += 3.0;
        }
        let b = marginal_logpost(&p, &prior(), &data, &Coupling::from_scores(&r_inv, &cols, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn identity_proposal_accepts() {
        assert_eq!(mh_accept_prob(0.0), 1.0);
        assert_eq!(mh_accept_prob(2.0), 1.0);
        assert!((mh_accept_prob(-1.0) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn sweep_keeps_invariants() {
        let (t, x) = synthetic(60, 6);
        let data = MarginData { t: &t, x: &x, p: 1 };
        let mut rng = RngStream::new(7, 0);
        let (pr, b0, bh) = MarginalPrior::from_observed(&t, &x, 1, HyperRate::DataScaled, 10.0).unwrap();
        let mut s = MarginalState::initial(pr, b0, bh, 8, f64::NEG_INFINITY, 60, &mut rng).unwrap();
        let mut h = vec![0.0; 60];
        let r_inv = DMatrix::identity(2, 2) * 1.3;
        let cols = vec![vec![0.0; 60], (0..60).map(|i| (i as f64 / 30.0) - 1.0).collect()];
        let coupling = Coupling::from_scores(&r_inv, &cols, 0);
        for _ in 0..200 {
            s.sweep(&data, &coupling, &MarginalTuning::default(), &mut h, &mut rng);
            s.params.validate().unwrap();
            assert!((s.params.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.labels.iter().all(|&l| l < 8));
        }
        for i in 0..60 {
            assert!((h[i] - s.params.mixture(&x[i..i + 1]).latent(t[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_prior_recovered_without_data() {
        let data = MarginData { t: &[], x: &[], p: 2 };
        let pr = MarginalPrior { beta_sd: 2.0, ..prior() };
        let p = params(&[0.0, 0.0], &[1.0, 1.0], &[0.5, 1.0], &[0.0, 0.0], f64::NEG_INFINITY);
        let mut s = MarginalState::new(p, pr, 0).unwrap();
        let mut rng = RngStream::new(8, 0);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        let n = 100_000;
        let mut h = [];
        for _ in 0..n {
            s.sweep(&data, &Coupling::none(0), &MarginalTuning::default(), &mut h, &mut rng);
            for d in 0..2 {
                sum[d] += s.params.beta[d];
                sq[d] += s.params.beta[d].powi(2);
            }
        }
        for d in 0..2 {
            let mean = sum[d] / n as f64;
            let sd = (sq[d] / n as f64 - mean * mean).sqrt();
            assert!(mean.abs() < 0.25, "mean {mean}");
            assert!((sd - 2.0).abs() < 0.2, "sd {sd}");
        }
    }

    #[test]
    fn single_cluster_slope_matches_least_squares() {
        let (t, x) = synthetic(300, 9);
        let data = MarginData { t: &t, x: &x, p: 1 };
        let (_, bh, _) = ols_fit(&t, &x, 1).unwrap();
        let (pr, b0, bh0) = MarginalPrior::from_observed(&t, &x, 1, HyperRate::DataScaled, 10.0).unwrap();
        let mut rng = RngStream::new(10, 0);
        let mut s = MarginalState::initial(pr, b0, bh0, 1, f64::NEG_INFINITY, 300, &mut rng).unwrap();
        let mut h = vec![0.0; 300];
        let mut draws = Vec::new();
        for it in 0..6000 {
            s.sweep(&data, &Coupling::none(300), &MarginalTuning::default(), &mut h, &mut rng);
            if it >= 1000 {
                draws.push(s.params.beta[0]);
            }
        }
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|v| (v - m).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        assert!((m - bh[0]).abs() < 2.0 * sd, "posterior {m} ± {sd}, ls {}", bh[0]);
    }

    #[test]
    fn intercept_move_is_reversible() {
        // two-point dataset, one intercept coordinate: transition counts between
        // bins must be symmetric under detailed balance
        let t = [0.2, 0.9];
        let x: [f64; 0] = [];
        let data = MarginData { t: &t, x: &x, p: 0 };
        let p = params(&[0.5, 0.0], &[4.0, 4.0], &[1.0 - 1e-15, 1.0], &[], f64::NEG_INFINITY);
        let mut s = MarginalState::new(p, prior(), 2).unwrap();
        let tuning = MarginalTuning {
            intercept_step: 0.3,
            ..Default::default()
        };
        let coupling = Coupling::none(2);
        let mut rng = RngStream::new(11, 0);
        let bin = |v: f64| ((v + 1.0) / 0.5).floor().clamp(0.0, 5.0) as usize;
        let mut counts = [[0u64; 6]; 6];
        let mut cache = s.build_cache(&data, &coupling);
        let mut prev = bin(s.params.intercepts[0]);
        for _ in 0..400_000 {
            s.update_intercepts(&data, &coupling, &tuning, &mut cache, &mut rng);
            let cur = bin(s.params.intercepts[0]);
            counts[prev][cur] += 1;
            prev = cur;
        }
        for a in 0..6 {
            for b in a + 1..6 {
                let (nab, nba) = (counts[a][b] as f64, counts[b][a] as f64);
                if nab + nba < 100.0 {
                    continue;
                }
                let z = (nab - nba) / (nab + nba).sqrt();
                assert!(z.abs() < 4.0, "bins {a}->{b}: {nab} vs {nba}");
            }
        }
    }

    #[test]
    fn fit_marginal_returns_requested_draws() {
        let (t, x) = synthetic(50, 12);
        let data = MarginData { t: &t, x: &x, p: 1 };
        let mut rng = RngStream::new(13, 0);
        let draws = fit_marginal(&data, f64::NEG_INFINITY, 4, HyperRate::DataScaled, 10.0, &MarginalTuning::default(), 50, 20, 3, &mut rng).unwrap();
        assert_eq!(draws.len(), 10);
    }
}
