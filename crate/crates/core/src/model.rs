//! Domain types shared by every stage of the pipeline.

use crate::copula::{CorrelationMatrix, PriorMode};
use crate::error::{invalid, Error, Result};
use crate::marginal::MarginalParams;
use crate::outcome::OutcomeParams;

/// How a mediator column was transformed before modelling. Effects are
/// always reported on the modelled scale; the tag only labels output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MediatorTransform {
    #[default]
    Identity,
    Log,
}

impl MediatorTransform {
    pub fn as_str(&self) -> &'static str {
        match self {
            MediatorTransform::Identity => "identity",
            MediatorTransform::Log => "log",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservedUnit {
    pub z: u8,
    pub m: Vec<f64>,
    pub y: f64,
    pub x: Vec<f64>,
}

impl ObservedUnit {
    pub fn new(z: u8, m: Vec<f64>, y: f64, x: Vec<f64>) -> Self {
        Self { z, m, y, x }
    }

    /// Bit pattern of every field, for keying random streams by unit
    /// content rather than position.
    pub fn content_tags(&self) -> Vec<u64> {
        let mut v = Vec::with_capacity(2 + self.m.len() + self.x.len());
        v.push(self.z as u64);
        v.extend(self.m.iter().map(|f| f.to_bits()));
        v.push(self.y.to_bits());
        v.extend(self.x.iter().map(|f| f.to_bits()));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub units: Vec<ObservedUnit>,
    pub k: usize,
    pub p: usize,
    /// Lower support bound shared by all mediators; `-∞` for unbounded.
    pub lower_bound: f64,
    pub mediator_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub transforms: Vec<MediatorTransform>,
}

impl Dataset {
    /// Dataset with generated column names and no transforms. Not validated.
    pub fn new(units: Vec<ObservedUnit>, k: usize, p: usize, lower_bound: f64) -> Self {
        Self {
            units,
            k,
            p,
            lower_bound,
            mediator_names: (1..=k).map(|i| format!("m{i}")).collect(),
            covariate_names: (1..=p).map(|i| format!("x{i}")).collect(),
            transforms: vec![MediatorTransform::Identity; k],
        }
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn arm_count(&self, z: u8) -> usize {
        self.units.iter().filter(|u| u.z == z).count()
    }

    /// Indices of the units assigned to arm `z`.
    pub fn arm_indices(&self, z: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.units[i].z == z).collect()
    }

    /// Mean and standard deviation of the observed outcome in arm `z`.
    pub fn outcome_moments(&self, z: u8) -> (f64, f64) {
        let ys: Vec<f64> = self.units.iter().filter(|u| u.z == z).map(|u| u.y).collect();
        mean_sd(&ys)
    }
}

pub(crate) fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Checks every dataset invariant and returns the dataset unchanged, or the
/// full list of violations.
pub fn validate_dataset(raw: Dataset) -> Result<Dataset> {
    let mut errs = Vec::new();
    if raw.k == 0 {
        errs.push("dataset must have at least one mediator".to_string());
    }
    if raw.lower_bound.is_nan() || raw.lower_bound == f64::INFINITY {
        errs.push(format!("invalid mediator lower bound {}", raw.lower_bound));
    }
    if raw.mediator_names.len() != raw.k {
        errs.push(format!("{} mediator names for K = {}", raw.mediator_names.len(), raw.k));
    }
    if raw.covariate_names.len() != raw.p {
        errs.push(format!("{} covariate names for P = {}", raw.covariate_names.len(), raw.p));
    }
    if raw.transforms.len() != raw.k {
        errs.push(format!("{} transform tags for K = {}", raw.transforms.len(), raw.k));
    }
    for (i, u) in raw.units.iter().enumerate() {
        if u.z > 1 {
            errs.push(format!("unit {i}: treatment indicator {} is not 0 or 1", u.z));
        }
        if u.m.len() != raw.k {
            errs.push(format!("unit {i}: {} mediators, expected {}", u.m.len(), raw.k));
        }
        if u.x.len() != raw.p {
            errs.push(format!("unit {i}: {} covariates, expected {}", u.x.len(), raw.p));
        }
        for (k, &m) in u.m.iter().enumerate() {
            if !m.is_finite() {
                errs.push(format!("unit {i}: mediator {k} is not finite ({m})"));
            } else if m < raw.lower_bound {
                errs.push(format!(
                    "unit {i}: mediator {k} = {m} is below the lower bound {}",
                    raw.lower_bound
                ));
            }
        }
        if !u.y.is_finite() {
            errs.push(format!("unit {i}: outcome is not finite ({})", u.y));
        }
        for (p, &x) in u.x.iter().enumerate() {
            if !x.is_finite() {
                errs.push(format!("unit {i}: covariate {p} is not finite ({x})"));
            }
        }
    }
    if raw.arm_count(0) == 0 {
        errs.push("empty control arm".to_string());
    }
    if raw.arm_count(1) == 0 {
        errs.push("empty treated arm".to_string());
    }
    if errs.is_empty() {
        Ok(raw)
    } else {
        Err(Error::InvalidDataset(errs))
    }
}

/// Potential mediators of one unit, ordered `(M_1(0)..M_K(0), M_1(1)..M_K(1))`,
/// with their latent Gaussian scores.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialMediatorState {
    pub t: Vec<f64>,
    pub h: Vec<f64>,
    /// `observed[j]` is true for the half matching the unit's arm.
    pub observed: Vec<bool>,
}

impl PotentialMediatorState {
    pub fn new(unit: &ObservedUnit, t: Vec<f64>, h: Vec<f64>) -> Result<Self> {
        let k = unit.m.len();
        if t.len() != 2 * k || h.len() != 2 * k {
            return Err(Error::DimensionMismatch {
                expected: 2 * k,
                found: t.len().min(h.len()),
            });
        }
        let observed = observed_mask(unit.z, k);
        for j in 0..k {
            let idx = unit.z as usize * k + j;
            if t[idx] != unit.m[j] {
                return Err(invalid("t", format!("observed coordinate {idx} differs from the unit's mediator")));
            }
        }
        Ok(Self { t, h, observed })
    }

    pub fn k(&self) -> usize {
        self.t.len() / 2
    }

    /// Natural mediators under control, `M(0,…,0)`.
    pub fn m0(&self) -> &[f64] {
        &self.t[..self.k()]
    }

    /// Natural mediators under treatment, `M(1,…,1)`.
    pub fn m1(&self) -> &[f64] {
        &self.t[self.k()..]
    }
}

pub fn observed_mask(z: u8, k: usize) -> Vec<bool> {
    (0..2 * k).map(|j| (j >= k) == (z == 1)).collect()
}

/// Whether the marginal Gamma rate `b*` is data-scaled or fixed at `100·a*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HyperRate {
    #[default]
    DataScaled,
    HundredAStar,
}

impl HyperRate {
    pub fn as_str(&self) -> &'static str {
        match self {
            HyperRate::DataScaled => "data_scaled",
            HyperRate::HundredAStar => "hundred_a_star",
        }
    }
}

impl std::str::FromStr for HyperRate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data_scaled" => Ok(HyperRate::DataScaled),
            "hundred_a_star" => Ok(HyperRate::HundredAStar),
            _ => Err(invalid("hyper_rate", format!("unknown rate '{s}'"))),
        }
    }
}

/// Settings for the sampler. Tuning constants default to the values used
/// throughout the engine.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub k_max: usize,
    pub seed: u64,
    pub prior_mode: PriorMode,
    pub hyper_rate: HyperRate,
    /// Standard deviation of the random-walk proposal for cluster intercepts.
    pub intercept_step: f64,
    /// Concentration `c` of the Gamma proposal for cluster variances.
    pub variance_concentration: f64,
    /// Prior standard deviation of the shared covariate coefficients.
    pub beta_prior_sd: f64,
    /// Imputation step as a multiple of each margin's observed s.d.
    pub impute_step_scale: f64,
    /// Truncation level of the outcome mixture.
    pub outcome_truncation: usize,
    /// Inverse-Wishart degrees of freedom for outcome clusters.
    pub outcome_iw_df: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 10_000,
            n_burn: 2_500,
            thin: 5,
            k_max: 8,
            seed: 1,
            prior_mode: PriorMode::RhoConstrained,
            hyper_rate: HyperRate::DataScaled,
            intercept_step: 0.1,
            variance_concentration: 100.0,
            beta_prior_sd: 10.0,
            impute_step_scale: 0.5,
            outcome_truncation: 20,
            outcome_iw_df: 25.0,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burn >= self.n_iter {
            return Err(invalid("n_burn", format!("n_burn ({}) must be < n_iter ({})", self.n_burn, self.n_iter)));
        }
        if self.thin == 0 {
            return Err(invalid("thin", "must be at least 1"));
        }
        if self.k_max < 2 {
            return Err(invalid("k_max", "must be at least 2"));
        }
        if self.outcome_truncation < 2 {
            return Err(invalid("outcome_truncation", "must be at least 2"));
        }
        for (name, v) in [
            ("intercept_step", self.intercept_step),
            ("variance_concentration", self.variance_concentration),
            ("beta_prior_sd", self.beta_prior_sd),
            ("impute_step_scale", self.impute_step_scale),
            ("outcome_iw_df", self.outcome_iw_df),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        if self.variance_concentration == 0.0 || self.beta_prior_sd == 0.0 {
            return Err(invalid("config", "variance_concentration and beta_prior_sd must be positive"));
        }
        Ok(())
    }

    /// Number of draws kept after burn-in and thinning.
    pub fn n_retained(&self) -> usize {
        (self.n_iter - self.n_burn) / self.thin
    }

    /// Whether iteration `t` (0-based) is kept.
    pub fn is_retained(&self, t: usize) -> bool {
        t >= self.n_burn && (t - self.n_burn + 1) % self.thin == 0
    }
}

/// One retained state of the chain. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraw {
    iteration: usize,
    rng_position: u128,
    marginals: Vec<MarginalParams>,
    correlation: CorrelationMatrix,
    outcome: [OutcomeParams; 2],
    mediators: Vec<f64>,
}

impl PosteriorDraw {
    /// `marginals` is indexed by coordinate (`j < K` is `M_j(0)`), and
    /// `mediators` is the row-major `n × 2K` potential-mediator matrix.
    pub fn new(
        iteration: usize,
        rng_position: u128,
        marginals: Vec<MarginalParams>,
        correlation: CorrelationMatrix,
        outcome: [OutcomeParams; 2],
        mediators: Vec<f64>,
    ) -> Result<Self> {
        let dim = correlation.dim();
        if marginals.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: marginals.len(),
            });
        }
        if dim == 0 || mediators.len() % dim != 0 {
            return Err(invalid("mediators", format!("length {} is not a multiple of {dim}", mediators.len())));
        }
        let lower = marginals[0].lower();
        if mediators.iter().any(|&t| !(t >= lower)) {
            return Err(invalid("mediators", "a potential mediator lies below the support bound"));
        }
        let od = outcome[0].dim();
        if outcome[1].dim() != od || od < 1 + dim {
            return Err(invalid("outcome", "outcome states have inconsistent dimensions"));
        }
        Ok(Self {
            iteration,
            rng_position,
            marginals,
            correlation,
            outcome,
            mediators,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn rng_position(&self) -> u128 {
        self.rng_position
    }

    pub fn k(&self) -> usize {
        self.correlation.dim() / 2
    }

    pub fn n(&self) -> usize {
        self.mediators.len() / self.correlation.dim()
    }

    pub fn marginals(&self) -> &[MarginalParams] {
        &self.marginals
    }

    /// Margin of mediator `k` under arm `z`.
    pub fn marginal(&self, k: usize, z: u8) -> &MarginalParams {
        &self.marginals[z as usize * self.k() + k]
    }

    pub fn correlation(&self) -> &CorrelationMatrix {
        &self.correlation
    }

    pub fn outcome(&self, z: u8) -> &OutcomeParams {
        &self.outcome[z as usize]
    }

    pub fn mediators(&self) -> &[f64] {
        &self.mediators
    }

    /// The `2K` potential mediators of unit `i`.
    pub fn unit_mediators(&self, i: usize) -> &[f64] {
        let d = self.correlation.dim();
        &self.mediators[i * d..(i + 1) * d]
    }
}
