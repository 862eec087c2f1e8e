//! The full sampler: margins, copula, imputation and outcome mixtures,
//! updated in that order each iteration.

use std::time::Instant;

use crate::copula::{scatter, CorrelationMatrix};
use crate::error::{Error, Result};
use crate::imputation::{impute_all, initial_states, proposal_steps};
use crate::marginal::{Acceptance, Coupling, MarginData, MarginalPrior, MarginalState, MarginalTuning};
use crate::model::{validate_dataset, ChainConfig, Dataset, PosteriorDraw, PotentialMediatorState};
use crate::outcome::{OutcomeConditional, OutcomeData, OutcomeState};
use crate::rng::RngStream;

/// Acceptance counts per Metropolis block, pooled over margins and units.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ChainAcceptance {
    pub weights: Acceptance,
    pub hyper: Acceptance,
    pub intercept: Acceptance,
    pub beta: Acceptance,
    pub variance: Acceptance,
    pub correlation: Acceptance,
    pub imputation: Acceptance,
}

impl ChainAcceptance {
    /// `(block name, rate)` pairs in sampler order.
    pub fn rates(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("step1a_weights", self.weights.rate()),
            ("step1b_hyper", self.hyper.rate()),
            ("step1c_intercept", self.intercept.rate()),
            ("step1d_beta", self.beta.rate()),
            ("step1e_variance", self.variance.rate()),
            ("step2_correlation", self.correlation.rate()),
            ("step3_imputation", self.imputation.rate()),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub draws: Vec<PosteriorDraw>,
    pub acceptance: ChainAcceptance,
    pub seconds: f64,
}

fn wrap(module: &'static str, iteration: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Chain {
        module,
        iteration,
        source: Box::new(e),
    }
}

/// Live sampler state.
pub struct Chain<'a> {
    data: &'a Dataset,
    rng: RngStream,
    x: Vec<f64>,
    margins: Vec<MarginalState>,
    units: Vec<PotentialMediatorState>,
    correlation: CorrelationMatrix,
    outcome: [OutcomeState; 2],
    arm_units: [Vec<usize>; 2],
    steps: Vec<f64>,
    tuning: MarginalTuning,
    iteration: usize,
    pub acceptance: ChainAcceptance,
    window: Acceptance,
}

impl<'a> Chain<'a> {
    /// Least-squares starting margins, imputation from the margins, then one
    /// outcome sweep.
    pub fn new(data: &'a Dataset, config: &ChainConfig) -> Result<Self> {
        config.validate()?;
        let data_checked = validate_dataset(data.clone())?;
        debug_assert_eq!(&data_checked, data);
        let k = data.k;
        let p = data.p;
        let n = data.n();
        let mut rng = RngStream::new(config.seed, 0);
        let x: Vec<f64> = data.units.iter().flat_map(|u| u.x.iter().copied()).collect();
        let mut margins = Vec::with_capacity(2 * k);
        for j in 0..2 * k {
            let z = (j / k) as u8;
            let idx = data.arm_indices(z);
            let t_obs: Vec<f64> = idx.iter().map(|&i| data.units[i].m[j % k]).collect();
            let x_obs: Vec<f64> = idx.iter().flat_map(|&i| data.units[i].x.iter().copied()).collect();
            let (prior, b0, beta) = MarginalPrior::from_observed(&t_obs, &x_obs, p, config.hyper_rate, config.beta_prior_sd).map_err(wrap("marginal", 0))?;
            margins.push(MarginalState::initial(prior, b0, beta, config.k_max, data.lower_bound, n, &mut rng)?);
        }
        let params: Vec<_> = margins.iter().map(|m| m.params.clone()).collect();
        let units = initial_states(data, &params, &mut rng);
        let correlation = CorrelationMatrix::initial(k, config.prior_mode);
        let arm_units = [data.arm_indices(0), data.arm_indices(1)];
        let mut outcome = Vec::with_capacity(2);
        for z in 0..2 {
            let (rows, ids) = outcome_rows(data, &units, &arm_units[z]);
            let od = OutcomeData {
                rows: &rows,
                dim: 1 + 2 * k + p,
                ids: &ids,
            };
            let mut st = OutcomeState::initial(&od, config.outcome_truncation, config.outcome_iw_df, &mut rng).map_err(wrap("outcome", 0))?;
            st.sweep(&od, &mut rng).map_err(wrap("outcome", 0))?;
            outcome.push(st);
        }
        let outcome: [OutcomeState; 2] = outcome.try_into().map_err(|_| Error::Archive("outcome states".into()))?;
        Ok(Self {
            data,
            rng,
            x,
            margins,
            units,
            correlation,
            outcome,
            arm_units,
            steps: proposal_steps(data, config.impute_step_scale),
            tuning: MarginalTuning {
                intercept_step: config.intercept_step,
                variance_concentration: config.variance_concentration,
            },
            iteration: 0,
            acceptance: ChainAcceptance::default(),
            window: Acceptance::default(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn correlation(&self) -> &CorrelationMatrix {
        &self.correlation
    }

    pub fn units(&self) -> &[PotentialMediatorState] {
        &self.units
    }

    /// One iteration of Steps 1 to 4.
    pub fn step(&mut self) -> Result<()> {
        let it = self.iteration;
        let k = self.data.k;
        let d = 2 * k;
        let n = self.data.n();

        // Step 1: margins, each coupled to the current scores of the others
        let t_cols: Vec<Vec<f64>> = (0..d).map(|j| self.units.iter().map(|u| u.t[j]).collect()).collect();
        let mut h_cols: Vec<Vec<f64>> = (0..d).map(|j| self.units.iter().map(|u| u.h[j]).collect()).collect();
        let r_inv = self.correlation.inverse();
        let mut h_new = vec![0.0; n];
        for j in 0..d {
            let coupling = Coupling::from_scores(&r_inv, &h_cols, j);
            let md = MarginData {
                t: &t_cols[j],
                x: &self.x,
                p: self.data.p,
            };
            let m = &mut self.margins[j];
            m.sweep(&md, &coupling, &self.tuning, &mut h_new, &mut self.rng);
            h_cols[j].copy_from_slice(&h_new);
        }
        for (i, u) in self.units.iter_mut().enumerate() {
            for j in 0..d {
                u.h[j] = h_cols[j][i];
            }
        }

        // Step 2: correlation matrix
        let w = scatter(&h_cols);
        self.correlation.update(&w, n, &mut self.rng, &mut self.acceptance.correlation);

        // Step 3: missing potential mediators
        let r_inv = self.correlation.inverse();
        let params: Vec<_> = self.margins.iter().map(|m| m.params.clone()).collect();
        let cond: [OutcomeConditional; 2] = [self.outcome[0].params.conditional(), self.outcome[1].params.conditional()];
        let impute_seed = rand::RngCore::next_u64(&mut self.rng);
        let acc = impute_all(&mut self.units, self.data, &params, &r_inv, &cond, &self.steps, impute_seed, it as u64);
        self.acceptance.imputation.merge(&acc);
        self.window.merge(&acc);
        if (it + 1) % 500 == 0 {
            let rate = self.window.rate();
            if !(0.15..=0.6).contains(&rate) {
                log::warn!("imputation acceptance {rate:.3} over iterations {}..{} is outside [0.15, 0.6]", it + 1 - 500, it + 1);
            }
            self.window = Acceptance::default();
        }

        // Step 4: outcome mixtures
        for z in 0..2 {
            let (rows, ids) = outcome_rows(self.data, &self.units, &self.arm_units[z]);
            let od = OutcomeData {
                rows: &rows,
                dim: 1 + d + self.data.p,
                ids: &ids,
            };
            self.outcome[z].sweep(&od, &mut self.rng).map_err(wrap("outcome", it))?;
        }
        self.iteration += 1;
        Ok(())
    }

    /// Snapshot of the current state.
    pub fn snapshot(&self) -> Result<PosteriorDraw> {
        let mediators: Vec<f64> = self.units.iter().flat_map(|u| u.t.iter().copied()).collect();
        PosteriorDraw::new(
            self.iteration.saturating_sub(1),
            self.rng.position(),
            self.margins.iter().map(|m| m.params.clone()).collect(),
            self.correlation.clone(),
            [self.outcome[0].params.clone(), self.outcome[1].params.clone()],
            mediators,
        )
    }

    fn pool_margin_acceptance(&mut self) {
        for m in &self.margins {
            let a = &m.acceptance;
            self.acceptance.weights.merge(&a.weights);
            self.acceptance.hyper.merge(&a.hyper);
            self.acceptance.intercept.merge(&a.intercept);
            self.acceptance.beta.merge(&a.beta);
            self.acceptance.variance.merge(&a.variance);
        }
    }
}

fn outcome_rows(data: &Dataset, units: &[PotentialMediatorState], idx: &[usize]) -> (Vec<f64>, Vec<u64>) {
    let mut rows = Vec::with_capacity(idx.len() * (1 + units.first().map_or(0, |u| u.t.len()) + data.p));
    for &i in idx {
        rows.push(data.units[i].y);
        rows.extend_from_slice(&units[i].t);
        rows.extend_from_slice(&data.units[i].x);
    }
    (rows, idx.iter().map(|&i| i as u64).collect())
}

/// Runs the configured chain and returns the retained draws.
pub fn run_chain(data: &Dataset, config: &ChainConfig) -> Result<ChainOutput> {
    let start = Instant::now();
    let mut chain = Chain::new(data, config)?;
    let mut draws = Vec::with_capacity(config.n_retained());
    for t in 0..config.n_iter {
        chain.step()?;
        if config.is_retained(t) {
            draws.push(chain.snapshot().map_err(wrap("chain", t))?);
        }
        if (t + 1) % 1000 == 0 {
            log::info!("iteration {} of {}", t + 1, config.n_iter);
        }
    }
    chain.pool_margin_acceptance();
    let rate = chain.acceptance.imputation.rate();
    if !(0.15..=0.6).contains(&rate) {
        log::warn!("overall imputation acceptance {rate:.3} is outside [0.15, 0.6]");
    }
    Ok(ChainOutput {
        draws,
        acceptance: chain.acceptance,
        seconds: start.elapsed().as_secs_f64(),
    })
}
