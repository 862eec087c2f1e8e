//! Builders for hand-specified posterior draws used across unit tests.

use nalgebra::DMatrix;

use crate::copula::{CorrelationMatrix, PriorMode};
use crate::distributions::standard_normal;
use crate::marginal::MarginalParams;
use crate::model::{Dataset, ObservedUnit, PosteriorDraw};
use crate::outcome::OutcomeParams;
use crate::rng::RngStream;

/// A single normal component with mean `mean + betaᵀx`.
pub fn normal_margin(mean: f64, sd: f64, beta: &[f64], lower: f64) -> MarginalParams {
    MarginalParams {
        intercepts: vec![mean],
        precisions: vec![1.0 / (sd * sd)],
        beta: beta.to_vec(),
        sticks: vec![1.0],
        weights: vec![1.0],
        lambda: 1.0,
        mu: mean,
        s: 1.0,
        a_star: 2.0,
        lower,
    }
}

/// One-cluster outcome mixture whose conditional is exactly
/// `Y = intercept + coefsᵀ(m, x) + N(0, resid_var)` with standard normal inputs.
pub fn linear_outcome(intercept: f64, coefs: &[f64], resid_var: f64) -> OutcomeParams {
    let r = coefs.len();
    let d = r + 1;
    let mut sigma = DMatrix::identity(d, d);
    sigma[(0, 0)] = resid_var + coefs.iter().map(|b| b * b).sum::<f64>();
    for (i, &b) in coefs.iter().enumerate() {
        sigma[(0, i + 1)] = b;
        sigma[(i + 1, 0)] = b;
    }
    let mut mu = vec![0.0; d];
    mu[0] = intercept;
    OutcomeParams {
        mu,
        sigma: vec![sigma],
        sticks: vec![1.0],
        weights: vec![1.0],
        alpha: 1.0,
        m1: vec![0.0; d],
        k0: 1.0,
        psi1: DMatrix::identity(d, d),
    }
}

/// Dataset of `n` units alternating between arms, with standard normal
/// covariates and mediators.
pub fn random_dataset(n: usize, k: usize, p: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed, 77);
    let units = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..p).map(|_| standard_normal(&mut rng)).collect();
            let m: Vec<f64> = (0..k).map(|_| standard_normal(&mut rng)).collect();
            ObservedUnit::new((i % 2) as u8, m, standard_normal(&mut rng), x)
        })
        .collect();
    Dataset::new(units, k, p, f64::NEG_INFINITY)
}

/// Draw with the given parts; unobserved mediators are filled from
/// standard normals.
pub fn assemble_draw(data: &Dataset, margins: Vec<MarginalParams>, r: DMatrix<f64>, outcome: [OutcomeParams; 2], seed: u64) -> PosteriorDraw {
    let k = data.k;
    let mut rng = RngStream::new(seed, 78);
    let mut med = Vec::with_capacity(data.n() * 2 * k);
    for u in &data.units {
        for j in 0..2 * k {
            if (j / k) as u8 == u.z {
                med.push(u.m[j % k]);
            } else {
                med.push(standard_normal(&mut rng));
            }
        }
    }
    let corr = CorrelationMatrix::from_matrix(r, PriorMode::Uniform).expect("valid correlation");
    PosteriorDraw::new(0, 0, margins, corr, outcome, med).expect("consistent draw")
}

/// Normal margins for all `2K` potential mediators with shifted means.
pub fn margins(k: usize, p: usize) -> Vec<MarginalParams> {
    (0..2 * k).map(|j| normal_margin(0.3 * j as f64, 1.0 + 0.1 * j as f64, &vec![0.2; p], f64::NEG_INFINITY)).collect()
}

pub fn equicorrelated(d: usize, r: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { r })
}
