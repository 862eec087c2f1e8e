use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};

#[inline]
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform on the open interval `(lo, hi)`.
#[inline]
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return lo + (hi - lo) * u;
        }
    }
}

/// Gamma with shape/rate parameterisation (mean `shape / rate`).
pub fn gamma_rate<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters must be positive and finite")
        .sample(rng)
}

pub fn beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    Beta::new(a, b)
        .expect("beta parameters must be positive and finite")
        .sample(rng)
}

/// Draws an index with probability proportional to `exp(ln_w[i])`.
pub fn categorical_from_ln_weights<R: Rng + ?Sized>(rng: &mut R, ln_w: &[f64]) -> usize {
    let m = ln_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return rng.random_range(0..ln_w.len());
    }
    let total: f64 = ln_w.iter().map(|w| (w - m).exp()).sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in ln_w.iter().enumerate() {
        let p = (w - m).exp();
        if u < p {
            return i;
        }
        u -= p;
    }
    // rounding: last index with positive weight
    ln_w.iter()
        .rposition(|w| *w > f64::NEG_INFINITY)
        .unwrap_or(ln_w.len() - 1)
}
