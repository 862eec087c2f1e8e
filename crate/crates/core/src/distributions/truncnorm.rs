use rand::Rng;

use super::normal::{
    ln_std_normal_pdf, ln_std_normal_sf, std_normal_cdf, std_normal_quantile, std_normal_sf,
};
use super::scalar::{standard_normal, uniform};
use crate::error::{invalid, Result};

/// Standardised truncation point above which sampling switches from
/// inverse-CDF to exponential-proposal rejection.
const TAIL_SWITCH: f64 = 5.0;

/// Normal distribution restricted to `[lower, ∞)`.
///
/// `lower = -∞` gives the untruncated normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedNormal {
    mu: f64,
    sd: f64,
    lower: f64,
    // standardised lower bound and ln P(X >= lower) of the parent normal
    alpha: f64,
    ln_mass: f64,
}

impl TruncatedNormal {
    pub fn new(mu: f64, sigma2: f64, lower: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(invalid("sigma2", format!("must be positive and finite, got {sigma2}")));
        }
        if !mu.is_finite() || lower.is_nan() || lower == f64::INFINITY {
            return Err(invalid("mu/lower", format!("mu={mu}, lower={lower}")));
        }
        Ok(Self::new_unchecked(mu, sigma2.sqrt(), lower))
    }

    /// Construction from a standard deviation without validation; used in
    /// hot loops where parameters are already known to be valid.
    #[inline]
    pub(crate) fn new_unchecked(mu: f64, sd: f64, lower: f64) -> Self {
        if lower == f64::NEG_INFINITY {
            return Self {
                mu,
                sd,
                lower,
                alpha: f64::NEG_INFINITY,
                ln_mass: 0.0,
            };
        }
        let alpha = (lower - mu) / sd;
        Self {
            mu,
            sd,
            lower,
            alpha,
            ln_mass: ln_std_normal_sf(alpha),
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma2(&self) -> f64 {
        self.sd * self.sd
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    #[inline]
    pub fn ln_pdf(&self, t: f64) -> f64 {
        if t < self.lower {
            return f64::NEG_INFINITY;
        }
        let x = (t - self.mu) / self.sd;
        ln_std_normal_pdf(x) - self.sd.ln() - self.ln_mass
    }

    #[inline]
    pub fn pdf(&self, t: f64) -> f64 {
        self.ln_pdf(t).exp()
    }

    #[inline]
    pub fn cdf(&self, t: f64) -> f64 {
        if t <= self.lower {
            return 0.0;
        }
        if t == f64::INFINITY {
            return 1.0;
        }
        let x = (t - self.mu) / self.sd;
        if self.alpha == f64::NEG_INFINITY {
            return std_normal_cdf(x);
        }
        if x > 0.0 || self.alpha > 0.0 {
            // 1 - sf(x)/sf(alpha)
            -(ln_std_normal_sf(x) - self.ln_mass).exp_m1()
        } else {
            (std_normal_cdf(x) - std_normal_cdf(self.alpha)) / self.ln_mass.exp()
        }
    }

    /// `1 - cdf(t)`, accurate in the upper tail.
    #[inline]
    pub fn sf(&self, t: f64) -> f64 {
        if t <= self.lower {
            return 1.0;
        }
        let x = (t - self.mu) / self.sd;
        if self.alpha == f64::NEG_INFINITY {
            return std_normal_sf(x);
        }
        (ln_std_normal_sf(x) - self.ln_mass).exp().min(1.0)
    }

    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(invalid("u", format!("quantile argument must lie in (0,1), got {u}")));
        }
        Ok(self.quantile_unchecked(u))
    }

    #[inline]
    pub(crate) fn quantile_unchecked(&self, u: f64) -> f64 {
        let x = if self.alpha == f64::NEG_INFINITY {
            std_normal_quantile(u)
        } else {
            let mass = self.ln_mass.exp();
            // upper-tail mass left above the quantile
            let upper = (1.0 - u) * mass;
            if mass < 1e-300 {
                // far tail: exponential approximation of the truncated law
                self.alpha - (1.0 - u).ln() / self.alpha
            } else if upper < 0.5 {
                -std_normal_quantile(upper)
            } else {
                std_normal_quantile(std_normal_cdf(self.alpha) + u * mass)
            }
        };
        (self.mu + self.sd * x).max(self.lower)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.alpha == f64::NEG_INFINITY {
            return self.mu + self.sd * standard_normal(rng);
        }
        if self.alpha > TAIL_SWITCH {
            return self.mu + self.sd * tail_rejection(rng, self.alpha);
        }
        self.quantile_unchecked(uniform(rng, 0.0, 1.0))
    }
}

/// Robert (1995) exponential-proposal sampler for `N(0,1)` restricted to
/// `[a, ∞)` with large `a`.
fn tail_rejection<R: Rng + ?Sized>(rng: &mut R, a: f64) -> f64 {
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e = -uniform(rng, 0.0, 1.0).ln() / lambda;
        let z = a + e;
        let rho = (-0.5 * (z - lambda) * (z - lambda)).exp();
        if uniform(rng, 0.0, 1.0) <= rho {
            return z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    /// Simpson's rule on [a, b].
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    fn ks_distance(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn untruncated_is_standard_normal() {
        let d = TruncatedNormal::new(0.0, 1.0, f64::NEG_INFINITY).unwrap();
        assert_eq!(d.cdf(0.0), 0.5);
    }

    #[test]
    fn support_endpoints() {
        let d = TruncatedNormal::new(0.3, 2.0, -0.5).unwrap();
        assert_eq!(d.cdf(-0.5), 0.0);
        assert_eq!(d.cdf(f64::INFINITY), 1.0);
        assert!((d.cdf(1e6) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn half_normal_mean_matches_quadrature() {
        let d = TruncatedNormal::new(0.0, 1.0, 0.0).unwrap();
        // oracle: ∫ t·pdf(t) dt on [0, 40]
        let oracle = simpson(|t| t * 2.0 * (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt(), 0.0, 40.0, 200_000);
        assert!((oracle - 0.797_884_560_802_865_4).abs() < 1e-10);
        let mut rng = RngStream::new(2024, 1);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - oracle).abs() < 3.0 * se, "mean {mean} oracle {oracle} se {se}");
        assert!(draws.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn pdf_is_derivative_of_cdf() {
        let d = TruncatedNormal::new(1.0, 0.5, 0.2).unwrap();
        for &t in &[0.3, 0.9, 1.7, 3.0] {
            let h = 1e-6;
            let num = (d.cdf(t + h) - d.cdf(t - h)) / (2.0 * h);
            assert!((num - d.pdf(t)).abs() < 1e-7);
        }
        // density integrates to one
        let mass = simpson(|t| d.pdf(t), 0.2, 12.0, 20_000);
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quantile_round_trip_moderate() {
        let d = TruncatedNormal::new(-0.4, 1.7, 0.0).unwrap();
        for &t in &[1e-3, 0.1, 0.8, 2.2, 4.0] {
            let back = d.quantile(d.cdf(t)).unwrap();
            assert!((back - t).abs() < 1e-10, "{t} -> {back}");
        }
    }

    #[test]
    fn errors() {
        assert!(TruncatedNormal::new(0.0, 0.0, 0.0).is_err());
        assert!(TruncatedNormal::new(0.0, -1.0, 0.0).is_err());
        let d = TruncatedNormal::new(0.0, 1.0, 0.0).unwrap();
        assert!(d.quantile(0.0).is_err());
        assert!(d.quantile(1.0).is_err());
        assert!(d.quantile(1.5).is_err());
    }

    #[test]
    fn samples_match_cdf_ks() {
        let mut rng = RngStream::new(77, 0);
        for (mu, s2, lo) in [(0.0, 1.0, f64::NEG_INFINITY), (1.0, 0.25, 0.0), (-2.0, 0.5, 0.0), (0.0, 1.0, 6.0)] {
            let d = TruncatedNormal::new(mu, s2, lo).unwrap();
            let xs: Vec<f64> = (0..100_000).map(|_| d.sample(&mut rng)).collect();
            let ks = ks_distance(xs, |x| d.cdf(x));
            assert!(ks < 0.01, "ks {ks} for ({mu},{s2},{lo})");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = TruncatedNormal::new(0.5, 2.0, 0.0).unwrap();
        let mut a = RngStream::new(3, 3);
        let mut b = RngStream::new(3, 3);
        for _ in 0..100 {
            assert_eq!(d.sample(&mut a).to_bits(), d.sample(&mut b).to_bits());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn cdf_of_quantile_round_trip(mu in -5.0f64..5.0, s2 in 0.01f64..10.0,
                                      lo in prop_oneof![Just(f64::NEG_INFINITY), -3.0f64..3.0],
                                      u in 1e-6f64..(1.0 - 1e-6)) {
            let d = TruncatedNormal::new(mu, s2, lo).unwrap();
            let t = d.quantile(u).unwrap();
            prop_assert!(t >= lo);
            prop_assert!((d.cdf(t) - u).abs() < 1e-8, "u={} back={}", u, d.cdf(t));
        }
    }
}
