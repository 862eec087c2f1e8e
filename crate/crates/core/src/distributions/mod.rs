//! Seeded samplers and density primitives.
//!
//! All samplers are pure functions of their parameters and the caller's
//! [`RngStream`](crate::rng::RngStream).

mod mvn;
mod normal;
mod scalar;
mod truncnorm;
mod wishart;

pub use mvn::{mahalanobis, Mvn};
pub use normal::{
    clamp_unit, ln_std_normal_pdf, ln_std_normal_sf, std_normal_cdf, std_normal_pdf,
    std_normal_quantile, std_normal_sf, CDF_CLAMP,
};
pub use scalar::{beta, categorical_from_ln_weights, gamma_rate, standard_normal, uniform};
pub use truncnorm::TruncatedNormal;
pub use wishart::{inverse_wishart, wishart};
