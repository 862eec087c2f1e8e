use nalgebra::DMatrix;
use rand::Rng;

use super::scalar::{gamma_rate, standard_normal};
use crate::error::{invalid, Result};
use crate::linalg::{cholesky, inverse_spd, symmetrize};

/// Wishart(df, scale) draw via the Bartlett decomposition; mean `df·scale`.
pub fn wishart<R: Rng + ?Sized>(rng: &mut R, df: f64, scale: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if !(df > d as f64 - 1.0) {
        return Err(invalid("df", format!("need df > dim - 1 = {}, got {df}", d as f64 - 1.0)));
    }
    let l = cholesky(scale)?.l();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        // chi-square with df - i degrees of freedom
        a[(i, i)] = (2.0 * gamma_rate(rng, 0.5 * (df - i as f64), 1.0)).sqrt();
        for j in 0..i {
            a[(i, j)] = standard_normal(rng);
        }
    }
    let la = l * a;
    let mut w = &la * la.transpose();
    symmetrize(&mut w);
    Ok(w)
}

/// Inverse-Wishart(df, scale) draw; mean `scale / (df - dim - 1)`.
pub fn inverse_wishart<R: Rng + ?Sized>(rng: &mut R, df: f64, scale: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let w = wishart(rng, df, &inverse_spd(scale)?)?;
    let mut s = inverse_spd(&w)?;
    symmetrize(&mut s);
    Ok(s)
}
