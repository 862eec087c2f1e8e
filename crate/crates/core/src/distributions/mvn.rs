use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::scalar::standard_normal;
use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky, min_eigenvalue, symmetrize};

/// Multivariate normal with a cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct Mvn {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    l: DMatrix<f64>,
    log_det: f64,
}

impl Mvn {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: cov.nrows(),
            });
        }
        if (0..d).any(|i| (0..i).any(|j| (cov[(i, j)] - cov[(j, i)]).abs() > 1e-10 * (1.0 + cov[(i, j)].abs()))) {
            return Err(invalid("cov", "covariance is not symmetric"));
        }
        let chol = cholesky(&cov)?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            l,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| standard_normal(rng));
        (&self.mean + &self.l * z).as_slice().to_vec()
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let diff = DVector::from_column_slice(x) - &self.mean;
        let w = self
            .l
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_det + w.norm_squared())
    }

    /// Distribution of the coordinates not in `given`, conditional on
    /// `x[given[i]] = values[i]`. Remaining coordinates keep their order.
    pub fn conditional(&self, given: &[usize], values: &[f64]) -> Result<Mvn> {
        let d = self.dim();
        if given.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: given.len(),
                found: values.len(),
            });
        }
        if given.iter().any(|&g| g >= d) {
            return Err(invalid("given", format!("index out of range for dimension {d}")));
        }
        let free: Vec<usize> = (0..d).filter(|i| !given.contains(i)).collect();
        if given.is_empty() {
            return Ok(self.clone());
        }
        let s_gg = DMatrix::from_fn(given.len(), given.len(), |i, j| self.cov[(given[i], given[j])]);
        let s_fg = DMatrix::from_fn(free.len(), given.len(), |i, j| self.cov[(free[i], given[j])]);
        let s_ff = DMatrix::from_fn(free.len(), free.len(), |i, j| self.cov[(free[i], free[j])]);
        let chol = cholesky(&s_gg)?;
        let resid = DVector::from_fn(given.len(), |i, _| values[i] - self.mean[given[i]]);
        let mean_f = DVector::from_fn(free.len(), |i, _| self.mean[free[i]]) + &s_fg * chol.solve(&resid);
        let mut cov_f = s_ff - &s_fg * chol.solve(&s_fg.transpose());
        symmetrize(&mut cov_f);
        Mvn::new(mean_f.as_slice().to_vec(), cov_f)
    }
}

/// `sqrt(wᵀ S⁻¹ w)`.
pub fn mahalanobis(w: &[f64], s: &DMatrix<f64>) -> Result<f64> {
    if s.nrows() != w.len() || s.ncols() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: s.nrows(),
            found: w.len(),
        });
    }
    let chol = s.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        min_eigenvalue: min_eigenvalue(s),
    })?;
    let y = chol
        .l()
        .solve_lower_triangular(&DVector::from_column_slice(w))
        .expect("cholesky factor has a positive diagonal");
    Ok(y.norm())
}
