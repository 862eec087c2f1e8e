//! Gaussian copula over the 2K potential-mediator coordinates.
//!
//! Coordinate `j < K` is mediator `j` under control, `K + j` is mediator `j`
//! under treatment.

use nalgebra::DMatrix;
use rand::Rng;

use crate::distributions::uniform;
use crate::error::{invalid, Error, Result};
use crate::linalg::min_eigenvalue;
use crate::marginal::Acceptance;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorMode {
    /// Uniform prior over every off-diagonal entry on the PD set.
    Uniform,
    /// Within-arm entries restricted to be positive; cross-arm entries tied
    /// to them through a single parameter.
    RhoConstrained,
}

impl PriorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PriorMode::Uniform => "uniform",
            PriorMode::RhoConstrained => "rho_constrained",
        }
    }
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PriorMode::Uniform),
            "rho_constrained" | "rho" => Ok(PriorMode::RhoConstrained),
            _ => Err(invalid("prior_mode", format!("unknown mode '{s}'"))),
        }
    }
}

/// Range of one off-diagonal entry that keeps the matrix PD.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdInterval {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    r: DMatrix<f64>,
    mode: PriorMode,
    rho: Option<f64>,
}

fn check_correlation(r: &DMatrix<f64>) -> Result<()> {
    let d = r.nrows();
    if r.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: r.ncols(),
        });
    }
    for i in 0..d {
        if (r[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(invalid("R", format!("diagonal entry {i} is {}", r[(i, i)])));
        }
        for j in 0..i {
            if r[(i, j)] != r[(j, i)] || !(r[(i, j)].abs() <= 1.0) {
                return Err(invalid("R", format!("entry ({i},{j}) is not a symmetric correlation")));
            }
        }
    }
    let ev = min_eigenvalue(r);
    if !(ev > 0.0) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: ev });
    }
    Ok(())
}

/// Cross-arm entries from within-arm blocks: `ρ (r⁰_jk + r¹_jk) / 2`,
/// which is `ρ` on the diagonal.
pub fn build_constrained_r(r0: &DMatrix<f64>, r1: &DMatrix<f64>, rho: f64) -> Result<CorrelationMatrix> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(invalid("rho", format!("{rho} outside [0, 1]")));
    }
    let k = r0.nrows();
    if r1.nrows() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: r1.nrows(),
        });
    }
    let r = assemble(r0, r1, rho);
    let ev = min_eigenvalue(&r);
    if !(ev > 0.0) {
        return Err(Error::IncompatibleCorrelation { rho });
    }
    check_correlation(&r)?;
    Ok(CorrelationMatrix {
        r,
        mode: PriorMode::RhoConstrained,
        rho: Some(rho),
    })
}

fn assemble(r0: &DMatrix<f64>, r1: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let k = r0.nrows();
    let mut r = DMatrix::zeros(2 * k, 2 * k);
    for a in 0..k {
        for b in 0..k {
            r[(a, b)] = r0[(a, b)];
            r[(k + a, k + b)] = r1[(a, b)];
            let cross = rho * (r0[(a, b)] + r1[(a, b)]) / 2.0;
            r[(a, k + b)] = cross;
            r[(k + b, a)] = cross;
        }
    }
    r
}

impl CorrelationMatrix {
    /// Starting point: identity, or identity blocks with `ρ = 0.5` when
    /// constrained.
    pub fn initial(k: usize, mode: PriorMode) -> Self {
        match mode {
            PriorMode::Uniform => Self {
                r: DMatrix::identity(2 * k, 2 * k),
                mode,
                rho: None,
            },
            PriorMode::RhoConstrained => {
                let i = DMatrix::identity(k, k);
                build_constrained_r(&i, &i, 0.5).expect("identity blocks are compatible with rho = 0.5")
            }
        }
    }

    pub fn from_matrix(r: DMatrix<f64>, mode: PriorMode) -> Result<Self> {
        check_correlation(&r)?;
        if r.nrows() % 2 != 0 {
            return Err(invalid("R", "dimension must be even"));
        }
        match mode {
            PriorMode::Uniform => Ok(Self { r, mode, rho: None }),
            PriorMode::RhoConstrained => {
                let k = r.nrows() / 2;
                let rho = r[(0, k)];
                let out = build_constrained_r(&r.view((0, 0), (k, k)).into_owned(), &r.view((k, k), (k, k)).into_owned(), rho)?;
                if out.r != r {
                    return Err(invalid("R", "cross-arm block does not follow the constrained form"));
                }
                Ok(out)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn k(&self) -> usize {
        self.r.nrows() / 2
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn mode(&self) -> PriorMode {
        self.mode
    }

    pub fn rho(&self) -> Option<f64> {
        self.rho
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.r[(i, j)]
    }

    pub fn within_block(&self, z: u8) -> DMatrix<f64> {
        let k = self.k();
        let o = z as usize * k;
        self.r.view((o, o), (k, k)).into_owned()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.r.clone().cholesky().expect("correlation matrix is PD").inverse()
    }

    /// Rebuilds the constrained form from the stored blocks and `ρ`.
    pub fn rebuild(&self) -> Result<Self> {
        match self.rho {
            Some(rho) => build_constrained_r(&self.within_block(0), &self.within_block(1), rho),
            None => Ok(self.clone()),
        }
    }

    /// One Metropolis sweep given the latent-score scatter `W = Σ HᵢHᵢᵀ`
    /// over `n` units.
    pub fn update<R: Rng + ?Sized>(&mut self, scatter: &DMatrix<f64>, n: usize, rng: &mut R, acc: &mut Acceptance) {
        let d = self.dim();
        let mut cur = loglik_from_scatter(n, scatter, &self.r).expect("current R is PD");
        match self.mode {
            PriorMode::Uniform => {
                for i in 0..d {
                    for j in i + 1..d {
                        let iv = pd_interval(&self.r, i, j).expect("current R is PD");
                        let prop = uniform(rng, iv.lo, iv.hi);
                        let mut cand = self.r.clone();
                        cand[(i, j)] = prop;
                        cand[(j, i)] = prop;
                        let ok = match loglik_from_scatter(n, scatter, &cand) {
                            Ok(_) if min_eigenvalue(&cand) <= 1e-10 => false,
                            Ok(l) => {
                                let ok = accept(rng, l - cur);
                                if ok {
                                    cur = l;
                                    self.r = cand;
                                }
                                ok
                            }
                            Err(_) => false,
                        };
                        acc.record(ok);
                    }
                }
            }
            PriorMode::RhoConstrained => {
                let k = self.k();
                let rho = self.rho.expect("constrained matrix stores rho");
                for z in 0..2u8 {
                    for a in 0..k {
                        for b in a + 1..k {
                            let block = self.within_block(z);
                            let iv = pd_interval(&block, a, b).expect("within-arm block is PD");
                            let lo = iv.lo.max(0.0);
                            let prop = uniform(rng, lo, iv.hi);
                            let mut nb = block;
                            nb[(a, b)] = prop;
                            nb[(b, a)] = prop;
                            let (r0, r1) = if z == 0 {
                                (nb, self.within_block(1))
                            } else {
                                (self.within_block(0), nb)
                            };
                            let ok = self.try_constrained(&r0, &r1, rho, scatter, n, &mut cur, rng);
                            acc.record(ok);
                        }
                    }
                }
                let prop = uniform(rng, 0.0, 1.0);
                let (r0, r1) = (self.within_block(0), self.within_block(1));
                let ok = self.try_constrained(&r0, &r1, prop, scatter, n, &mut cur, rng);
                acc.record(ok);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn try_constrained<R: Rng + ?Sized>(
        &mut self,
        r0: &DMatrix<f64>,
        r1: &DMatrix<f64>,
        rho: f64,
        scatter: &DMatrix<f64>,
        n: usize,
        cur: &mut f64,
        rng: &mut R,
    ) -> bool {
        let cand = assemble(r0, r1, rho);
        let Ok(l) = loglik_from_scatter(n, scatter, &cand) else {
            return false;
        };
        if min_eigenvalue(&cand) <= 1e-10 {
            return false;
        }
        if accept(rng, l - *cur) {
            *cur = l;
            self.r = cand;
            self.rho = Some(rho);
            true
        } else {
            false
        }
    }
}

fn accept<R: Rng + ?Sized>(rng: &mut R, log_ratio: f64) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    if !(log_ratio > f64::NEG_INFINITY) {
        return false;
    }
    uniform(rng, 0.0, 1.0).ln() < log_ratio
}

/// `Σ HᵢHᵢᵀ` from per-coordinate score columns.
pub fn scatter(h_cols: &[Vec<f64>]) -> DMatrix<f64> {
    let d = h_cols.len();
    let mut w = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let s: f64 = h_cols[a].iter().zip(&h_cols[b]).map(|(x, y)| x * y).sum();
            w[(a, b)] = s;
            w[(b, a)] = s;
        }
    }
    w
}

/// Copula log-likelihood from the scatter matrix:
/// `−n/2 ln|R| + ½ tr(W) − ½ tr(R⁻¹W)`.
pub fn loglik_from_scatter(n: usize, w: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<f64> {
    let chol = r.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        min_eigenvalue: min_eigenvalue(r),
    })?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let inv = chol.inverse();
    let tr_w = w.trace();
    let tr_rw = inv.component_mul(w).sum();
    Ok(-0.5 * n as f64 * log_det + 0.5 * tr_w - 0.5 * tr_rw)
}

/// Copula log-likelihood of per-unit score rows.
pub fn copula_loglik(h: &[Vec<f64>], r: &DMatrix<f64>) -> Result<f64> {
    let d = r.nrows();
    let mut w = DMatrix::zeros(d, d);
    for row in h {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: row.len(),
            });
        }
        for a in 0..d {
            for b in 0..d {
                w[(a, b)] += row[a] * row[b];
            }
        }
    }
    loglik_from_scatter(h.len(), &w, r)
}

fn det(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant()
}

/// Range of entry `(i, j)` keeping `r` PD with everything else fixed.
/// The determinant is quadratic in the entry; its roots bracket the
/// current value.
pub fn pd_interval(r: &DMatrix<f64>, i: usize, j: usize) -> Result<PdInterval> {
    if i == j || i >= r.nrows() || j >= r.nrows() {
        return Err(invalid("entry", format!("({i},{j}) is not an off-diagonal entry")));
    }
    let at = |v: f64| {
        let mut m = r.clone();
        m[(i, j)] = v;
        m[(j, i)] = v;
        det(&m)
    };
    let (fm, f0, fp) = (at(-1.0), at(0.0), at(1.0));
    let a = 0.5 * (fp + fm) - f0;
    let b = 0.5 * (fp - fm);
    let c = f0;
    let current = r[(i, j)];
    let value = a * current * current + b * current + c;
    if !(value > 0.0) {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: min_eigenvalue(r),
        });
    }
    let scale = fm.abs().max(f0.abs()).max(fp.abs());
    let (lo, hi) = if a.abs() <= 1e-14 * scale {
        // linear in the entry
        if b.abs() <= 1e-14 * scale {
            (-1.0, 1.0)
        } else {
            let root = -c / b;
            if b > 0.0 {
                (root, 1.0)
            } else {
                (-1.0, root)
            }
        }
    } else {
        let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
        let q = -0.5 * (b + b.signum() * disc);
        let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
        (r1.min(r2), r1.max(r2))
    };
    Ok(PdInterval {
        lo: lo.max(-1.0),
        hi: hi.min(1.0),
    })
}
