//! Anisotropic Matérn-3/2 correlation with a nugget term, and correlation-matrix assembly.
//!
//! The correlation between two normalized inputs is
//! `(1 + √6·r)·exp(−√6·r) + α·1{x = y}` where `r` is the length-scale-weighted
//! Euclidean distance. The nugget indicator fires only for bitwise-equal rows.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lower bound for correlation lengths in normalized units.
pub const ELL_MIN: f64 = 1e-3;
/// Default upper bound for correlation lengths in normalized units.
pub const ELL_MAX: f64 = 100.0;
/// Diagonal jitter used when the nugget is numerically zero.
pub const JITTER: f64 = 1e-10;
/// Below this nugget the jitter is applied.
pub const JITTER_ALPHA_THRESHOLD: f64 = 1e-8;

/// Smallest admissible squared Cholesky pivot relative to the largest diagonal entry.
pub const PIVOT_TOL: f64 = 1e-13;

const SQRT_6: f64 = 2.449_489_742_783_178;

/// Per-dimension correlation lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LengthScales(Vec<f64>);

impl LengthScales {
    pub fn new(ell: Vec<f64>) -> Result<Self> {
        if ell.is_empty() {
            return Err(Error::Domain("length scales must be non-empty".into()));
        }
        if let Some(bad) = ell.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::Domain(format!(
                "length scale must be positive and finite, got {bad}"
            )));
        }
        Ok(Self(ell))
    }

    /// Same scale in every dimension.
    pub fn uniform(d: usize, ell: f64) -> Result<Self> {
        Self::new(vec![ell; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// True when every component lies in `[lo, hi]`.
    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.0.iter().all(|&l| (lo..=hi).contains(&l))
    }

    fn inv_sq(&self) -> Vec<f64> {
        self.0.iter().map(|l| 1.0 / (l * l)).collect()
    }
}

impl TryFrom<Vec<f64>> for LengthScales {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LengthScales> for Vec<f64> {
    fn from(l: LengthScales) -> Self {
        l.0
    }
}

/// Covariance hyperparameters `σ²·[C_ℓ(h) + α·1{h = 0}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub sigma2: f64,
    pub ell: LengthScales,
    pub alpha: f64,
}

impl CovarianceParams {
    pub fn new(sigma2: f64, ell: LengthScales, alpha: f64) -> Result<Self> {
        // sigma2 = 0 is the forced limit for constant outputs.
        if !(sigma2.is_finite() && sigma2 >= 0.0) {
            return Err(Error::Domain(format!("sigma2 must be >= 0, got {sigma2}")));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Domain(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(Self { sigma2, ell, alpha })
    }

    /// Nugget variance `δ² = σ²·α`.
    pub fn nugget(&self) -> f64 {
        self.sigma2 * self.alpha
    }

    /// Nugget standard deviation `δ`.
    pub fn nugget_sd(&self) -> f64 {
        self.nugget().sqrt()
    }
}

/// Symmetric correlation matrix `R_{ℓ,α}` with the jitter to add before factorizing.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub entries: DMatrix<f64>,
    pub jitter: f64,
}

impl CorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Entries with the jitter added to the diagonal.
    pub fn jittered(&self) -> DMatrix<f64> {
        let mut m = self.entries.clone();
        if self.jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += self.jitter;
            }
        }
        m
    }

    /// Cholesky factor of the jittered matrix.
    ///
    /// Pivots below `PIVOT_TOL` relative to the diagonal are rejected, so exactly
    /// singular matrices (e.g. duplicated rows with a positive nugget) fail here
    /// instead of producing a factor full of rounding noise.
    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        let m = self.jittered();
        let max_diag = m.diagonal().max();
        let fail = || Error::Conditioning {
            params: format!("n={}, jitter={:e}", self.dim(), self.jitter),
            reason: "matrix is not numerically positive definite".into(),
        };
        let chol = Cholesky::new(m).ok_or_else(fail)?;
        let tol = PIVOT_TOL * max_diag;
        if chol.l_dirty().diagonal().iter().any(|l| !(l * l > tol)) {
            return Err(fail());
        }
        Ok(chol)
    }
}

/// Jitter policy for a given nugget.
pub fn jitter_for(alpha: f64) -> f64 {
    if alpha < JITTER_ALPHA_THRESHOLD {
        JITTER
    } else {
        0.0
    }
}

/// Matérn-3/2 correlation as a function of the scaled distance `|h|_ℓ`.
#[inline]
pub fn matern32_radial(r: f64) -> f64 {
    let s = SQRT_6 * r;
    (1.0 + s) * (-s).exp()
}

/// Matérn-3/2 correlation at lag `h`.
pub fn matern32(h: &[f64], ell: &LengthScales) -> Result<f64> {
    if h.len() != ell.dim() {
        return Err(Error::Input(format!(
            "lag has dimension {} but length scales have {}",
            h.len(),
            ell.dim()
        )));
    }
    let r2: f64 = h
        .iter()
        .zip(ell.as_slice())
        .map(|(hi, li)| (hi / li) * (hi / li))
        .sum();
    Ok(matern32_radial(r2.sqrt()))
}

fn check_design(x: &DMatrix<f64>, ell: &LengthScales, alpha: f64) -> Result<()> {
    if x.ncols() != ell.dim() {
        return Err(Error::Input(format!(
            "design has {} columns but length scales have {}",
            x.ncols(),
            ell.dim()
        )));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("design contains NaN".into()));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Domain(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(())
}

/// Squared coordinate differences for every pair of design rows, cached so that
/// correlation matrices for many length scales can be assembled cheaply.
#[derive(Debug, Clone)]
pub struct LagTable {
    n: usize,
    d: usize,
    // Row-major over pairs (i < j), d entries each.
    sq: Vec<f64>,
    equal: Vec<bool>,
}

impl LagTable {
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Input("design contains NaN".into()));
        }
        let (n, d) = x.shape();
        let pairs = n * n.saturating_sub(1) / 2;
        let mut sq = Vec::with_capacity(pairs * d);
        let mut equal = Vec::with_capacity(pairs);
        for i in 0..n {
            for j in (i + 1)..n {
                let mut same = true;
                for k in 0..d {
                    let h = x[(i, k)] - x[(j, k)];
                    same &= x[(i, k)] == x[(j, k)];
                    sq.push(h * h);
                }
                equal.push(same);
            }
        }
        Ok(Self { n, d, sq, equal })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `R_{ℓ,α}` for this design.
    pub fn correlation(&self, ell: &LengthScales, alpha: f64) -> Result<CorrelationMatrix> {
        if ell.dim() != self.d {
            return Err(Error::Input(format!(
                "design has {} columns but length scales have {}",
                self.d,
                ell.dim()
            )));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Domain(format!("alpha must be >= 0, got {alpha}")));
        }
        let inv = ell.inv_sq();
        let n = self.n;
        let mut m = DMatrix::<f64>::zeros(n, n);
        let mut p = 0;
        for i in 0..n {
            m[(i, i)] = 1.0 + alpha;
            for j in (i + 1)..n {
                let row = &self.sq[p * self.d..(p + 1) * self.d];
                let r2: f64 = row.iter().zip(&inv).map(|(a, b)| a * b).sum();
                let mut c = matern32_radial(r2.sqrt());
                if self.equal[p] {
                    c += alpha;
                }
                m[(i, j)] = c;
                m[(j, i)] = c;
                p += 1;
            }
        }
        Ok(CorrelationMatrix {
            entries: m,
            jitter: jitter_for(alpha),
        })
    }
}

/// `R_{ℓ,α}` with entries `C_ℓ(x_i − x_j) + α·1{x_i = x_j}`.
pub fn assemble_correlation(
    x: &DMatrix<f64>,
    ell: &LengthScales,
    alpha: f64,
) -> Result<CorrelationMatrix> {
    check_design(x, ell, alpha)?;
    LagTable::new(x)?.correlation(ell, alpha)
}

/// Cross-correlation vector `r(x)_i = C_ℓ(x − x_i) + α·1{x = x_i}`.
pub fn cross_correlation(
    x: &DMatrix<f64>,
    point: &[f64],
    ell: &LengthScales,
    alpha: f64,
) -> Result<DVector<f64>> {
    check_design(x, ell, alpha)?;
    if point.len() != x.ncols() {
        return Err(Error::Input(format!(
            "point has dimension {} but design has {} columns",
            point.len(),
            x.ncols()
        )));
    }
    if point.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("point contains NaN".into()));
    }
    Ok(cross_correlation_unchecked(x, point, &ell.inv_sq(), alpha))
}

pub(crate) fn cross_correlation_unchecked(
    x: &DMatrix<f64>,
    point: &[f64],
    inv_sq: &[f64],
    alpha: f64,
) -> DVector<f64> {
    let n = x.nrows();
    DVector::from_fn(n, |i, _| {
        let mut r2 = 0.0;
        let mut same = true;
        for (k, (&p, &w)) in point.iter().zip(inv_sq).enumerate() {
            let xi = x[(i, k)];
            let h = p - xi;
            same &= p == xi;
            r2 += h * h * w;
        }
        let c = matern32_radial(r2.sqrt());
        if same {
            c + alpha
        } else {
            c
        }
    })
}

pub(crate) fn inv_sq(ell: &LengthScales) -> Vec<f64> {
    ell.inv_sq()
}
