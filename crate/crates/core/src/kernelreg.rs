//! Kernel ridge regression in the Sobolev space of order `m` on `[0,1]^d`.
//!
//! The reproducing kernel is a tensor product of
//! `k̄(x, y) = Σ_{l=0}^m B_l(x)·B_l(y)/(l!)² + (−1)^{m+1}/(2m)!·B_{2m}(|x − y|)`
//! with `B_l` the Bernoulli polynomials. The fitted function is
//! `f̂(x) = r(x)ᵀ(K + nλI)⁻¹y`, where `λ` is chosen by generalized cross-validation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported smoothness order; Bernoulli polynomials are tabulated to degree 8.
pub const MAX_ORDER: u32 = 4;

const DOMAIN_TOL: f64 = 1e-9;

/// Bernoulli polynomial `B_l(x)` for `l ≤ 8`.
pub fn bernoulli_poly(l: u32, x: f64) -> Result<f64> {
    let x2 = x * x;
    let v = match l {
        0 => 1.0,
        1 => x - 0.5,
        2 => x2 - x + 1.0 / 6.0,
        3 => x * (x2 - 1.5 * x + 0.5),
        4 => x2 * (x2 - 2.0 * x + 1.0) - 1.0 / 30.0,
        5 => x * (x2 * (x2 - 2.5 * x + 5.0 / 3.0) - 1.0 / 6.0),
        6 => x2 * (x2 * (x2 - 3.0 * x + 2.5) - 0.5) + 1.0 / 42.0,
        7 => x * (x2 * (x2 * (x2 - 3.5 * x + 3.5) - 7.0 / 6.0) + 1.0 / 6.0),
        8 => x2 * (x2 * (x2 * (x2 - 4.0 * x + 14.0 / 3.0) - 7.0 / 3.0) + 2.0 / 3.0) - 1.0 / 30.0,
        _ => {
            return Err(Error::Domain(format!(
                "Bernoulli polynomial degree {l} not supported (max {})",
                2 * MAX_ORDER
            )))
        }
    };
    Ok(v)
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// Sobolev kernel of smoothness order `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BernoulliKernel {
    pub m: u32,
}

impl Default for BernoulliKernel {
    fn default() -> Self {
        Self { m: 2 }
    }
}

impl BernoulliKernel {
    pub fn new(m: u32) -> Result<Self> {
        if m == 0 || m > MAX_ORDER {
            return Err(Error::Domain(format!("kernel order must be in 1..={MAX_ORDER}, got {m}")));
        }
        Ok(Self { m })
    }

    /// One-dimensional kernel `k̄(x, y)`; both arguments must lie in `[0,1]`.
    pub fn eval_1d(&self, x: f64, y: f64) -> Result<f64> {
        let x = to_unit(x)?;
        let y = to_unit(y)?;
        Ok(self.eval_1d_unchecked(x, y))
    }

    fn eval_1d_unchecked(&self, x: f64, y: f64) -> f64 {
        let m = self.m;
        let mut s = 0.0;
        for l in 0..=m {
            let f = factorial(l);
            s += bernoulli_poly(l, x).unwrap() * bernoulli_poly(l, y).unwrap() / (f * f);
        }
        let sign = if (m + 1).is_multiple_of(2) { 1.0 } else { -1.0 };
        s + sign / factorial(2 * m) * bernoulli_poly(2 * m, (x - y).abs()).unwrap()
    }

    /// Tensor-product kernel `Π_i k̄(x_i, y_i)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::Input(format!(
                "kernel arguments have dimensions {} and {}",
                x.len(),
                y.len()
            )));
        }
        x.iter()
            .zip(y)
            .map(|(a, b)| self.eval_1d(*a, *b))
            .product()
    }

    /// Gram matrix of the rows of `x`.
    pub fn gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let xs = unit_rows(x)?;
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = xs[i]
                    .iter()
                    .zip(&xs[j])
                    .map(|(a, b)| self.eval_1d_unchecked(*a, *b))
                    .product();
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }
}

/// `1d` convenience wrapper over [`BernoulliKernel::eval_1d`].
pub fn kernel_1d(x: f64, y: f64, m: u32) -> Result<f64> {
    BernoulliKernel::new(m)?.eval_1d(x, y)
}

/// `d`-dimensional convenience wrapper over [`BernoulliKernel::eval`].
pub fn kernel_product(x: &[f64], y: &[f64], m: u32) -> Result<f64> {
    BernoulliKernel::new(m)?.eval(x, y)
}

fn to_unit(v: f64) -> Result<f64> {
    if !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&v) {
        return Err(Error::Input(format!(
            "kernel input {v} outside [0,1]; normalize inputs first"
        )));
    }
    Ok(v.clamp(0.0, 1.0))
}

fn unit_rows(x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().map(|v| to_unit(*v)).collect())
        .collect()
}

/// Which generalized cross-validation criterion to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcvForm {
    /// `‖R_λ⁻¹y‖ / Tr(R_λ⁻¹)`.
    #[default]
    NormOverTrace,
    /// `n·‖R_λ⁻¹y‖² / Tr(R_λ⁻¹)²`, the textbook form; a monotone transform of `NormOverTrace`.
    Classical,
}

/// Eigendecomposition of a Gram matrix, reused across regularization values.
#[derive(Debug, Clone)]
pub struct GramSpectrum {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    /// `Qᵀy`.
    projected: DVector<f64>,
}

impl GramSpectrum {
    pub fn new(gram: DMatrix<f64>, y: &DVector<f64>) -> Self {
        let SymmetricEigen { eigenvalues, eigenvectors } = gram.symmetric_eigen();
        let projected = eigenvectors.transpose() * y;
        Self { eigenvalues, eigenvectors, projected }
    }

    fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// GCV criterion at ridge term `ridge = n·λ`; `+∞` if `K + ridge·I` is not positive definite.
    pub fn criterion(&self, ridge: f64, form: GcvForm) -> f64 {
        let mut norm2 = 0.0;
        let mut trace = 0.0;
        for (l, p) in self.eigenvalues.iter().zip(self.projected.iter()) {
            let e = l + ridge;
            if !(e > 0.0) {
                return f64::INFINITY;
            }
            norm2 += p * p / (e * e);
            trace += 1.0 / e;
        }
        match form {
            GcvForm::NormOverTrace => norm2.sqrt() / trace,
            GcvForm::Classical => self.n() as f64 * norm2 / (trace * trace),
        }
    }

    /// `(K + ridge·I)⁻¹y` and the diagonal of `(K + ridge·I)⁻¹`.
    fn solve(&self, ridge: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let lmax = self.eigenvalues.amax();
        let shifted = self.eigenvalues.map(|l| l + ridge);
        if shifted.iter().any(|e| !(*e > 1e-13 * lmax.max(ridge))) {
            return Err(Error::Conditioning {
                params: format!("ridge={ridge:e}"),
                reason: "kernel system is singular; use a positive regularization".into(),
            });
        }
        let inv = shifted.map(|e| 1.0 / e);
        let weights = &self.eigenvectors * self.projected.component_mul(&inv);
        let q2 = self.eigenvectors.map(|q| q * q);
        let diag = q2 * inv;
        Ok((weights, diag))
    }
}

/// Default GCV grid: 100 log-spaced values in `[10⁻¹⁰, 10]`.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-10, 10.0, 100)
}

pub(crate) fn log_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..k)
        .map(|i| match i {
            0 => lo,
            i if i == k - 1 => hi,
            _ => (a + (b - a) * i as f64 / (k - 1) as f64).exp(),
        })
        .collect()
}

/// Result of a GCV scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GcvSelection {
    pub lambda: f64,
    pub criterion: f64,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| *v < values[b]) {
            best = Some(i);
        }
    }
    best
}

fn select_on_spectrum(spec: &GramSpectrum, grid: &[f64], form: GcvForm) -> Result<GcvSelection> {
    if grid.is_empty() {
        return Err(Error::Domain("empty regularization grid".into()));
    }
    if grid.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Domain("regularization grid must be positive".into()));
    }
    let n = spec.n() as f64;
    let values: Vec<f64> = grid.iter().map(|l| spec.criterion(n * l, form)).collect();
    let i = argmin_first(&values)
        .ok_or_else(|| Error::Conditioning {
            params: "every grid value".into(),
            reason: "kernel system is not positive definite".into(),
        })?;
    Ok(GcvSelection {
        lambda: grid[i],
        criterion: values[i],
        grid: grid.to_vec(),
        values,
    })
}

/// GCV choice of `λ` over `grid`; ties go to the smallest `λ`.
pub fn gcv_select(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    kernel: BernoulliKernel,
    grid: &[f64],
    form: GcvForm,
) -> Result<GcvSelection> {
    check_xy(x, y)?;
    let spec = GramSpectrum::new(kernel.gram(x)?, y);
    select_on_spectrum(&spec, grid, form)
}

/// Settings for [`fit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub m: u32,
    /// Fixed regularization; `None` selects it by GCV.
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub gcv_form: GcvForm,
    /// Subtract the learning-base mean before fitting.
    pub center_output: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            m: 2,
            lambda: None,
            lambda_grid: default_lambda_grid(),
            gcv_form: GcvForm::NormOverTrace,
            center_output: true,
        }
    }
}

/// A fitted kernel ridge predictor.
#[derive(Debug, Clone)]
pub struct KernelModel {
    x: DMatrix<f64>,
    y: DVector<f64>,
    offset: f64,
    lambda: f64,
    ridge: f64,
    kernel: BernoulliKernel,
    weights: DVector<f64>,
    inv_diag: DVector<f64>,
    /// GCV criterion value at the selected `λ`, when GCV was run.
    pub gcv: Option<f64>,
}

fn check_xy(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Input(format!(
            "design has {} rows but {} outputs",
            x.nrows(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Input("empty learning base".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite output".into()));
    }
    Ok(())
}

impl KernelModel {
    /// Solve `(K + ridge·I)w = y − offset` directly, without any selection.
    ///
    /// `ridge` is the full diagonal term `n·λ`; keeping it fixed while dropping
    /// points is what makes the closed-form leave-one-out residuals exact.
    pub fn with_ridge(
        x: DMatrix<f64>,
        y: DVector<f64>,
        kernel: BernoulliKernel,
        ridge: f64,
        offset: f64,
    ) -> Result<Self> {
        check_xy(&x, &y)?;
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::Domain(format!("ridge must be >= 0, got {ridge}")));
        }
        let yc = y.map(|v| v - offset);
        let spec = GramSpectrum::new(kernel.gram(&x)?, &yc);
        Self::from_spectrum(x, y, kernel, ridge, offset, &spec)
    }

    fn from_spectrum(
        x: DMatrix<f64>,
        y: DVector<f64>,
        kernel: BernoulliKernel,
        ridge: f64,
        offset: f64,
        spec: &GramSpectrum,
    ) -> Result<Self> {
        let (weights, inv_diag) = spec.solve(ridge)?;
        let lambda = ridge / y.len() as f64;
        Ok(Self { x, y, offset, lambda, ridge, kernel, weights, inv_diag, gcv: None })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Record the `λ` that produced the ridge, when the ridge was given directly.
    pub fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
    }

    /// Diagonal ridge term `n·λ`.
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn kernel(&self) -> BernoulliKernel {
        self.kernel
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn outputs(&self) -> &DVector<f64> {
        &self.y
    }

    /// `offset + r(x)ᵀw` with `r(x)_i = k(x_i, x)`.
    pub fn predict(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.x.ncols() {
            return Err(Error::Input(format!(
                "point has dimension {} but model expects {}",
                point.len(),
                self.x.ncols()
            )));
        }
        let p: Vec<f64> = point.iter().map(|v| to_unit(*v)).collect::<Result<_>>()?;
        let mut s = 0.0;
        for i in 0..self.x.nrows() {
            let mut k = 1.0;
            for (j, pj) in p.iter().enumerate() {
                k *= self.kernel.eval_1d_unchecked(self.x[(i, j)].clamp(0.0, 1.0), *pj);
            }
            s += k * self.weights[i];
        }
        Ok(self.offset + s)
    }

    pub fn predict_many(&self, points: &DMatrix<f64>) -> Result<Vec<f64>> {
        (0..points.nrows())
            .map(|i| {
                let row: Vec<f64> = points.row(i).iter().copied().collect();
                self.predict(&row)
            })
            .collect()
    }

    /// Virtual leave-one-out residuals `(R_λ⁻¹y)_i / (R_λ⁻¹)_{ii}`.
    pub fn loo_errors(&self) -> DVector<f64> {
        self.weights.component_div(&self.inv_diag)
    }
}

/// Fit with the configured or GCV-selected regularization.
pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, config: &KernelConfig) -> Result<KernelModel> {
    check_xy(x, y)?;
    let kernel = BernoulliKernel::new(config.m)?;
    let offset = if config.center_output { y.mean() } else { 0.0 };
    let yc = y.map(|v| v - offset);
    let spec = GramSpectrum::new(kernel.gram(x)?, &yc);
    let n = y.len() as f64;
    let (lambda, gcv) = match config.lambda {
        Some(l) => {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Domain(format!("lambda must be >= 0, got {l}")));
            }
            (l, None)
        }
        None => {
            let sel = select_on_spectrum(&spec, &config.lambda_grid, config.gcv_form)?;
            (sel.lambda, Some(sel.criterion))
        }
    };
    let mut model = KernelModel::from_spectrum(x.clone(), y.clone(), kernel, n * lambda, offset, &spec)?;
    model.lambda = lambda;
    model.gcv = gcv;
    Ok(model)
}

/// GCV criterion at the selected `λ` for each smoothness order, for choosing `m`.
pub fn order_scan(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    orders: &[u32],
    config: &KernelConfig,
) -> Result<Vec<(u32, GcvSelection)>> {
    let offset = if config.center_output { y.mean() } else { 0.0 };
    let yc = y.map(|v| v - offset);
    orders
        .iter()
        .map(|&m| {
            let sel = gcv_select(x, &yc, BernoulliKernel::new(m)?, &config.lambda_grid, config.gcv_form)?;
            Ok((m, sel))
        })
        .collect()
}
