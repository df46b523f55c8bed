//! Gaussian-process regression (Kriging) with a nugget effect.
//!
//! Hyperparameters are estimated by maximum likelihood in two steps:
//!
//! 1. a derivative-free search over `(ℓ, α)` on a random subsample of the
//!    learning base, giving `ℓ̂` and a provisional nugget `α̃`;
//! 2. one eigendecomposition `R_{ℓ̂,α̃} = U·S·Uᵀ` on the full base, after which the
//!    profiled objective for any other nugget is
//!    `L_α = log((1/n)·Σ v_i²/(s_i + α − α̃)) + (1/n)·Σ log(s_i + α − α̃)`
//!    with `v = Uᵀy`. `α̂` is its minimizer over a log grid refined by golden section.
//!
//! `σ̂² = (1/n)·yᵀR⁻¹y` then has a closed form. Leave-one-out residuals and
//! variances come from the diagonal of `R⁻¹` without refitting.

use std::sync::OnceLock;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariance::{
    self, jitter_for, CovarianceParams, LagTable, LengthScales, ELL_MAX, ELL_MIN,
};
use crate::error::{Error, Result};
use crate::optim::{self, NelderMeadOptions};

const TIE_TOL: f64 = 1e-10;

/// Settings for [`fit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KrigingConfig {
    /// Size of the random subsample used in the first estimation step.
    pub subsample_size: usize,
    /// Number of optimizer starts in the first step.
    pub restarts: usize,
    /// Objective evaluations allowed per start.
    pub max_evals: usize,
    pub seed: u64,
    pub ell_min: f64,
    pub ell_max: f64,
    pub alpha_max: f64,
    /// Offset in the `log(α + ε)` search coordinate.
    pub alpha_eps: f64,
    /// Number of log-spaced nugget candidates in the profiling step.
    pub profile_grid: usize,
    /// Profiled nuggets below this value are set to zero.
    pub nugget_snap: f64,
    /// Subtract the learning-base mean before fitting the zero-mean process.
    pub center_output: bool,
}

impl Default for KrigingConfig {
    fn default() -> Self {
        Self {
            subsample_size: 1000,
            restarts: 5,
            max_evals: 1500,
            seed: 0,
            ell_min: ELL_MIN,
            ell_max: ELL_MAX,
            alpha_max: 10.0,
            alpha_eps: 1e-6,
            profile_grid: 200,
            nugget_snap: 1e-6,
            center_output: true,
        }
    }
}

/// Output of the subsample optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step1 {
    pub ell: LengthScales,
    pub alpha_tilde: f64,
    pub objective: f64,
    pub evals: usize,
    /// Set when no start converged or the data are degenerate.
    pub flagged: bool,
    pub subsample_size: usize,
}

/// Eigen-structure of `R_{ℓ̂,α̃}` used to profile the nugget.
#[derive(Debug, Clone)]
pub struct LikelihoodProfile {
    /// Eigenvalues, descending.
    pub s: DVector<f64>,
    /// `Uᵀy` in the same order.
    pub v: DVector<f64>,
    pub alpha_tilde: f64,
}

impl LikelihoodProfile {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, ell: &LengthScales, alpha_tilde: f64) -> Result<Self> {
        check_xy(x, y)?;
        let r = covariance::assemble_correlation(x, ell, alpha_tilde)?;
        let eig = r.entries.symmetric_eigen();
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let uty = eig.eigenvectors.transpose() * y;
        let s = DVector::from_iterator(y.len(), order.iter().map(|&i| eig.eigenvalues[i]));
        let v = DVector::from_iterator(y.len(), order.iter().map(|&i| uty[i]));
        Ok(Self { s, v, alpha_tilde })
    }

    /// Smallest admissible nugget, `α̃ − s_n`, exclusive.
    pub fn lower_limit(&self) -> f64 {
        self.alpha_tilde - self.s[self.s.len() - 1]
    }

    /// Profiled objective `L_α`. `None` when some `s_i + α − α̃ ≤ 0`.
    ///
    /// The diagonal jitter policy of the dense objective is mirrored so both agree.
    pub fn objective(&self, alpha: f64) -> Option<f64> {
        let shift = alpha + jitter_for(alpha) - self.alpha_tilde;
        let n = self.s.len() as f64;
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for (s, v) in self.s.iter().zip(self.v.iter()) {
            let e = s + shift;
            if !(e > 0.0) {
                return None;
            }
            quad += v * v / e;
            logdet += e.ln();
        }
        Some((quad / n).ln() + logdet / n)
    }
}

/// Mean and variance of the predictive distribution at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    /// Some coordinate lies outside `[−0.1, 1.1]`.
    pub extrapolated: bool,
}

impl Prediction {
    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Record of how a model was estimated.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitInfo {
    pub alpha_tilde: f64,
    pub step1_objective: f64,
    pub step1_evals: usize,
    pub flagged: bool,
    pub subsample_size: usize,
}

/// A fitted Kriging predictor. Immutable once built.
#[derive(Debug, Clone)]
pub struct KrigingModel {
    x: DMatrix<f64>,
    y: DVector<f64>,
    offset: f64,
    params: CovarianceParams,
    inv_sq: Vec<f64>,
    factor: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
    inv_diag: OnceLock<DVector<f64>>,
    pub info: FitInfo,
}

fn check_xy(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Input(format!(
            "design has {} rows but {} outputs",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Input("empty learning base".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value in learning base".into()));
    }
    Ok(())
}

fn nll_from_factor(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let z = chol.l_dirty().solve_lower_triangular(y).expect("non-singular factor");
    let quad = z.norm_squared();
    let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    (quad / n).ln() + logdet / n
}

/// Negative profile log-likelihood `log((1/n)·yᵀR⁻¹y) + (1/n)·log|R|`.
pub fn neg_log_likelihood(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    ell: &LengthScales,
    alpha: f64,
) -> Result<f64> {
    check_xy(x, y)?;
    let r = covariance::assemble_correlation(x, ell, alpha)?;
    let chol = r.cholesky().map_err(|_| Error::Conditioning {
        params: format!("ell={:?}, alpha={alpha:e}", ell.as_slice()),
        reason: "Cholesky factorization failed".into(),
    })?;
    Ok(nll_from_factor(&chol, y))
}

fn lags_nll(lags: &LagTable, y: &DVector<f64>, ell: &LengthScales, alpha: f64) -> Option<f64> {
    let r = lags.correlation(ell, alpha).ok()?;
    let chol = r.cholesky().ok()?;
    let v = nll_from_factor(&chol, y);
    v.is_finite().then_some(v)
}

fn centered(y: &DVector<f64>, center: bool) -> (DVector<f64>, f64) {
    let offset = if center { y.mean() } else { 0.0 };
    (y.map(|v| v - offset), offset)
}

/// First estimation step on a random subsample.
///
/// `y` is used as given; centering is the caller's business.
pub fn fit_step1(x: &DMatrix<f64>, y: &DVector<f64>, config: &KrigingConfig) -> Result<Step1> {
    check_xy(x, y)?;
    let (n, d) = x.shape();
    if config.restarts == 0 {
        return Err(Error::Domain("restarts must be at least 1".into()));
    }
    if !(config.ell_min > 0.0 && config.ell_min < config.ell_max) {
        return Err(Error::Domain("invalid length-scale bounds".into()));
    }
    let m = config.subsample_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let idx: Vec<usize> = if m < n {
        let mut v = sample(&mut rng, n, m).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).collect()
    };
    let xs = x.select_rows(idx.iter());
    let ys = DVector::from_iterator(m, idx.iter().map(|&i| y[i]));

    let default_ell = LengthScales::uniform(d, 0.5_f64.clamp(config.ell_min, config.ell_max))?;
    if ys.iter().all(|v| *v == 0.0) {
        warn!("all outputs are zero; covariance estimation is degenerate");
        return Ok(Step1 {
            ell: default_ell,
            alpha_tilde: 0.0,
            objective: f64::NEG_INFINITY,
            evals: 0,
            flagged: true,
            subsample_size: m,
        });
    }

    let lags = LagTable::new(&xs)?;
    let eps = config.alpha_eps;
    let mut lo = vec![config.ell_min.ln(); d];
    let mut hi = vec![config.ell_max.ln(); d];
    lo.push(eps.ln());
    hi.push((config.alpha_max + eps).ln());
    let decode = |t: &[f64]| -> (LengthScales, f64) {
        let ell = LengthScales::new(t[..d].iter().map(|v| v.exp()).collect())
            .expect("exp of finite is positive");
        let alpha = (t[d].exp() - eps).max(0.0);
        (ell, alpha)
    };
    let objective = |t: &[f64]| {
        let (ell, alpha) = decode(t);
        lags_nll(&lags, &ys, &ell, alpha).unwrap_or(f64::INFINITY)
    };

    let opts = NelderMeadOptions {
        max_evals: config.max_evals,
        ..Default::default()
    };
    let mut best: Option<optim::Minimum> = None;
    let mut evals = 0;
    let mut any_converged = false;
    for k in 0..config.restarts {
        let start: Vec<f64> = if k == 0 {
            let mut s: Vec<f64> = default_ell.as_slice().iter().map(|l| l.ln()).collect();
            s.push((0.01 + eps).ln());
            s
        } else {
            lo.iter().zip(&hi).map(|(l, h)| rng.gen_range(*l..*h)).collect()
        };
        let res = optim::minimize(objective, &start, &lo, &hi, &opts);
        evals += res.evals;
        any_converged |= res.converged && res.f.is_finite();
        if best.as_ref().is_none_or(|b| res.f < b.f) {
            best = Some(res);
        }
    }
    let best = best.expect("at least one restart");
    if !best.f.is_finite() {
        return Err(Error::Conditioning {
            params: format!("subsample of {m} points"),
            reason: "likelihood could not be evaluated at any candidate".into(),
        });
    }
    if !any_converged {
        warn!("likelihood search did not converge in {} restarts", config.restarts);
    }
    let (ell, alpha_tilde) = decode(&best.x);
    Ok(Step1 {
        ell,
        alpha_tilde,
        objective: best.f,
        evals,
        flagged: !any_converged,
        subsample_size: m,
    })
}

/// Second step: minimize the profiled objective over the nugget.
pub fn profile_nugget(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    ell: &LengthScales,
    alpha_tilde: f64,
    config: &KrigingConfig,
) -> Result<f64> {
    let profile = LikelihoodProfile::new(x, y, ell, alpha_tilde)?;
    profile_minimizer(&profile, config)
}

/// Grid-plus-golden-section minimizer of [`LikelihoodProfile::objective`].
pub fn profile_minimizer(profile: &LikelihoodProfile, config: &KrigingConfig) -> Result<f64> {
    let lo = (profile.lower_limit() + 1e-8).max(1e-8);
    let hi = config.alpha_max;
    if lo >= hi {
        return Err(Error::Domain(format!(
            "no admissible nugget below {hi}: lower limit {lo:e}"
        )));
    }
    let k = config.profile_grid.max(2);
    let grid = crate::kernelreg::log_grid(lo, hi, k);
    let values: Vec<f64> = grid
        .iter()
        .map(|&a| profile.objective(a).unwrap_or(f64::INFINITY))
        .collect();
    let fmin = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !fmin.is_finite() {
        return Err(Error::Domain("every nugget candidate violates positivity".into()));
    }
    // Flat stretches are common (e.g. uncorrelated data); ties go to the smaller nugget.
    let tie = TIE_TOL * (1.0 + fmin.abs());
    let ibest = values.iter().position(|&v| v <= fmin + tie).expect("finite minimum");
    let fbest = values[ibest];
    let a = grid[ibest.saturating_sub(1)].ln();
    let b = grid[(ibest + 1).min(k - 1)].ln();
    let (t, f) = optim::golden_section(
        |t| profile.objective(t.exp()).unwrap_or(f64::INFINITY),
        a,
        b,
        1e-10,
        200,
    );
    let alpha = if f < fbest - tie { t.exp() } else { grid[ibest] };
    Ok(if alpha < config.nugget_snap { 0.0 } else { alpha })
}

impl KrigingModel {
    /// Condition the process on `(x, y)` with fixed hyperparameters.
    ///
    /// `params.sigma2` is kept as given; use [`fit`] to estimate it.
    pub fn condition(
        x: DMatrix<f64>,
        y: DVector<f64>,
        offset: f64,
        params: CovarianceParams,
    ) -> Result<Self> {
        check_xy(&x, &y)?;
        if params.ell.dim() != x.ncols() {
            return Err(Error::Input("length scales do not match design dimension".into()));
        }
        let r = covariance::assemble_correlation(&x, &params.ell, params.alpha)?;
        let factor = r.cholesky().map_err(|_| Error::Conditioning {
            params: format!("ell={:?}, alpha={:e}", params.ell.as_slice(), params.alpha),
            reason: "Cholesky factorization failed".into(),
        })?;
        let yc = y.map(|v| v - offset);
        let weights = factor.solve(&yc);
        let inv_sq = covariance::inv_sq(&params.ell);
        Ok(Self {
            x,
            y,
            offset,
            params,
            inv_sq,
            factor,
            weights,
            inv_diag: OnceLock::new(),
            info: FitInfo::default(),
        })
    }

    /// Same hyperparameters and offset, different data.
    pub fn recondition(&self, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let mut m = Self::condition(x, y, self.offset, self.params.clone())?;
        m.info = self.info.clone();
        Ok(m)
    }

    pub fn params(&self) -> &CovarianceParams {
        &self.params
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn outputs(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// `R⁻¹(y − offset)`.
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn predict_with(&self, point: &[f64], nugget_indicator: bool) -> Result<Prediction> {
        if point.len() != self.x.ncols() {
            return Err(Error::Input(format!(
                "point has dimension {} but model expects {}",
                point.len(),
                self.x.ncols()
            )));
        }
        if point.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite prediction point".into()));
        }
        let extrapolated = point.iter().any(|v| !(-0.1..=1.1).contains(v));
        let alpha = if nugget_indicator { self.params.alpha } else { 0.0 };
        let r = covariance::cross_correlation_unchecked(&self.x, point, &self.inv_sq, alpha);
        let mean = self.offset + r.dot(&self.weights);
        let z = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&r)
            .expect("non-singular factor");
        // The jitter counts as part of the nugget so that predictions and the
        // factorized matrix describe the same process.
        let prior = 1.0 + self.params.alpha + covariance::jitter_for(self.params.alpha);
        let variance = (self.params.sigma2 * (prior - z.norm_squared())).max(0.0);
        Ok(Prediction { mean, variance, extrapolated })
    }

    /// Predictive mean and variance at a normalized point.
    pub fn predict(&self, point: &[f64]) -> Result<Prediction> {
        self.predict_with(point, true)
    }

    /// Prediction for a fresh code run at `point`: the nugget component of the new
    /// run is independent of the learning base even if `point` was already observed.
    pub fn predict_new_run(&self, point: &[f64]) -> Result<Prediction> {
        self.predict_with(point, false)
    }

    pub fn predict_many(&self, points: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        (0..points.nrows())
            .map(|i| {
                let row: Vec<f64> = points.row(i).iter().copied().collect();
                self.predict(&row)
            })
            .collect()
    }

    fn inverse_diagonal(&self) -> &DVector<f64> {
        self.inv_diag.get_or_init(|| self.factor.inverse().diagonal())
    }

    /// Virtual leave-one-out residuals `y_i − ŷ_{−i}` and variances.
    ///
    /// Residuals are `(R⁻¹y)_i / (R⁻¹)_{ii}`; variances are `σ̂² / (R⁻¹)_{ii}`, the
    /// predictive variance the reduced base would give with the same `σ̂²`.
    pub fn loo_errors(&self) -> (DVector<f64>, DVector<f64>) {
        let d = self.inverse_diagonal();
        let errors = self.weights.component_div(d);
        let variances = d.map(|v| self.params.sigma2 / v);
        (errors, variances)
    }
}

/// Estimate hyperparameters on `(x, y)` and build the predictor.
pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, config: &KrigingConfig) -> Result<KrigingModel> {
    check_xy(x, y)?;
    if x.nrows() < 2 {
        return Err(Error::Input("Kriging needs at least two learning points".into()));
    }
    let (yc, offset) = centered(y, config.center_output);
    let step1 = fit_step1(x, &yc, config)?;
    let info = FitInfo {
        alpha_tilde: step1.alpha_tilde,
        step1_objective: step1.objective,
        step1_evals: step1.evals,
        flagged: step1.flagged,
        subsample_size: step1.subsample_size,
    };
    if yc.iter().all(|v| *v == 0.0) {
        let params = CovarianceParams::new(0.0, step1.ell, 0.0)?;
        let mut m = KrigingModel::condition(x.clone(), y.clone(), offset, params)?;
        m.info = info;
        return Ok(m);
    }
    let profile = LikelihoodProfile::new(x, &yc, &step1.ell, step1.alpha_tilde)?;
    let mut alpha = profile_minimizer(&profile, config)?;
    let attempt = |alpha: f64| -> Result<KrigingModel> {
        let params = CovarianceParams::new(1.0, step1.ell.clone(), alpha)?;
        let mut m = KrigingModel::condition(x.clone(), y.clone(), offset, params)?;
        let yc = y.map(|v| v - offset);
        m.params.sigma2 = yc.dot(&m.weights) / y.len() as f64;
        Ok(m)
    };
    let mut model = match attempt(alpha) {
        Ok(m) => m,
        Err(e) if alpha == 0.0 => {
            // Snapping to zero may lose positive definiteness; keep the grid value.
            warn!("zero nugget is ill-conditioned ({e}); keeping the profiled minimizer");
            let cfg = KrigingConfig { nugget_snap: 0.0, ..config.clone() };
            alpha = profile_minimizer(&profile, &cfg)?;
            attempt(alpha)?
        }
        Err(e) => return Err(e),
    };
    model.info = info;
    Ok(model)
}

/// Symmetric interval `mean ± z·sd` with `z` the standard-normal quantile at `(1 + level)/2`.
pub fn confidence_interval(pred: &Prediction, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level must be in (0,1), got {level}")));
    }
    let z = normal_quantile((1.0 + level) / 2.0);
    let half = z * pred.sd();
    Ok((pred.mean - half, pred.mean + half))
}

/// Standard-normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p)
}

/// Draw one realization of the zero-mean process `σ²·[C_ℓ + α·1]` at the rows of `x`.
pub fn sample_process(x: &DMatrix<f64>, params: &CovarianceParams, seed: u64) -> Result<DVector<f64>> {
    let r = covariance::assemble_correlation(x, &params.ell, params.alpha)?;
    let chol = r.cholesky()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_fn(x.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * z * params.sigma2.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_instance(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>());
        let y = DVector::from_fn(n, |i, _| (3.0 * x[(i, 0)]).sin() + rng.gen::<f64>() * 0.1);
        (x, y)
    }

    fn dense_nll(x: &DMatrix<f64>, y: &DVector<f64>, ell: &LengthScales, alpha: f64) -> f64 {
        let r = covariance::assemble_correlation(x, ell, alpha).unwrap().jittered();
        let n = y.len() as f64;
        let inv = r.clone().try_inverse().unwrap();
        let quad = (y.transpose() * &inv * y)[(0, 0)];
        (quad / n).ln() + r.determinant().ln() / n
    }

    #[test]
    fn nll_single_point() {
        let x = DMatrix::from_row_slice(1, 1, &[0.4]);
        let y = DVector::from_vec(vec![3.0]);
        let ell = LengthScales::uniform(1, 0.3).unwrap();
        let v = neg_log_likelihood(&x, &y, &ell, 0.0).unwrap();
        // R = [1 + jitter]: log(9/(1+j)) + log(1+j).
        assert_relative_eq!(v, 9f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn nll_duplicate_rows_is_singular() {
        let x = DMatrix::from_row_slice(2, 1, &[0.4, 0.4]);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        let ell = LengthScales::uniform(1, 0.3).unwrap();
        // R = [[2,2],[2,2]], no jitter at alpha = 1: singular.
        assert!(matches!(
            neg_log_likelihood(&x, &y, &ell, 1.0),
            Err(Error::Conditioning { .. })
        ));
    }

    #[test]
    fn nll_matches_dense_oracle() {
        let (x, y) = random_instance(8, 2, 11);
        let ell = LengthScales::new(vec![0.3, 0.8]).unwrap();
        for alpha in [0.0, 0.01, 0.5] {
            let v = neg_log_likelihood(&x, &y, &ell, alpha).unwrap();
            assert_relative_eq!(v, dense_nll(&x, &y, &ell, alpha), max_relative = 1e-9);
        }
    }

    #[test]
    fn profile_agrees_with_dense_objective() {
        let (x, y) = random_instance(30, 3, 5);
        let ell = LengthScales::new(vec![0.4, 0.6, 1.5]).unwrap();
        let at = 0.02;
        let p = LikelihoodProfile::new(&x, &y, &ell, at).unwrap();
        assert_relative_eq!(
            p.objective(at).unwrap(),
            neg_log_likelihood(&x, &y, &ell, at).unwrap(),
            max_relative = 1e-8
        );
        for alpha in [1e-4, 0.005, 0.3, 2.0, 9.0] {
            assert_relative_eq!(
                p.objective(alpha).unwrap(),
                neg_log_likelihood(&x, &y, &ell, alpha).unwrap(),
                max_relative = 1e-6
            );
        }
        assert!(p.s.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn profile_rejects_empty_range() {
        let p = LikelihoodProfile {
            s: DVector::from_vec(vec![0.5, 0.1]),
            v: DVector::from_vec(vec![1.0, 1.0]),
            alpha_tilde: 20.0,
        };
        assert!(matches!(profile_minimizer(&p, &KrigingConfig::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn sigma2_closed_form() {
        let (x, y) = random_instance(10, 2, 3);
        let cfg = KrigingConfig { restarts: 2, ..Default::default() };
        let m = fit(&x, &y, &cfg).unwrap();
        let r = covariance::assemble_correlation(&x, &m.params().ell, m.params().alpha)
            .unwrap()
            .jittered();
        let yc = y.map(|v| v - y.mean());
        let s2 = (yc.transpose() * r.try_inverse().unwrap() * &yc)[(0, 0)] / 10.0;
        assert_relative_eq!(m.params().sigma2, s2, max_relative = 1e-8);
    }

    #[test]
    fn two_separated_points_interpolate() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let y = DVector::from_vec(vec![0.0, 1.0]);
        let cfg = KrigingConfig { center_output: false, restarts: 2, ..Default::default() };
        let m = fit(&x, &y, &cfg).unwrap();
        assert_eq!(m.params().alpha, 0.0);
        assert!((m.predict(&[0.0]).unwrap().mean - 0.0).abs() < 1e-6);
        assert!((m.predict(&[1.0]).unwrap().mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_output_is_degenerate() {
        let (x, _) = random_instance(12, 2, 9);
        let y = DVector::from_element(12, 4.5);
        let m = fit(&x, &y, &KrigingConfig::default()).unwrap();
        assert!(m.info.flagged);
        assert_eq!(m.params().sigma2, 0.0);
        let p = m.predict(&[0.3, 0.3]).unwrap();
        assert_eq!(p.mean, 4.5);
        assert_eq!(p.variance, 0.0);
    }

    #[test]
    fn predict_matches_dense_oracle() {
        let (x, y) = random_instance(12, 2, 21);
        let params = CovarianceParams::new(2.0, LengthScales::new(vec![0.3, 0.5]).unwrap(), 0.05).unwrap();
        let m = KrigingModel::condition(x.clone(), y.clone(), 0.0, params.clone()).unwrap();
        let rinv = covariance::assemble_correlation(&x, &params.ell, params.alpha)
            .unwrap()
            .entries
            .try_inverse()
            .unwrap();
        for p in [[0.1, 0.2], [0.77, 0.4]] {
            let r = covariance::cross_correlation(&x, &p, &params.ell, params.alpha).unwrap();
            let mean = (r.transpose() * &rinv * &y)[(0, 0)];
            let var = 2.0 * (1.05 - (r.transpose() * &rinv * &r)[(0, 0)]);
            let pred = m.predict(&p).unwrap();
            assert_relative_eq!(pred.mean, mean, max_relative = 1e-9);
            assert_relative_eq!(pred.variance, var, max_relative = 1e-9);
            assert!(pred.variance >= params.nugget() - 1e-8);
        }
    }

    #[test]
    fn interpolation_and_prior_recovery() {
        let (x, y) = random_instance(15, 2, 4);
        let params = CovarianceParams::new(1.5, LengthScales::new(vec![0.2, 0.3]).unwrap(), 0.0).unwrap();
        let m = KrigingModel::condition(x.clone(), y.clone(), 0.0, params).unwrap();
        for i in 0..15 {
            let p = m.predict(&[x[(i, 0)], x[(i, 1)]]).unwrap();
            assert!((p.mean - y[i]).abs() <= 1e-6 * y.norm());
            assert!(p.variance <= 1e-6 * 1.5);
        }
        let far = m.predict(&[40.0, 40.0]).unwrap();
        assert!(far.extrapolated);
        assert!(far.mean.abs() < 1e-12);
        assert_relative_eq!(far.variance, 1.5 * (1.0 + covariance::jitter_for(0.0)), max_relative = 1e-12);
    }

    #[test]
    fn new_run_prediction_ignores_nugget_indicator() {
        let (x, y) = random_instance(10, 1, 8);
        let params = CovarianceParams::new(1.0, LengthScales::uniform(1, 0.3).unwrap(), 0.2).unwrap();
        let m = KrigingModel::condition(x.clone(), y.clone(), 0.0, params).unwrap();
        let at = [x[(3, 0)]];
        let exact = m.predict(&at).unwrap();
        assert!((exact.mean - y[3]).abs() < 1e-9);
        let fresh = m.predict_new_run(&at).unwrap();
        assert!(fresh.variance >= 0.2 - 1e-8);
    }

    fn refit_loo(m: &KrigingModel) -> (Vec<f64>, Vec<f64>) {
        let x = m.design();
        let y = m.outputs();
        let n = y.len();
        let mut errs = Vec::new();
        let mut vars = Vec::new();
        for i in 0..n {
            let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let sub = m
                .recondition(x.select_rows(keep.iter()), DVector::from_iterator(n - 1, keep.iter().map(|&j| y[j])))
                .unwrap();
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            // Observed duplicates of x_i stay in the reduced base, so the indicator
            // must fire for them: ordinary prediction does exactly that.
            let p = sub.predict(&row).unwrap();
            errs.push(y[i] - p.mean);
            vars.push(p.variance);
        }
        (errs, vars)
    }

    #[test]
    fn loo_matches_refit() {
        let (x, y) = random_instance(15, 3, 17);
        let params = CovarianceParams::new(0.7, LengthScales::new(vec![0.3, 0.5, 0.9]).unwrap(), 0.03).unwrap();
        let m = KrigingModel::condition(x, y, 0.2, params).unwrap();
        let (e, v) = m.loo_errors();
        let (eo, vo) = refit_loo(&m);
        for i in 0..15 {
            assert_relative_eq!(e[i], eo[i], max_relative = 1e-6);
            assert_relative_eq!(v[i], vo[i], max_relative = 1e-6);
        }
    }

    #[test]
    fn loo_two_points() {
        let x = DMatrix::from_row_slice(2, 1, &[0.2, 0.8]);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let params = CovarianceParams::new(1.0, LengthScales::uniform(1, 0.5).unwrap(), 0.0).unwrap();
        let m = KrigingModel::condition(x, y, 0.0, params.clone()).unwrap();
        let (e, _) = m.loo_errors();
        let c = covariance::matern32(&[0.6], &params.ell).unwrap();
        // From point 2 alone, the prediction at point 1 is c·y_2/(1 + jitter).
        assert_relative_eq!(e[0], 1.0 - -c / (1.0 + 1e-10), max_relative = 1e-8);
    }

    #[test]
    fn duplicated_rows_make_correlation_singular() {
        // The nugget indicator is positional, so replicated inputs give identical
        // rows of R whatever the nugget.
        let x = DMatrix::from_row_slice(5, 1, &[0.1, 0.4, 0.4, 0.7, 0.95]);
        let y = DVector::from_vec(vec![0.3, 1.0, 1.2, -0.4, 0.1]);
        let params = CovarianceParams::new(1.0, LengthScales::uniform(1, 0.3).unwrap(), 0.1).unwrap();
        assert!(matches!(
            KrigingModel::condition(x, y, 0.0, params),
            Err(Error::Conditioning { .. })
        ));
    }

    #[test]
    fn loo_with_near_duplicates() {
        let x = DMatrix::from_row_slice(5, 1, &[0.1, 0.4, 0.4001, 0.7, 0.95]);
        let y = DVector::from_vec(vec![0.3, 1.0, 1.2, -0.4, 0.1]);
        let params = CovarianceParams::new(1.0, LengthScales::uniform(1, 0.3).unwrap(), 0.1).unwrap();
        let m = KrigingModel::condition(x, y, 0.0, params).unwrap();
        let (e, v) = m.loo_errors();
        let (eo, vo) = refit_loo(&m);
        for i in 0..5 {
            assert!(e[i].is_finite());
            assert_relative_eq!(e[i], eo[i], max_relative = 1e-6);
            assert_relative_eq!(v[i], vo[i], max_relative = 1e-6);
        }
    }

    #[test]
    fn interval_quantiles() {
        let p = Prediction { mean: 0.0, variance: 1.0, extrapolated: false };
        let (lo, hi) = confidence_interval(&p, 0.90).unwrap();
        assert!((hi - 1.6449).abs() < 5e-5 && (lo + 1.6449).abs() < 5e-5);
        let (_, hi) = confidence_interval(&p, 0.95).unwrap();
        assert!((hi - 1.9600).abs() < 5e-5);
        let z = Prediction { mean: 3.0, variance: 0.0, extrapolated: false };
        assert_eq!(confidence_interval(&z, 0.9).unwrap(), (3.0, 3.0));
        assert!(confidence_interval(&p, 1.0).is_err());
    }
}
