//! One-hidden-layer perceptron for scalar regression.
//!
//! Inputs and output are standardized, the hidden layer uses `tanh`, and the output
//! unit is linear. Training is mini-batch gradient descent with momentum on the
//! squared error. Several random initializations are scored on a held-out split and
//! the best one is kept.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine standardization `(v − mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    /// Column means and standard deviations; a zero spread is replaced by 1.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for c in x.column_iter() {
            let m = c.sum() / n;
            let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, scale }
    }

    fn apply(&self, row: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = (row[k] - self.mean[k]) / self.scale[k];
        }
    }
}

/// Hyperparameters for [`train`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub restarts: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Fraction of the base held out to score restarts.
    pub holdout_fraction: f64,
    /// Retrain the selected initialization on the full base.
    pub refit_full: bool,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            restarts: 4,
            epochs: 2000,
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 32,
            holdout_fraction: 0.2,
            refit_full: false,
            seed: 0,
        }
    }
}

/// Network weights in standardized units.
///
/// `w1` is `width × (d + 1)` with the bias in the last column; `w2` has `width + 1`
/// entries with the output bias last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w1: DMatrix<f64>,
    pub w2: DVector<f64>,
}

impl Weights {
    pub fn zeros(d: usize, width: usize) -> Self {
        Self {
            w1: DMatrix::zeros(width, d + 1),
            w2: DVector::zeros(width + 1),
        }
    }

    fn random(d: usize, width: usize, rng: &mut impl Rng) -> Self {
        let a1 = 1.0 / ((d + 1) as f64).sqrt();
        let a2 = 1.0 / ((width + 1) as f64).sqrt();
        Self {
            w1: DMatrix::from_fn(width, d + 1, |_, _| rng.gen_range(-a1..a1)),
            w2: DVector::from_fn(width + 1, |_, _| rng.gen_range(-a2..a2)),
        }
    }

    pub fn width(&self) -> usize {
        self.w2.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols() - 1
    }

    /// Flat parameter vector: `w1` column-major, then `w2`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.w1.iter().chain(self.w2.iter()).copied().collect()
    }

    pub fn from_flat(d: usize, width: usize, p: &[f64]) -> Self {
        let k = width * (d + 1);
        Self {
            w1: DMatrix::from_column_slice(width, d + 1, &p[..k]),
            w2: DVector::from_column_slice(&p[k..k + width + 1]),
        }
    }

    fn is_finite(&self) -> bool {
        self.w1.iter().chain(self.w2.iter()).all(|v| v.is_finite())
    }

    /// Output for an already standardized input.
    pub fn forward_standardized(&self, s: &[f64]) -> f64 {
        let d = self.input_dim();
        let h = self.width();
        let mut out = self.w2[h];
        for j in 0..h {
            let mut z = self.w1[(j, d)];
            for (k, sk) in s.iter().enumerate() {
                z += self.w1[(j, k)] * sk;
            }
            out += self.w2[j] * z.tanh();
        }
        out
    }
}

/// Mean of `½(f(s_i) − t_i)²` over the rows, and its gradient in flat layout.
pub fn loss_and_gradient(w: &Weights, s: &DMatrix<f64>, t: &[f64]) -> (f64, Vec<f64>) {
    let idx: Vec<usize> = (0..t.len()).collect();
    let mut grad = Weights::zeros(w.input_dim(), w.width());
    let mut hidden = vec![0.0; w.width()];
    let loss = accumulate(w, s, t, &idx, &mut grad, &mut hidden);
    (loss, grad.to_flat())
}

// Adds the batch-mean gradient into `grad` (which must start at zero) and returns the batch loss.
fn accumulate(
    w: &Weights,
    s: &DMatrix<f64>,
    t: &[f64],
    rows: &[usize],
    grad: &mut Weights,
    hidden: &mut [f64],
) -> f64 {
    let d = w.input_dim();
    let h = w.width();
    let inv = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    for &i in rows {
        let mut out = w.w2[h];
        for j in 0..h {
            let mut z = w.w1[(j, d)];
            for k in 0..d {
                z += w.w1[(j, k)] * s[(i, k)];
            }
            hidden[j] = z.tanh();
            out += w.w2[j] * hidden[j];
        }
        let r = out - t[i];
        loss += 0.5 * r * r * inv;
        let g = r * inv;
        grad.w2[h] += g;
        for j in 0..h {
            grad.w2[j] += g * hidden[j];
            let back = g * w.w2[j] * (1.0 - hidden[j] * hidden[j]);
            for k in 0..d {
                grad.w1[(j, k)] += back * s[(i, k)];
            }
            grad.w1[(j, d)] += back;
        }
    }
    loss
}

fn standardize(x: &DMatrix<f64>, scaler: &Scaler) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(x.nrows(), x.ncols());
    let mut buf = vec![0.0; x.ncols()];
    for i in 0..x.nrows() {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        scaler.apply(&row, &mut buf);
        for (k, v) in buf.iter().enumerate() {
            s[(i, k)] = *v;
        }
    }
    s
}

/// Gradient descent with momentum from `init`. `None` if the weights blow up.
fn descend(
    mut w: Weights,
    s: &DMatrix<f64>,
    t: &[f64],
    rows: &[usize],
    cfg: &MlpConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Weights> {
    let (d, h) = (w.input_dim(), w.width());
    let mut vel = Weights::zeros(d, h);
    let mut grad = Weights::zeros(d, h);
    let mut hidden = vec![0.0; h];
    let mut order = rows.to_vec();
    let bs = cfg.batch_size.max(1);
    let lr = cfg.learning_rate;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(bs) {
            grad.w1.fill(0.0);
            grad.w2.fill(0.0);
            let loss = accumulate(&w, s, t, batch, &mut grad, &mut hidden);
            if !loss.is_finite() {
                return None;
            }
            vel.w1 *= cfg.momentum;
            vel.w1 -= &grad.w1 * lr;
            vel.w2 *= cfg.momentum;
            vel.w2 -= &grad.w2 * lr;
            w.w1 += &vel.w1;
            w.w2 += &vel.w2;
        }
        if !w.is_finite() {
            return None;
        }
    }
    Some(w)
}

/// A trained perceptron with its scalers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub input_scaler: Scaler,
    pub output_mean: f64,
    pub output_scale: f64,
    pub weights: Weights,
    /// Held-out RMSE of each restart, in output units (`NaN` for diverged ones).
    pub restart_scores: Vec<f64>,
    /// `(width, learning-base RMSE)` for every width tried by [`select_width`].
    pub width_scores: Vec<(usize, f64)>,
}

impl MlpModel {
    pub fn hidden_width(&self) -> usize {
        self.weights.width()
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.input_dim() {
            return Err(Error::Input(format!(
                "point has dimension {} but network expects {}",
                x.len(),
                self.weights.input_dim()
            )));
        }
        let mut s = vec![0.0; x.len()];
        self.input_scaler.apply(x, &mut s);
        Ok(self.output_mean + self.output_scale * self.weights.forward_standardized(&s))
    }

    pub fn predict_many(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        (0..x.nrows())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                self.forward(&row)
            })
            .collect()
    }

    /// RMSE on `(x, y)` in output units.
    pub fn rmse(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
        let p = self.predict_many(x)?;
        let mse = p.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
        Ok(mse.sqrt())
    }
}

fn check_xy(x: &DMatrix<f64>, y: &DVector<f64>, width: usize) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Input(format!(
            "design has {} rows but {} outputs",
            x.nrows(),
            y.len()
        )));
    }
    if width == 0 {
        return Err(Error::Domain("hidden width must be positive".into()));
    }
    if y.len() < width.max(2) {
        return Err(Error::Input(format!(
            "need at least {} learning points for width {width}",
            width.max(2)
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value in learning base".into()));
    }
    Ok(())
}

/// Train `restarts` initializations and keep the one with the lowest held-out RMSE.
pub fn train(x: &DMatrix<f64>, y: &DVector<f64>, width: usize, cfg: &MlpConfig) -> Result<MlpModel> {
    check_xy(x, y, width)?;
    if cfg.restarts == 0 {
        return Err(Error::Domain("restarts must be at least 1".into()));
    }
    let n = y.len();
    let d = x.ncols();
    let scaler = Scaler::fit(x);
    let out = Scaler::fit(&DMatrix::from_column_slice(n, 1, y.as_slice()));
    let (mean, scale) = (out.mean[0], out.scale[0]);
    let s = standardize(x, &scaler);
    let t: Vec<f64> = y.iter().map(|v| (v - mean) / scale).collect();
    if y.iter().all(|v| *v == y[0]) {
        return Ok(MlpModel {
            input_scaler: scaler,
            output_mean: mean,
            output_scale: scale,
            weights: Weights::zeros(d, width),
            restart_scores: vec![0.0; cfg.restarts],
            width_scores: Vec::new(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let n_hold = ((n as f64 * cfg.holdout_fraction).round() as usize).min(n - 1);
    let (hold, fit_rows) = perm.split_at(n_hold);

    let mut scores = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(f64, Weights, u64)> = None;
    for r in 0..cfg.restarts {
        let init_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(r as u64 + 1);
        let mut init_rng = ChaCha8Rng::seed_from_u64(init_seed);
        let init = Weights::random(d, width, &mut init_rng);
        let Some(w) = descend(init, &s, &t, fit_rows, cfg, &mut init_rng) else {
            scores.push(f64::NAN);
            continue;
        };
        let eval_rows = if hold.is_empty() { fit_rows } else { hold };
        let mse = eval_rows
            .iter()
            .map(|&i| {
                let row: Vec<f64> = s.row(i).iter().copied().collect();
                let e = w.forward_standardized(&row) - t[i];
                e * e
            })
            .sum::<f64>()
            / eval_rows.len() as f64;
        let score = scale * mse.sqrt();
        scores.push(score);
        if score.is_finite() && best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, w, init_seed));
        }
    }
    let (_, mut weights, init_seed) =
        best.ok_or_else(|| Error::Training(format!("all {} restarts diverged", cfg.restarts)))?;
    if cfg.refit_full && !hold.is_empty() {
        let mut init_rng = ChaCha8Rng::seed_from_u64(init_seed);
        let init = Weights::random(d, width, &mut init_rng);
        let all: Vec<usize> = (0..n).collect();
        if let Some(w) = descend(init, &s, &t, &all, cfg, &mut init_rng) {
            weights = w;
        }
    }
    Ok(MlpModel {
        input_scaler: scaler,
        output_mean: mean,
        output_scale: scale,
        weights,
        restart_scores: scores,
        width_scores: Vec::new(),
    })
}

/// Train one network per width and keep the one with the lowest learning-base RMSE.
pub fn select_width(x: &DMatrix<f64>, y: &DVector<f64>, widths: &[usize], cfg: &MlpConfig) -> Result<MlpModel> {
    if widths.is_empty() {
        return Err(Error::Domain("no hidden widths to try".into()));
    }
    let mut sorted = widths.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<MlpModel> = None;
    let mut best_rmse = f64::INFINITY;
    let mut table = Vec::new();
    for &w in &sorted {
        let model = train(x, y, w, cfg)?;
        let rmse = model.rmse(x, y)?;
        table.push((w, rmse));
        if rmse < best_rmse {
            best_rmse = rmse;
            best = Some(model);
        }
    }
    let mut model = best.ok_or_else(|| Error::Training("no width produced a finite RMSE".into()))?;
    model.width_scores = table;
    Ok(model)
}
