//! Prediction criteria, outlier ranking by normalized errors, and the tunable
//! safety classifier with its ROC curve.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::doe::fmt;
use crate::error::{Error, Result};

/// Default safety threshold on the output.
pub const DEFAULT_THRESHOLD: f64 = 300.0;
/// Standard normal 95% quantile, for 90% two-sided intervals.
pub const Z90: f64 = 1.6449;

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("{what}: length mismatch ({a} vs {b})")));
    }
    if a == 0 {
        return Err(Error::Input(format!("{what}: empty input")));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), truth.len(), "rmse")?;
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// Root mean square of a residual vector.
pub fn rms(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Input("rms of an empty vector".into()));
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// Standard deviation with the `1/n` normalization.
pub fn sd(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("standard deviation of an empty vector".into()));
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    Ok((values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
}

pub fn q2(rmse: f64, sd_output: f64) -> Result<f64> {
    if !(sd_output > 0.0) {
        return Err(Error::Undefined("Q² needs a positive output standard deviation".into()));
    }
    Ok(1.0 - rmse * rmse / (sd_output * sd_output))
}

/// `(rmse_hat, q2_hat)` from leave-one-out (or in-sample) errors on the learning base.
pub fn estimated_criteria(errors: &[f64], learn_outputs: &[f64]) -> Result<(f64, f64)> {
    check_lengths(errors.len(), learn_outputs.len(), "estimated criteria")?;
    let r = rms(errors)?;
    Ok((r, q2(r, sd(learn_outputs)?)?))
}

/// The `⌈γn⌉`-th smallest absolute error.
pub fn error_quantile(errors: &[f64], gamma: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Input("quantile of an empty error set".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0, 1), got {gamma}")));
    }
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let k = ((gamma * abs.len() as f64).ceil() as usize).clamp(1, abs.len());
    Ok(abs[k - 1])
}

/// Fraction of test points with `|mean − truth| ≤ z·sd`.
pub fn cir(means: &[f64], sds: &[f64], truth: &[f64], z: f64) -> Result<f64> {
    check_lengths(means.len(), truth.len(), "cir")?;
    check_lengths(sds.len(), truth.len(), "cir")?;
    let hits = means
        .iter()
        .zip(sds)
        .zip(truth)
        .filter(|((m, s), t)| (*m - *t).abs() <= scaled(z, **s))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

// `z·s` with the convention that a zero spread stays zero even for infinite `z`.
fn scaled(z: f64, s: f64) -> f64 {
    if s == 0.0 {
        0.0
    } else {
        z * s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub rmse: f64,
    pub q2: f64,
    pub sd_output: f64,
    /// `(γ, q_γ)` pairs in increasing `γ`.
    pub quantiles: Vec<(f64, f64)>,
    pub cir: Option<f64>,
    pub rmse_hat: Option<f64>,
    pub q2_hat: Option<f64>,
}

impl DiagnosticsReport {
    /// Criteria on a test base. `sds` enables the interval ratio at `z`; `learn`
    /// carries the learning-base errors and outputs for the estimated criteria.
    pub fn compute(
        pred: &[f64],
        truth: &[f64],
        sds: Option<&[f64]>,
        z: f64,
        learn: Option<(&[f64], &[f64])>,
        gammas: &[f64],
    ) -> Result<Self> {
        let r = rmse(pred, truth)?;
        let sd_output = sd(truth)?;
        let errors: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
        let mut g = gammas.to_vec();
        g.sort_by(f64::total_cmp);
        let quantiles = g
            .iter()
            .map(|&gm| error_quantile(&errors, gm).map(|q| (gm, q)))
            .collect::<Result<_>>()?;
        let cir = sds.map(|s| cir(pred, s, truth, z)).transpose()?;
        let (rmse_hat, q2_hat) = match learn {
            Some((e, y)) => {
                let (a, b) = estimated_criteria(e, y)?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        Ok(Self { rmse: r, q2: q2(r, sd_output)?, sd_output, quantiles, cir, rmse_hat, q2_hat })
    }

    /// `criterion,value` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["criterion", "value"])?;
        let mut row = |k: String, v: f64| w.write_record([k, fmt(v)]);
        if let Some(v) = self.rmse_hat {
            row("rmse_hat".into(), v)?;
        }
        row("rmse".into(), self.rmse)?;
        if let Some(v) = self.q2_hat {
            row("q2_hat".into(), v)?;
        }
        row("q2".into(), self.q2)?;
        for (g, q) in &self.quantiles {
            row(format!("q_{g}"), *q)?;
        }
        if let Some(c) = self.cir {
            row("cir".into(), c)?;
        }
        row("sd_output".into(), self.sd_output)?;
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(s, "rmse_hat   {}", opt(self.rmse_hat));
        let _ = writeln!(s, "rmse       {:.4}", self.rmse);
        let _ = writeln!(s, "q2_hat     {}", opt(self.q2_hat));
        let _ = writeln!(s, "q2         {:.4}", self.q2);
        for (g, q) in &self.quantiles {
            let _ = writeln!(s, "q_{g:<8} {q:.4}");
        }
        if let Some(c) = self.cir {
            let _ = writeln!(s, "cir        {c:.4}");
        }
        let _ = writeln!(s, "sd_output  {:.4}", self.sd_output);
        s
    }
}

/// Denominator of the normalized errors.
#[derive(Debug, Clone, Copy)]
pub enum ErrorScale<'a> {
    /// Per-point leave-one-out standard deviations.
    PerPoint(&'a [f64]),
    /// One value for all points, typically `rmse_hat`.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierRanking {
    /// Point indices by decreasing `|normalized error|`, ties by index.
    pub order: Vec<usize>,
    pub normalized: Vec<f64>,
}

impl OutlierRanking {
    pub fn top(&self, k: usize) -> &[usize] {
        if k == 0 {
            &self.order
        } else {
            &self.order[..k.min(self.order.len())]
        }
    }

    /// `rank,index,normalized_error` rows (rank and index 1-based).
    pub fn write_csv<W: Write>(&self, top_k: usize, extra: Option<&dyn Fn(usize) -> String>, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["rank", "index", "normalized_error"];
        if extra.is_some() {
            header.push("warnings");
        }
        w.write_record(&header)?;
        for (r, &i) in self.top(top_k).iter().enumerate() {
            let mut rec = vec![(r + 1).to_string(), (i + 1).to_string(), fmt(self.normalized[i])];
            if let Some(f) = extra {
                rec.push(f(i));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn normalized_errors(errors: &[f64], scale: ErrorScale<'_>) -> Result<OutlierRanking> {
    let normalized: Vec<f64> = match scale {
        ErrorScale::Constant(s) => {
            if !(s > 0.0) {
                return Err(Error::Undefined("normalized errors need a positive scale".into()));
            }
            errors.iter().map(|e| e / s).collect()
        }
        ErrorScale::PerPoint(s) => {
            check_lengths(errors.len(), s.len(), "normalized errors")?;
            if s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Undefined("normalized errors need positive per-point scales".into()));
            }
            errors.iter().zip(s).map(|(e, v)| e / v).collect()
        }
    };
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    order.sort_by(|&a, &b| normalized[b].abs().total_cmp(&normalized[a].abs()).then(a.cmp(&b)));
    Ok(OutlierRanking { order, normalized })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Class {
    Viable,
    Unsafe,
}

/// Unsafe iff `mean − τ·sd < threshold`; equality counts as viable.
pub fn classify(mean: f64, sd: f64, tau: f64, threshold: f64) -> Class {
    if mean - scaled(tau, sd) < threshold {
        Class::Unsafe
    } else {
        Class::Viable
    }
}

/// 400 values evenly spaced on `[−10, 10]`, framed by `±∞`.
pub fn default_tau_grid() -> Vec<f64> {
    let mut g = vec![f64::NEG_INFINITY];
    g.extend((0..400).map(|i| -10.0 + 20.0 * i as f64 / 399.0));
    g.push(f64::INFINITY);
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false unsafe rate, true unsafe rate)` per `τ`, in grid order.
    pub points: Vec<(f64, f64)>,
    pub tau_grid: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["tau", "fpr", "tpr"])?;
        for (t, (f, p)) in self.tau_grid.iter().zip(&self.points) {
            w.write_record([fmt(*t), fmt(*f), fmt(*p)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_svg(&self) -> String {
        let mut pts = vec![(0.0, 0.0)];
        pts.extend(self.points.iter().copied());
        pts.push((1.0, 1.0));
        svg_plot(
            &format!("ROC (AUC {:.4})", self.auc),
            "false unsafe rate",
            "true unsafe rate",
            &[("roc", &pts)],
        )
    }
}

/// Trapezoid area under a polyline sorted by abscissa, from (0,0) to (1,1).
pub fn auc(points: &[(f64, f64)]) -> f64 {
    let mut pts = Vec::with_capacity(points.len() + 2);
    pts.push((0.0, 0.0));
    pts.extend_from_slice(points);
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// ROC of the classifier over `tau_grid`. A true output at or below the
/// threshold is unsafe.
pub fn roc(means: &[f64], sds: &[f64], truth: &[f64], tau_grid: &[f64], threshold: f64) -> Result<RocCurve> {
    check_lengths(means.len(), truth.len(), "roc")?;
    check_lengths(sds.len(), truth.len(), "roc")?;
    if sds.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Input("roc: spreads must be nonnegative".into()));
    }
    let unsafe_truth: Vec<bool> = truth.iter().map(|t| *t <= threshold).collect();
    let n_unsafe = unsafe_truth.iter().filter(|u| **u).count();
    let n_viable = truth.len() - n_unsafe;
    if n_unsafe == 0 || n_viable == 0 {
        return Err(Error::Undefined(format!(
            "degenerate ROC: {n_unsafe} unsafe and {n_viable} viable points at threshold {threshold}"
        )));
    }
    let mut grid = tau_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let points: Vec<(f64, f64)> = grid
        .iter()
        .map(|&tau| {
            let (mut tp, mut fp) = (0usize, 0usize);
            for i in 0..truth.len() {
                if classify(means[i], sds[i], tau, threshold) == Class::Unsafe {
                    if unsafe_truth[i] {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            (fp as f64 / n_viable as f64, tp as f64 / n_unsafe as f64)
        })
        .collect();
    let auc = auc(&points);
    Ok(RocCurve { points, tau_grid: grid, auc })
}

/// Minimal SVG line chart.
pub fn svg_plot(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, &[(f64, f64)])]) -> String {
    const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let (w, h, m) = (640.0, 480.0, 60.0);
    let all = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    let _ = writeln!(s, r#"<text x="{}" y="30" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{ylabel}</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (v, x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{v:.3}</text>"#, h - m + 18.0);
    }
    for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end">{v:.3}</text>"#, m - 5.0);
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let c = COLORS[k % COLORS.len()];
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" points="{}"/>"#, path.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{name}</text>"#, m + 10.0, m + 18.0 * (k + 1) as f64);
    }
    s.push_str("</svg>\n");
    s
}
