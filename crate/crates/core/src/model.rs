//! A common face for the three metamodels and their on-disk format.
//!
//! Model files are JSON. They store the input space, the normalized learning
//! data and the hyperparameters; everything derived (factorizations, weights of
//! the linear predictors) is rebuilt on load.

use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceParams;
use crate::diagnostics::{normalized_errors, rms, ErrorScale, OutlierRanking};
use crate::doe::InputSpace;
use crate::error::{Error, Result};
use crate::kernelreg::{self, BernoulliKernel, KernelConfig, KernelModel};
use crate::kriging::{self, FitInfo, KrigingConfig, KrigingModel};
use crate::neuralnet::{self, MlpConfig, MlpModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Kriging,
    Kernel,
    Mlp,
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kriging" => Ok(Self::Kriging),
            "kernel" => Ok(Self::Kernel),
            "mlp" => Ok(Self::Mlp),
            _ => Err(Error::Input(format!("unknown method `{s}` (expected kriging, kernel or mlp)"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Kriging => "kriging",
            Self::Kernel => "kernel",
            Self::Mlp => "mlp",
        })
    }
}

/// Settings for all three methods; only the part for the chosen method is used.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub kriging: KrigingConfig,
    pub kernel: KernelConfig,
    pub mlp: MlpConfig,
    /// Hidden widths tried for the perceptron.
    pub mlp_widths: Vec<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            kriging: KrigingConfig::default(),
            kernel: KernelConfig::default(),
            mlp: MlpConfig::default(),
            mlp_widths: vec![4, 8, 16],
        }
    }
}

/// Residuals on the learning base with their normalizing scale.
#[derive(Debug, Clone)]
pub struct LearningErrors {
    /// Leave-one-out errors, or in-sample residuals for the perceptron.
    pub errors: Vec<f64>,
    /// Per-point leave-one-out sd for Kriging, `None` for the constant-scale methods.
    pub sds: Option<Vec<f64>>,
    pub rmse_hat: f64,
}

impl LearningErrors {
    pub fn ranking(&self) -> Result<OutlierRanking> {
        match &self.sds {
            Some(s) => normalized_errors(&self.errors, ErrorScale::PerPoint(s)),
            None => normalized_errors(&self.errors, ErrorScale::Constant(self.rmse_hat)),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Surrogate {
    Kriging(KrigingModel),
    Kernel(KernelModel),
    Mlp { net: MlpModel, x: DMatrix<f64>, y: DVector<f64> },
}

impl Surrogate {
    /// Fit `kind` on normalized inputs `x` and outputs `y`.
    pub fn fit(kind: ModelKind, x: &DMatrix<f64>, y: &DVector<f64>, config: &FitConfig) -> Result<Self> {
        Ok(match kind {
            ModelKind::Kriging => Self::Kriging(kriging::fit(x, y, &config.kriging)?),
            ModelKind::Kernel => Self::Kernel(kernelreg::fit(x, y, &config.kernel)?),
            ModelKind::Mlp => Self::Mlp {
                net: neuralnet::select_width(x, y, &config.mlp_widths, &config.mlp)?,
                x: x.clone(),
                y: y.clone(),
            },
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Kriging(_) => ModelKind::Kriging,
            Self::Kernel(_) => ModelKind::Kernel,
            Self::Mlp { .. } => ModelKind::Mlp,
        }
    }

    pub fn design(&self) -> &DMatrix<f64> {
        match self {
            Self::Kriging(m) => m.design(),
            Self::Kernel(m) => m.design(),
            Self::Mlp { x, .. } => x,
        }
    }

    pub fn outputs(&self) -> &DVector<f64> {
        match self {
            Self::Kriging(m) => m.outputs(),
            Self::Kernel(m) => m.outputs(),
            Self::Mlp { y, .. } => y,
        }
    }

    /// Predicted means, plus predictive sds where the method defines them.
    pub fn predict_many(&self, points: &DMatrix<f64>) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        match self {
            Self::Kriging(m) => {
                let p = m.predict_many(points)?;
                Ok((p.iter().map(|q| q.mean).collect(), Some(p.iter().map(|q| q.sd()).collect())))
            }
            Self::Kernel(m) => Ok((m.predict_many(points)?, None)),
            Self::Mlp { net, .. } => Ok((net.predict_many(points)?, None)),
        }
    }

    pub fn learning_errors(&self) -> Result<LearningErrors> {
        let (errors, sds) = match self {
            Self::Kriging(m) => {
                let (e, v) = m.loo_errors();
                (e.iter().copied().collect::<Vec<_>>(), Some(v.iter().map(|v| v.sqrt()).collect()))
            }
            Self::Kernel(m) => (m.loo_errors().iter().copied().collect(), None),
            Self::Mlp { net, x, y } => {
                let p = net.predict_many(x)?;
                (p.iter().zip(y.iter()).map(|(a, b)| a - b).collect(), None)
            }
        };
        let rmse_hat = rms(&errors)?;
        Ok(LearningErrors { errors, sds, rmse_hat })
    }

    /// Spreads used by the safety classifier: the predictive sd for Kriging,
    /// `rmse_hat` for the other methods.
    pub fn classifier_sds(&self, points: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let (means, sds) = self.predict_many(points)?;
        let sds = match sds {
            Some(s) => s,
            None => vec![self.learning_errors()?.rmse_hat; means.len()],
        };
        Ok((means, sds))
    }

    /// Short human-readable description of the fitted hyperparameters.
    pub fn summary(&self, space: &InputSpace) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "method: {}", self.kind());
        let _ = writeln!(s, "learning points: {}", self.outputs().len());
        match self {
            Self::Kriging(m) => {
                let p = m.params();
                let _ = writeln!(s, "{:<28} {:>12}", "parameter", "estimate");
                let _ = writeln!(s, "{:<28} {:>12.4}", "sigma", p.sigma2.sqrt());
                for (name, l) in space.names().iter().zip(p.ell.as_slice()) {
                    let _ = writeln!(s, "{:<28} {:>12.4}", format!("ell[{name}]"), l);
                }
                let _ = writeln!(s, "{:<28} {:>12.4}", "delta", p.nugget_sd());
                let _ = writeln!(s, "{:<28} {:>12.4e}", "alpha", p.alpha);
                if m.info.flagged {
                    let _ = writeln!(s, "warning: likelihood search was flagged (degenerate outputs)");
                }
            }
            Self::Kernel(m) => {
                let _ = writeln!(s, "order m: {}", m.kernel().m);
                let _ = writeln!(s, "lambda: {:e}", m.lambda());
                if let Some(g) = m.gcv {
                    let _ = writeln!(s, "gcv criterion: {g:e}");
                }
            }
            Self::Mlp { net, .. } => {
                let _ = writeln!(s, "hidden width: {}", net.hidden_width());
                for (w, r) in &net.width_scores {
                    let _ = writeln!(s, "width {w:>3}: learning rmse {r:.4}");
                }
                let scores: Vec<String> = net.restart_scores.iter().map(|v| format!("{v:.4}")).collect();
                let _ = writeln!(s, "restart held-out rmse: {}", scores.join(" "));
            }
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Stored {
    Kriging { params: CovarianceParams, offset: f64, info: FitInfo },
    Kernel { m: u32, lambda: f64, ridge: f64, offset: f64, gcv: Option<f64> },
    Mlp { net: MlpModel },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    space: InputSpace,
    /// Learning inputs, normalized, one row per run.
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    #[serde(flatten)]
    model: Stored,
}

pub fn save<W: Write>(model: &Surrogate, space: &InputSpace, writer: W) -> Result<()> {
    let x = model.design();
    let rows = (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect();
    let stored = match model {
        Surrogate::Kriging(m) => Stored::Kriging { params: m.params().clone(), offset: m.offset(), info: m.info.clone() },
        Surrogate::Kernel(m) => Stored::Kernel {
            m: m.kernel().m,
            lambda: m.lambda(),
            ridge: m.ridge(),
            offset: m.offset(),
            gcv: m.gcv,
        },
        Surrogate::Mlp { net, .. } => Stored::Mlp { net: net.clone() },
    };
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        space: space.clone(),
        x: rows,
        y: model.outputs().iter().copied().collect(),
        model: stored,
    };
    serde_json::to_writer_pretty(writer, &file)?;
    Ok(())
}

pub fn load<R: Read>(reader: R) -> Result<(Surrogate, InputSpace)> {
    let value: serde_json::Value = serde_json::from_reader(reader)?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(Error::Input(format!("unsupported model format version {v}"))),
        None => return Err(Error::Input("model file has no `format_version`".into())),
    }
    let file: ModelFile = serde_json::from_value(value)?;
    let n = file.y.len();
    let d = file.space.dim();
    if file.x.len() != n || file.x.iter().any(|r| r.len() != d) {
        return Err(Error::Input("model file data do not match its input space".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, k| file.x[i][k]);
    let y = DVector::from_vec(file.y);
    let model = match file.model {
        Stored::Kriging { params, offset, info } => {
            let mut m = KrigingModel::condition(x, y, offset, params)?;
            m.info = info;
            Surrogate::Kriging(m)
        }
        Stored::Kernel { m, lambda, ridge, offset, gcv } => {
            let mut k = KernelModel::with_ridge(x, y, BernoulliKernel::new(m)?, ridge, offset)?;
            k.set_lambda(lambda);
            k.gcv = gcv;
            Surrogate::Kernel(k)
        }
        Stored::Mlp { net } => {
            if net.weights.input_dim() != d {
                return Err(Error::Input("network input size does not match the input space".into()));
            }
            Surrogate::Mlp { net, x, y }
        }
    };
    Ok((model, file.space))
}
