//! Synthetic code manager for the 11-parameter fuel-pin space.
//!
//! The "code" is a smooth analytic margin plus two artifacts of the surrounding
//! tooling: a mesh instability introduced by the preprocessor (the pin height is
//! discretized into axial nodes and the hot node can jump between cells) and
//! silent failures that corrupt the output and leave warning `W1` behind.
//! Version 2 of the preprocessor shrinks the instability and version 2 of the
//! postprocessor flags the failed runs so that they leave the bases.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::doe::{feasibility_filter, fmt, lhs_maximin, pin_geometry_feasible, Design, InputSpace};
use crate::error::{Error, Result};

/// Warning attached to runs whose output was silently corrupted.
pub const FAILURE_WARNING: &str = "W1";

/// Zero-based index of the pin-height coordinate that drives the mesh.
pub const PIN_HEIGHT: usize = 6;
/// Coordinates the smooth response does not depend on.
pub const INERT: [usize; 2] = [6, 10];
/// Amplitude of the instability term under preprocessor v2, relative to v1.
pub const V2_AMPLITUDE: f64 = 0.3;
/// Upper bound on the gradient norm of [`smooth_response`] over `[0,1]^11`.
pub const LIPSCHITZ: f64 = 2500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Version {
    V1,
    V2,
}

impl std::str::FromStr for Version {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" | "1" => Ok(Self::V1),
            "v2" | "2" => Ok(Self::V2),
            _ => Err(Error::Input(format!("unknown version `{s}` (expected v1 or v2)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodeManagerConfig {
    pub preprocessor: Version,
    pub postprocessor: Version,
    pub mesh_nodes: u32,
    pub instability_scale: f64,
    pub failure_rate: f64,
    pub failure_offset: f64,
    pub seed: u64,
}

impl Default for CodeManagerConfig {
    fn default() -> Self {
        Self {
            preprocessor: Version::V1,
            postprocessor: Version::V1,
            mesh_nodes: 20,
            instability_scale: 25.0,
            failure_rate: 0.004,
            failure_offset: 400.0,
            seed: 0,
        }
    }
}

impl CodeManagerConfig {
    pub fn with_versions(pre: Version, post: Version) -> Self {
        Self { preprocessor: pre, postprocessor: post, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mesh_nodes == 0 {
            return Err(Error::Domain("mesh_nodes must be positive".into()));
        }
        if !(self.instability_scale >= 0.0 && self.failure_offset >= 0.0) {
            return Err(Error::Domain("instability_scale and failure_offset must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return Err(Error::Domain("failure_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub x: Vec<f64>,
    /// `None` when the postprocessor flagged the run as failed.
    pub y: Option<f64>,
    pub status: RunStatus,
    pub warnings: Vec<String>,
}

const KNEE_WIDTH: f64 = 0.1;

/// Margin on the normalized fuel-pin space; mean about 600 and sd about 340.
///
/// With `u` the normalized inputs, the power factor is
/// `P = (0.3 + 0.7 u₇)(0.85 + 0.3 u₈)(0.9 + 0.2 u₉ + 0.1 (u₉ − ½)²)`,
/// the geometry factor `G = (1 − 0.3 u₂ + 0.08 u₂²)(1.2 − 0.35 u₃ + 0.1 u₃²)`,
/// the material factor `C = 1 + 0.08 u₁ + 0.05 u₀u₁ + 0.04 sin(π u₄) − 0.03 u₅`,
/// and the margin is
/// `1550 − 1514 P G C − 11.4 tanh(3(u₀ − 0.4))(1 + u₇) − 40 tanh((u₇ + 0.3 u₈ − 0.85)/0.1)`.
/// The last term is a steep drop at high power.
/// Coordinates 6 (pin height) and 10 (volume of expansion) do not enter.
pub fn smooth_response(u: &[f64]) -> f64 {
    let p = (0.3 + 0.7 * u[7]) * (0.85 + 0.3 * u[8]) * (0.9 + 0.2 * u[9] + 0.1 * (u[9] - 0.5).powi(2));
    let g = (1.0 - 0.3 * u[2] + 0.08 * u[2] * u[2]) * (1.2 - 0.35 * u[3] + 0.1 * u[3] * u[3]);
    let c = 1.0 + 0.08 * u[1] + 0.05 * u[0] * u[1] + 0.04 * (std::f64::consts::PI * u[4]).sin() - 0.03 * u[5];
    let sat = (3.0 * (u[0] - 0.4)).tanh() * (1.0 + u[7]);
    let knee = ((u[7] + 0.3 * u[8] - 0.85) / KNEE_WIDTH).tanh();
    1550.0 - 1514.0 * p * g * c - 11.4 * sat - 40.0 * knee
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash(words: &[u64]) -> u64 {
    words.iter().fold(0x5EED_u64, |h, w| mix(h ^ w))
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn bucket(v: f64, k: u32) -> u64 {
    ((v * k as f64).floor() as i64).clamp(0, k as i64 - 1) as u64
}

/// Axial mesh node holding the hot point.
pub fn mesh_node(u: &[f64], nodes: u32) -> u32 {
    bucket(u[PIN_HEIGHT], nodes) as u32
}

/// Deterministic value in `±[0.5, 1]` for a mesh node and coarse cells of the
/// power, hole-diameter and form-factor coordinates. The sign alternates with the
/// node parity, so every change of node moves the value by at least 1.
pub fn hash_noise(node: u32, u: &[f64], seed: u64) -> f64 {
    let h = hash(&[seed, node as u64, bucket(u[7], 8), bucket(u[2], 4), bucket(u[8], 4)]);
    let sign = if node.is_multiple_of(2) { 1.0 } else { -1.0 };
    sign * (0.5 + 0.5 * unit(h))
}

/// Instability added by the preprocessor at normalized point `u`.
pub fn instability(config: &CodeManagerConfig, u: &[f64]) -> f64 {
    let amp = match config.preprocessor {
        Version::V1 => config.instability_scale,
        Version::V2 => V2_AMPLITUDE * config.instability_scale,
    };
    amp * hash_noise(mesh_node(u, config.mesh_nodes), u, config.seed)
}

/// Whether the run at `u` silently fails, and the sign of the corruption.
fn failure(config: &CodeManagerConfig, u: &[f64]) -> Option<f64> {
    let mut words = vec![config.seed ^ 0xFA11];
    words.extend(u.iter().map(|v| v.to_bits()));
    let h = hash(&words);
    (unit(h) < config.failure_rate).then(|| if mix(h) & 1 == 0 { 1.0 } else { -1.0 })
}

/// Run the code manager at physical point `x`.
pub fn run(config: &CodeManagerConfig, space: &InputSpace, x: &[f64]) -> Result<RunRecord> {
    if space.dim() != 11 {
        return Err(Error::Input(format!("the testbed needs the 11-parameter space, got {}", space.dim())));
    }
    if !space.contains(x) {
        return Err(Error::Input("run point lies outside the input space".into()));
    }
    let u: Vec<f64> = space.normalize(x).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let y = smooth_response(&u) + instability(config, &u);
    Ok(match failure(config, &u) {
        None => RunRecord { x: x.to_vec(), y: Some(y), status: RunStatus::Ok, warnings: vec![] },
        Some(sign) => {
            let warnings = vec![FAILURE_WARNING.to_string()];
            match config.postprocessor {
                Version::V1 => RunRecord {
                    x: x.to_vec(),
                    y: Some(y + sign * config.failure_offset),
                    status: RunStatus::Ok,
                    warnings,
                },
                Version::V2 => RunRecord { x: x.to_vec(), y: None, status: RunStatus::Failed, warnings },
            }
        }
    })
}

pub fn run_design(config: &CodeManagerConfig, space: &InputSpace, design: &Design) -> Result<Vec<RunRecord>> {
    config.validate()?;
    (0..design.len()).map(|i| run(config, space, &design.row(i))).collect()
}

/// Runs as written to disk: inputs in physical units, output, warnings and status.
#[derive(Debug, Clone, PartialEq)]
pub struct Base {
    pub records: Vec<RunRecord>,
}

impl Base {
    pub fn from_records(records: Vec<RunRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Only the runs that produced an output.
    pub fn usable(&self) -> Base {
        Base { records: self.records.iter().filter(|r| r.y.is_some()).cloned().collect() }
    }

    /// Inputs normalized to the space and outputs of the usable runs.
    pub fn learning_data(&self, space: &InputSpace) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let usable: Vec<&RunRecord> = self.records.iter().filter(|r| r.y.is_some()).collect();
        if usable.is_empty() {
            return Err(Error::Input("base has no usable runs".into()));
        }
        let d = space.dim();
        let mut x = DMatrix::zeros(usable.len(), d);
        for (i, r) in usable.iter().enumerate() {
            if r.x.len() != d {
                return Err(Error::Input(format!("base row {} has {} inputs, expected {d}", i + 1, r.x.len())));
            }
            for (k, v) in space.normalize(&r.x).into_iter().enumerate() {
                x[(i, k)] = v;
            }
        }
        let y = DVector::from_iterator(usable.len(), usable.iter().map(|r| r.y.unwrap_or(f64::NAN)));
        Ok((x, y))
    }

    pub fn write_csv<W: Write>(&self, space: &InputSpace, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = space.names().to_vec();
        header.extend(["output", "warnings", "status"].map(String::from));
        w.write_record(&header)?;
        for r in &self.records {
            let mut rec: Vec<String> = r.x.iter().map(|v| fmt(*v)).collect();
            rec.push(r.y.map(fmt).unwrap_or_default());
            rec.push(r.warnings.join(";"));
            rec.push(r.status.as_str().into());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a base CSV. `warnings` and `status` columns are optional.
    pub fn read_csv<R: Read>(space: &InputSpace, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |n: &str| headers.iter().position(|h| h == n);
        let cols: Vec<usize> = space
            .names()
            .iter()
            .map(|n| find(n).ok_or_else(|| Error::Input(format!("base file is missing column `{n}`"))))
            .collect::<Result<_>>()?;
        let cy = find("output").ok_or_else(|| Error::Input("base file is missing column `output`".into()))?;
        let (cw, cs) = (find("warnings"), find("status"));
        let mut records = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |c: usize, name: &str| -> Result<f64> {
                let v: f64 = rec.get(c).unwrap_or("").parse().map_err(|_| {
                    Error::Input(format!("base row {}: field `{name}` is not a number", line + 1))
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Input(format!("base row {}: field `{name}` is not finite", line + 1)))
                }
            };
            let x = cols
                .iter()
                .zip(space.names())
                .map(|(&c, n)| num(c, n))
                .collect::<Result<Vec<f64>>>()?;
            let status = match cs.and_then(|c| rec.get(c)).unwrap_or("ok") {
                "ok" | "" => RunStatus::Ok,
                "failed" => RunStatus::Failed,
                other => {
                    return Err(Error::Input(format!("base row {}: unknown status `{other}`", line + 1)))
                }
            };
            let y = match (status, rec.get(cy).unwrap_or("")) {
                (RunStatus::Failed, _) => None,
                (RunStatus::Ok, _) => Some(num(cy, "output")?),
            };
            let warnings = cw
                .and_then(|c| rec.get(c))
                .map(|s| s.split(';').filter(|w| !w.is_empty()).map(String::from).collect())
                .unwrap_or_default();
            records.push(RunRecord { x, y, status, warnings });
        }
        Ok(Self { records })
    }
}

/// Maximin sweeps used for testbed designs.
pub const DESIGN_SWEEPS: usize = 5;

fn base_for(config: &CodeManagerConfig, space: &InputSpace, n: usize, seed: u64) -> Result<Base> {
    let design = lhs_maximin(space, n, seed, DESIGN_SWEEPS)?;
    let (design, _) = feasibility_filter(&design, pin_geometry_feasible);
    let records = run_design(config, space, &design)?;
    // Postprocessor v2 keeps failed runs out of the bases.
    Ok(Base::from_records(records.into_iter().filter(|r| r.status == RunStatus::Ok).collect()))
}

/// Learning and test bases on the fuel-pin space from independent designs.
pub fn build_bases(config: &CodeManagerConfig, n_learn: usize, n_test: usize, seed: u64) -> Result<(Base, Base)> {
    config.validate()?;
    let space = InputSpace::fuel_pin();
    let learn = base_for(config, &space, n_learn, seed)?;
    let test = base_for(config, &space, n_test, mix(seed ^ 0x7E57))?;
    Ok((learn, test))
}

/// Corrupt `count` distinct runs by `±offset`, tag them with `W1`, and return their
/// positions in the base.
pub fn inject_failures(base: &mut Base, count: usize, offset: f64, seed: u64) -> Result<Vec<usize>> {
    let usable: Vec<usize> = (0..base.len()).filter(|&i| base.records[i].y.is_some()).collect();
    if count > usable.len() {
        return Err(Error::Input(format!("cannot inject {count} failures into {} runs", usable.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, usable.len(), count).into_iter().map(|k| usable[k]).collect();
    picked.sort_unstable();
    for &i in &picked {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let r = &mut base.records[i];
        r.y = r.y.map(|y| y + sign * offset);
        if !r.warnings.iter().any(|w| w == FAILURE_WARNING) {
            r.warnings.push(FAILURE_WARNING.into());
        }
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doe::segment_scan;

    fn rand_u(rng: &mut impl Rng) -> Vec<f64> {
        (0..11).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn inert_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let u = rand_u(&mut rng);
            let base = smooth_response(&u);
            for &k in &INERT {
                for v in [0.0, 0.25, 0.5, 0.75, 1.0] {
                    let mut w = u.clone();
                    w[k] = v;
                    assert_eq!(smooth_response(&w), base);
                }
            }
        }
    }

    #[test]
    fn output_spread() {
        let d = lhs_maximin(&InputSpace::unit(11), 10_000, 3, 0).unwrap();
        let y: Vec<f64> = (0..d.len()).map(|i| smooth_response(&d.row(i))).collect();
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let sd = (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64).sqrt();
        assert!((250.0..=450.0).contains(&sd), "sd {sd}");
        assert!((500.0..=700.0).contains(&m), "mean {m}");
    }

    #[test]
    fn sampled_lipschitz_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let a = rand_u(&mut rng);
            let b: Vec<f64> = a.iter().map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)).collect();
            let h = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            assert!((smooth_response(&a) - smooth_response(&b)).abs() <= LIPSCHITZ * h);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let space = InputSpace::fuel_pin();
        let cfg = CodeManagerConfig { failure_rate: 0.5, ..Default::default() };
        let x = space.denormalize(&[0.3; 11]);
        assert_eq!(run(&cfg, &space, &x).unwrap(), run(&cfg, &space, &x).unwrap());
        let mut out = x.clone();
        out[0] = 1000.0;
        assert!(run(&cfg, &space, &out).is_err());
    }

    fn pin_scan(cfg: &CodeManagerConfig) -> (Vec<f64>, Vec<f64>) {
        let space = InputSpace::fuel_pin();
        let mut a = vec![0.4; 11];
        let mut b = a.clone();
        a[PIN_HEIGHT] = 0.21;
        b[PIN_HEIGHT] = 0.44;
        let scan = segment_scan(&space, &a, &b, 97).unwrap();
        let runs = run_design(cfg, &space, &scan).unwrap();
        let y = runs.iter().map(|r| r.y.unwrap()).collect();
        let smooth = (0..97).map(|i| smooth_response(&scan.normalized().row(i).iter().copied().collect::<Vec<_>>())).collect();
        (y, smooth)
    }

    fn max_jump(y: &[f64]) -> f64 {
        y.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn mesh_boundary_jumps() {
        let v1 = CodeManagerConfig { failure_rate: 0.0, ..Default::default() };
        let v2 = CodeManagerConfig { preprocessor: Version::V2, ..v1.clone() };
        let (y1, s) = pin_scan(&v1);
        let (y2, _) = pin_scan(&v2);
        assert!(max_jump(&s) < 0.1 * v1.instability_scale);
        assert!(max_jump(&y1) >= 0.5 * v1.instability_scale);
        assert!(max_jump(&y2) <= 0.5 * max_jump(&y1));
    }

    #[test]
    fn v1_and_v2_differ_only_through_artifacts() {
        let space = InputSpace::fuel_pin();
        let v1 = CodeManagerConfig { failure_rate: 0.0, ..Default::default() };
        let v2 = CodeManagerConfig { preprocessor: Version::V2, postprocessor: Version::V2, ..v1.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let u = rand_u(&mut rng);
            let x = space.denormalize(&u);
            let (a, b) = (run(&v1, &space, &x).unwrap().y.unwrap(), run(&v2, &space, &x).unwrap().y.unwrap());
            let ub: Vec<f64> = space.normalize(&x).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
            let diff = instability(&v1, &ub) - instability(&v2, &ub);
            assert!((a - b - diff).abs() < 1e-9);
        }
    }

    #[test]
    fn postprocessor_handling() {
        let cfg1 = CodeManagerConfig { failure_rate: 0.05, ..Default::default() };
        let cfg2 = CodeManagerConfig { postprocessor: Version::V2, ..cfg1.clone() };
        let (b1, _) = build_bases(&cfg1, 300, 2, 11).unwrap();
        let (b2, _) = build_bases(&cfg2, 300, 2, 11).unwrap();
        let flagged: Vec<&RunRecord> = b1.records.iter().filter(|r| r.warnings.iter().any(|w| w == "W1")).collect();
        assert!(!flagged.is_empty());
        assert_eq!(b2.len(), b1.len() - flagged.len());
        for r in &b2.records {
            assert!(r.y.unwrap().is_finite() && r.warnings.is_empty());
            assert!(b1.records.iter().any(|s| s.x == r.x && s.warnings.is_empty()));
        }
        for r in &flagged {
            assert!(!b2.records.iter().any(|s| s.x == r.x));
        }
    }

    #[test]
    fn failure_count_is_binomial() {
        let cfg = CodeManagerConfig { failure_rate: 0.02, ..Default::default() };
        let space = InputSpace::fuel_pin();
        let d = lhs_maximin(&space, 5000, 4, 0).unwrap();
        let fails = run_design(&cfg, &space, &d).unwrap().iter().filter(|r| !r.warnings.is_empty()).count();
        let (mean, sd) = (100.0, (5000.0f64 * 0.02 * 0.98).sqrt());
        assert!((fails as f64 - mean).abs() <= 4.0 * sd, "{fails}");
    }

    #[test]
    fn small_v2_base_is_finite() {
        let cfg = CodeManagerConfig::with_versions(Version::V2, Version::V2);
        let (learn, test) = build_bases(&cfg, 100, 50, 0).unwrap();
        assert!(learn.len() <= 100 && test.len() <= 50);
        assert!(learn.records.iter().all(|r| r.y.is_some_and(f64::is_finite)));
    }

    #[test]
    fn injected_failures() {
        let cfg = CodeManagerConfig { failure_rate: 0.0, ..Default::default() };
        let (mut b, _) = build_bases(&cfg, 50, 2, 1).unwrap();
        let before = b.clone();
        let idx = inject_failures(&mut b, 2, 400.0, 9).unwrap();
        assert_eq!(idx.len(), 2);
        for i in 0..b.len() {
            let d = b.records[i].y.unwrap() - before.records[i].y.unwrap();
            if idx.contains(&i) {
                assert_eq!(d.abs(), 400.0);
                assert_eq!(b.records[i].warnings, vec!["W1"]);
            } else {
                assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn base_csv_round_trip() {
        let space = InputSpace::fuel_pin();
        let cfg = CodeManagerConfig { failure_rate: 0.2, postprocessor: Version::V2, ..Default::default() };
        let d = lhs_maximin(&space, 30, 2, 1).unwrap();
        let base = Base::from_records(run_design(&cfg, &space, &d).unwrap());
        let mut buf = Vec::new();
        base.write_csv(&space, &mut buf).unwrap();
        let back = Base::read_csv(&space, buf.as_slice()).unwrap();
        assert_eq!(back, base);
        assert_eq!(back.usable().len(), base.records.iter().filter(|r| r.status == RunStatus::Ok).count());
    }
}
