use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use surrogate_core::diagnostics::{self, DiagnosticsReport, Z90};
use surrogate_core::doe::{self, InputSpace};
use surrogate_core::kriging;
use surrogate_core::model::{self, FitConfig, ModelKind, Surrogate};
use surrogate_core::testbed::{self, Base, CodeManagerConfig, RunStatus, Version};
use surrogate_core::Error;

use crate::manifest::{self, FileDigest, RunManifest};
use crate::{Cli, Command, ManagerArgs, SpaceArg};

/// Outputs of a verification run differ from the recorded ones.
#[derive(Debug)]
pub struct Mismatch(pub String);

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Mismatch {}

/// What a command read and wrote, for its manifest.
struct Artifacts {
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

pub fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::Verify { manifest } => verify(&manifest),
        command => {
            let name = command_name(&command);
            let out = out_path(&command).to_path_buf();
            let art = run(command)?;
            let record = RunManifest {
                command: name.into(),
                argv: argv.to_vec(),
                cwd: std::env::current_dir()?.display().to_string(),
                config: art.config,
                seeds: art.seeds,
                inputs: art.inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
                outputs: art.outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
                tool_version: env!("CARGO_PKG_VERSION").into(),
                timestamp: chrono::Utc::now().to_rfc3339(),
            };
            manifest::write(&record, &manifest::manifest_path(&out))
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Design { .. } => "design",
        Command::Run { .. } => "run",
        Command::Fit { .. } => "fit",
        Command::Diagnose { .. } => "diagnose",
        Command::Outliers { .. } => "outliers",
        Command::Scan { .. } => "scan",
        Command::Roc { .. } => "roc",
        Command::Verify { .. } => "verify",
    }
}

fn out_path(c: &Command) -> &Path {
    match c {
        Command::Design { out, .. }
        | Command::Run { out, .. }
        | Command::Fit { out, .. }
        | Command::Diagnose { out, .. }
        | Command::Outliers { out, .. }
        | Command::Scan { out, .. }
        | Command::Roc { out, .. } => out,
        Command::Verify { manifest } => manifest,
    }
}

fn run(command: Command) -> Result<Artifacts> {
    match command {
        Command::Design { space, n, seed, sweeps, filter, out } => design(space, n, seed, sweeps, filter, &out),
        Command::Run { manager, design, out } => run_design(manager, &design, &out),
        Command::Fit { method, base, space, config, seed, out } => fit(&method, &base, space, config, seed, &out),
        Command::Diagnose { model, test, out } => diagnose(&model, &test, &out),
        Command::Outliers { model, base, top_k, out } => outliers(&model, base.as_deref(), top_k, &out),
        Command::Scan { a, b, count, manager, model, svg, out } => scan(&a, &b, count, manager, model.as_deref(), svg, &out),
        Command::Roc { model, test, threshold, svg, out } => roc(&model, &test, threshold, svg, &out),
        Command::Verify { .. } => unreachable!("verify is handled by execute"),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{ext}"))
}

fn load_space(arg: &SpaceArg) -> Result<(InputSpace, Vec<PathBuf>)> {
    match &arg.space {
        Some(p) => {
            let s = InputSpace::read_csv(open(p)?).with_context(|| format!("reading space file {}", p.display()))?;
            Ok((s, vec![p.clone()]))
        }
        None => Ok((InputSpace::fuel_pin(), vec![])),
    }
}

fn manager_config(args: &ManagerArgs) -> Result<(CodeManagerConfig, Vec<PathBuf>)> {
    let (mut cfg, inputs) = match &args.config {
        Some(p) => {
            let cfg: CodeManagerConfig = serde_json::from_reader(open(p)?)
                .map_err(Error::from)
                .with_context(|| format!("parsing manager config {}", p.display()))?;
            (cfg, vec![p.clone()])
        }
        None => (CodeManagerConfig::default(), vec![]),
    };
    if let Some(v) = &args.pre {
        cfg.preprocessor = v.parse::<Version>()?;
    }
    if let Some(v) = &args.post {
        cfg.postprocessor = v.parse::<Version>()?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.failure_rate {
        cfg.failure_rate = r;
    }
    cfg.validate()?;
    Ok((cfg, inputs))
}

fn design(space: SpaceArg, n: usize, seed: u64, sweeps: usize, filter: Option<String>, out: &Path) -> Result<Artifacts> {
    let (space, inputs) = load_space(&space)?;
    let filter = filter.unwrap_or_else(|| {
        if space == InputSpace::fuel_pin() { "pin-geometry" } else { "none" }.to_string()
    });
    let design = doe::lhs_maximin(&space, n, seed, sweeps)?;
    let (design, removed) = match filter.as_str() {
        "none" => (design, 0),
        "pin-geometry" => {
            if space.dim() != 11 {
                return Err(Error::Input("the pin-geometry filter needs the 11-parameter space".into()).into());
            }
            doe::feasibility_filter(&design, doe::pin_geometry_feasible)
        }
        other => return Err(Error::Input(format!("unknown filter `{other}`")).into()),
    };
    let mut w = create(out)?;
    design.write_csv(&space, &mut w)?;
    w.flush()?;
    println!("wrote {} points to {} ({removed} removed by the feasibility filter)", design.len(), out.display());
    Ok(Artifacts {
        config: json!({ "n": n, "sweeps": sweeps, "filter": filter, "space": space }),
        seeds: vec![seed],
        inputs,
        outputs: vec![out.to_path_buf()],
    })
}

fn run_design(manager: ManagerArgs, design_path: &Path, out: &Path) -> Result<Artifacts> {
    let (cfg, mut inputs) = manager_config(&manager)?;
    let space = InputSpace::fuel_pin();
    let design = doe::Design::read_csv(&space, open(design_path)?)
        .with_context(|| format!("reading design {}", design_path.display()))?;
    let records = testbed::run_design(&cfg, &space, &design)?;
    let total = records.len();
    let base = Base::from_records(records.into_iter().filter(|r| r.status == RunStatus::Ok).collect());
    let flagged = base.records.iter().filter(|r| !r.warnings.is_empty()).count();
    let mut w = create(out)?;
    base.write_csv(&space, &mut w)?;
    w.flush()?;
    println!(
        "ran {total} points: {} kept, {} dropped as failed, {flagged} carrying warnings",
        base.len(),
        total - base.len()
    );
    inputs.push(design_path.to_path_buf());
    Ok(Artifacts { config: json!(cfg), seeds: vec![cfg.seed], inputs, outputs: vec![out.to_path_buf()] })
}

fn fit(method: &str, base_path: &Path, space: SpaceArg, config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> Result<Artifacts> {
    let kind: ModelKind = method.parse()?;
    let (space, mut inputs) = load_space(&space)?;
    let mut cfg = match &config {
        Some(p) => {
            inputs.push(p.clone());
            serde_json::from_reader(open(p)?)
                .map_err(Error::from)
                .with_context(|| format!("parsing fit config {}", p.display()))?
        }
        None => FitConfig::default(),
    };
    if let Some(s) = seed {
        cfg.kriging.seed = s;
        cfg.mlp.seed = s;
    }
    let base = Base::read_csv(&space, open(base_path)?).with_context(|| format!("reading base {}", base_path.display()))?;
    inputs.push(base_path.to_path_buf());
    let (x, y) = base.learning_data(&space)?;
    let model = Surrogate::fit(kind, &x, &y, &cfg)?;
    let mut w = create(out)?;
    model::save(&model, &space, &mut w)?;
    w.flush()?;
    let summary = model.summary(&space);
    let summary_path = sibling(out, "summary.txt");
    fs::write(&summary_path, &summary).with_context(|| format!("writing {}", summary_path.display()))?;
    print!("{summary}");
    let seeds = match kind {
        ModelKind::Kriging => vec![cfg.kriging.seed],
        ModelKind::Kernel => vec![],
        ModelKind::Mlp => vec![cfg.mlp.seed],
    };
    Ok(Artifacts {
        config: json!({ "method": kind, "fit": cfg }),
        seeds,
        inputs,
        outputs: vec![out.to_path_buf(), summary_path],
    })
}

fn load_model(path: &Path) -> Result<(Surrogate, InputSpace)> {
    model::load(open(path)?).with_context(|| format!("loading model {}", path.display()))
}

fn test_data(space: &InputSpace, path: &Path) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let base = Base::read_csv(space, open(path)?).with_context(|| format!("reading base {}", path.display()))?;
    Ok(base.learning_data(space)?)
}

fn diagnose(model_path: &Path, test_path: &Path, out: &Path) -> Result<Artifacts> {
    let (model, space) = load_model(model_path)?;
    let (xt, yt) = test_data(&space, test_path)?;
    let (means, sds) = model.predict_many(&xt)?;
    let learn = model.learning_errors()?;
    let report = DiagnosticsReport::compute(
        &means,
        yt.as_slice(),
        sds.as_deref(),
        Z90,
        Some((&learn.errors, model.outputs().as_slice())),
        &[0.9, 0.95],
    )?;
    let report_csv = with_suffix(out, ".report.csv");
    let report_txt = with_suffix(out, ".report.txt");
    let preds_csv = with_suffix(out, ".predictions.csv");
    let mut w = create(&report_csv)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let text = format!("method: {}\ntest points: {}\n{}", model.kind(), yt.len(), report.summary());
    fs::write(&report_txt, &text).with_context(|| format!("writing {}", report_txt.display()))?;
    let mut w = csv_writer(&preds_csv)?;
    let mut header = vec!["index", "true", "predicted"];
    if sds.is_some() {
        header.push("sd");
    }
    w.write_record(&header)?;
    for i in 0..yt.len() {
        let mut rec = vec![(i + 1).to_string(), fmt(yt[i]), fmt(means[i])];
        if let Some(s) = &sds {
            rec.push(fmt(s[i]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    print!("{text}");
    Ok(Artifacts {
        config: json!({ "z": Z90, "gammas": [0.9, 0.95] }),
        seeds: vec![],
        inputs: vec![model_path.to_path_buf(), test_path.to_path_buf()],
        outputs: vec![report_csv, report_txt, preds_csv],
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn outliers(model_path: &Path, base_path: Option<&Path>, top_k: usize, out: &Path) -> Result<Artifacts> {
    let (model, space) = load_model(model_path)?;
    let ranking = model.learning_errors()?.ranking()?;
    let mut inputs = vec![model_path.to_path_buf()];
    let warnings: Option<Vec<String>> = match base_path {
        Some(p) => {
            let base = Base::read_csv(&space, open(p)?)?.usable();
            if base.len() != model.outputs().len() {
                bail!(Error::Input(format!(
                    "base has {} usable runs but the model was fitted on {}",
                    base.len(),
                    model.outputs().len()
                )));
            }
            inputs.push(p.to_path_buf());
            Some(base.records.iter().map(|r| r.warnings.join(";")).collect())
        }
        None => None,
    };
    let lookup = warnings.as_ref().map(|w| move |i: usize| w[i].clone());
    let extra: Option<&dyn Fn(usize) -> String> = lookup.as_ref().map(|f| f as &dyn Fn(usize) -> String);
    let mut w = create(out)?;
    ranking.write_csv(top_k, extra, &mut w)?;
    w.flush()?;
    println!("{:>4} {:>6} {:>12}", "rank", "index", "normalized");
    for (r, &i) in ranking.top(top_k).iter().enumerate().take(20) {
        let tag = warnings.as_ref().map(|w| w[i].as_str()).unwrap_or("");
        println!("{:>4} {:>6} {:>12.3} {tag}", r + 1, i + 1, ranking.normalized[i]);
    }
    Ok(Artifacts {
        config: json!({ "top_k": top_k, "method": model.kind() }),
        seeds: vec![],
        inputs,
        outputs: vec![out.to_path_buf()],
    })
}

#[allow(clippy::too_many_arguments)]
fn scan(a: &[f64], b: &[f64], count: usize, manager: ManagerArgs, model_path: Option<&Path>, svg: bool, out: &Path) -> Result<Artifacts> {
    let (cfg, mut inputs) = manager_config(&manager)?;
    let space = InputSpace::fuel_pin();
    let design = doe::segment_scan(&space, a, b, count)?;
    let runs = testbed::run_design(&cfg, &space, &design)?;
    let t = design.position().expect("scan designs carry positions").to_vec();

    let bands = match model_path {
        None => None,
        Some(p) => {
            inputs.push(p.to_path_buf());
            let (model, mspace) = load_model(p)?;
            if mspace.dim() != space.dim() {
                bail!(Error::Input("model input space does not match the testbed space".into()));
            }
            let points = design.normalized();
            let z = kriging::normal_quantile(0.975);
            let (means, sds): (Vec<f64>, Vec<f64>) = match &model {
                Surrogate::Kriging(km) => {
                    // Condition on the scan runs themselves with the fitted hyperparameters.
                    let ok: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].y.is_some()).collect();
                    let xs = DMatrix::from_fn(ok.len(), space.dim(), |i, k| points[(ok[i], k)]);
                    let ys = DVector::from_iterator(ok.len(), ok.iter().map(|&i| runs[i].y.unwrap_or(f64::NAN)));
                    let local = km.recondition(xs, ys)?;
                    (0..points.nrows())
                        .map(|i| {
                            let row: Vec<f64> = points.row(i).iter().copied().collect();
                            local.predict_new_run(&row).map(|p| (p.mean, p.sd()))
                        })
                        .collect::<surrogate_core::Result<Vec<_>>>()?
                        .into_iter()
                        .unzip()
                }
                other => {
                    let (m, _) = other.predict_many(points)?;
                    let s = other.learning_errors()?.rmse_hat;
                    let n = m.len();
                    (m, vec![s; n])
                }
            };
            Some((means, sds, z))
        }
    };

    let mut w = csv_writer(out)?;
    let mut header: Vec<String> = vec!["t".into()];
    header.extend(space.names().iter().cloned());
    header.extend(["output", "warnings", "status"].map(String::from));
    if bands.is_some() {
        header.extend(["predicted", "lower95", "upper95"].map(String::from));
    }
    w.write_record(&header)?;
    for (i, r) in runs.iter().enumerate() {
        let mut rec = vec![fmt(t[i])];
        rec.extend(r.x.iter().map(|v| fmt(*v)));
        rec.push(r.y.map(fmt).unwrap_or_default());
        rec.push(r.warnings.join(";"));
        rec.push(r.status.as_str().into());
        if let Some((m, s, z)) = &bands {
            rec.extend([fmt(m[i]), fmt(m[i] - z * s[i]), fmt(m[i] + z * s[i])]);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut outputs = vec![out.to_path_buf()];

    let ys: Vec<(f64, f64)> = runs.iter().zip(&t).filter_map(|(r, t)| r.y.map(|y| (*t, y))).collect();
    let jump = ys.windows(2).map(|p| (p[1].1 - p[0].1).abs()).fold(0.0, f64::max);
    println!("{} points, max consecutive jump {jump:.3}", runs.len());
    if svg {
        let mut series: Vec<(&str, Vec<(f64, f64)>)> = vec![("code", ys.clone())];
        if let Some((m, s, z)) = &bands {
            series.push(("prediction", t.iter().zip(m).map(|(a, b)| (*a, *b)).collect()));
            series.push(("lower 95%", t.iter().enumerate().map(|(i, a)| (*a, m[i] - z * s[i])).collect()));
            series.push(("upper 95%", t.iter().enumerate().map(|(i, a)| (*a, m[i] + z * s[i])).collect()));
        }
        let refs: Vec<(&str, &[(f64, f64)])> = series.iter().map(|(n, p)| (*n, p.as_slice())).collect();
        let path = sibling(out, "svg");
        fs::write(&path, diagnostics::svg_plot("segment scan", "position on segment", "output", &refs))
            .with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path);
    }
    Ok(Artifacts {
        config: json!({ "a": a, "b": b, "count": count, "manager": cfg }),
        seeds: vec![cfg.seed],
        inputs,
        outputs,
    })
}

fn roc(model_path: &Path, test_path: &Path, threshold: f64, svg: bool, out: &Path) -> Result<Artifacts> {
    let (model, space) = load_model(model_path)?;
    let (xt, yt) = test_data(&space, test_path)?;
    let (means, sds) = model.classifier_sds(&xt)?;
    let curve = diagnostics::roc(&means, &sds, yt.as_slice(), &diagnostics::default_tau_grid(), threshold)?;
    let mut w = create(out)?;
    curve.write_csv(&mut w)?;
    w.flush()?;
    let mut outputs = vec![out.to_path_buf()];
    if svg {
        let path = sibling(out, "svg");
        fs::write(&path, curve.to_svg()).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path);
    }
    println!("AUC {:.4}", curve.auc);
    Ok(Artifacts {
        config: json!({ "threshold": threshold, "method": model.kind(), "tau_points": curve.tau_grid.len() }),
        seeds: vec![],
        inputs: vec![model_path.to_path_buf(), test_path.to_path_buf()],
        outputs,
    })
}

fn verify(path: &Path) -> Result<()> {
    let record = manifest::read(path)?;
    let cwd = PathBuf::from(&record.cwd);
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            cwd.join(p)
        }
    };
    let mut problems = Vec::new();
    for input in &record.inputs {
        let now = manifest::sha256_file(&resolve(&input.path))?;
        if now != input.sha256 {
            problems.push(format!("input {} changed since the run", input.path));
        }
    }

    let scratch = tempfile::tempdir()?;
    let mut argv = record.argv.clone();
    let (pos, inline) = manifest::out_argument(&argv)?;
    let old_out = match inline {
        Some(prefix) => argv[pos][prefix.len()..].to_string(),
        None => argv[pos].clone(),
    };
    let old_out = resolve(&old_out);
    let file_name = old_out.file_name().ok_or_else(|| anyhow!("recorded --out has no file name"))?;
    let new_out = scratch.path().join(file_name);
    argv[pos] = match inline {
        Some(prefix) => format!("{prefix}{}", new_out.display()),
        None => new_out.display().to_string(),
    };
    // Resolve the remaining relative paths against the recorded directory.
    let previous = std::env::current_dir()?;
    std::env::set_current_dir(&cwd).with_context(|| format!("entering {}", cwd.display()))?;
    let cli = <Cli as clap::Parser>::try_parse_from(std::iter::once("surrogate".to_string()).chain(argv.iter().cloned()));
    let result = cli.map_err(anyhow::Error::from).and_then(|c: Cli| run(c.command));
    std::env::set_current_dir(previous)?;
    result.context("re-executing the manifest")?;

    for output in &record.outputs {
        let recorded = resolve(&output.path);
        let name = recorded.file_name().ok_or_else(|| anyhow!("output {} has no file name", output.path))?;
        let fresh = scratch.path().join(name);
        let status = match manifest::sha256_file(&fresh) {
            Ok(h) if h == output.sha256 => "identical",
            Ok(_) => {
                problems.push(format!("output {} differs", output.path));
                "DIFFERS"
            }
            Err(_) => {
                problems.push(format!("output {} was not produced", output.path));
                "MISSING"
            }
        };
        println!("{status:>9}  {}", output.path);
    }
    if problems.is_empty() {
        println!("verified {} outputs of `{}`", record.outputs.len(), record.command);
        Ok(())
    } else {
        Err(Mismatch(problems.join("; ")).into())
    }
}
