use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const FAST_FIT: &str = r#"{
  "kriging": { "subsample_size": 60, "restarts": 2, "max_evals": 300, "seed": 3 },
  "mlp": { "restarts": 2, "epochs": 300, "seed": 3 },
  "mlp_widths": [4, 8]
}"#;

fn surrogate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surrogate"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = surrogate(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn rows(path: PathBuf) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

/// Learning and test bases from the v2 code manager, plus a fast fit config.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["design", "--n", "50", "--seed", "1", "--out", "learn_design.csv"]);
    ok(d, &["design", "--n", "40", "--seed", "2", "--out", "test_design.csv"]);
    for (design, base) in [("learn_design.csv", "learn.csv"), ("test_design.csv", "test.csv")] {
        ok(d, &["run", "--pre", "v2", "--post", "v2", "--design", design, "--out", base]);
    }
    fs::write(d.join("fit.json"), FAST_FIT).unwrap();
    dir
}

#[test]
fn design_has_header_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["design", "--n", "50", "--seed", "9", "--out", "a.csv"]);
    ok(d, &["design", "--n", "50", "--seed", "9", "--out", "b.csv"]);
    let a = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.csv")).unwrap());
    assert_eq!(a.lines().count(), 51);
    assert!(a.lines().next().unwrap().starts_with("cycle_length,plutonium_content"));
    assert!(d.join("a.manifest.json").exists());
}

#[test]
fn malformed_space_is_an_input_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("space.csv"), "name,min,max\npower,1,2\nradius,0.1,wide\n").unwrap();
    let out = surrogate(d, &["design", "--space", "space.csv", "--n", "10", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("max") && err.contains("radius"), "{err}");
}

#[test]
fn custom_space_design_stays_inside_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("space.csv"), "name,min,max\np,-1,1\nq,10,20\n").unwrap();
    ok(d, &["design", "--space", "space.csv", "--n", "12", "--out", "x.csv"]);
    let r = rows(d.join("x.csv"));
    assert_eq!(r.len(), 12);
    for row in r {
        let p: f64 = row[0].parse().unwrap();
        let q: f64 = row[1].parse().unwrap();
        assert!((-1.0..=1.0).contains(&p) && (10.0..=20.0).contains(&q));
    }
}

#[test]
fn postprocessor_versions_mark_or_drop_failed_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["design", "--n", "60", "--seed", "4", "--out", "d.csv"]);
    let run = |name: &str, v: &str| {
        ok(d, &["run", "--pre", v, "--post", v, "--failure-rate", "0.2", "--design", "d.csv", "--out", name]);
        rows(d.join(name))
    };
    let v1 = run("v1.csv", "v1");
    let v2 = run("v2.csv", "v2");
    let flagged = v1.iter().filter(|r| r[12] == "W1").count();
    assert_eq!(v1.len(), 60);
    assert!(flagged > 0);
    assert_eq!(v2.len(), 60 - flagged);
    assert!(v2.iter().all(|r| r[12].is_empty() && r[13] == "ok"));
    // Same inputs, different code versions: outputs move.
    assert!(v1.iter().zip(&v2).any(|(a, b)| a[11] != b[11]));

    let again = run("v1_again.csv", "v1");
    assert_eq!(v1, again);
    assert_eq!(fs::read(d.join("v1.csv")).unwrap(), fs::read(d.join("v1_again.csv")).unwrap());
}

#[test]
fn fit_summaries_report_their_parameters() {
    let dir = workspace();
    let d = dir.path();
    let k = ok(d, &["fit", "--method", "kriging", "--base", "learn.csv", "--config", "fit.json", "--out", "k.json"]);
    for key in ["sigma", "ell[cycle_length]", "ell[volume_of_expansion]", "delta"] {
        assert!(k.contains(key), "{k}");
    }
    assert_eq!(fs::read_to_string(d.join("k.summary.txt")).unwrap(), k);

    let g = ok(d, &["fit", "--method", "kernel", "--base", "learn.csv", "--out", "g.json"]);
    assert!(g.contains("order m: 2") && g.contains("lambda:"), "{g}");

    let m = ok(d, &["fit", "--method", "mlp", "--base", "learn.csv", "--config", "fit.json", "--out", "m.json"]);
    assert!(m.contains("hidden width:") && m.contains("restart held-out rmse:"), "{m}");

    let out = surrogate(d, &["fit", "--method", "spline", "--base", "learn.csv", "--out", "s.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diagnose_writes_the_criteria_table() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["fit", "--method", "kriging", "--base", "learn.csv", "--config", "fit.json", "--out", "k.json"]);
    ok(d, &["fit", "--method", "kernel", "--base", "learn.csv", "--out", "g.json"]);
    ok(d, &["diagnose", "--model", "k.json", "--test", "test.csv", "--out", "kd"]);
    ok(d, &["diagnose", "--model", "g.json", "--test", "test.csv", "--out", "gd"]);

    let names = |p: &str| -> Vec<String> { rows(d.join(p)).into_iter().map(|r| r[0].clone()).collect() };
    let k = names("kd.report.csv");
    for c in ["rmse", "q2", "q_0.9", "q_0.95", "cir", "rmse_hat", "q2_hat"] {
        assert!(k.iter().any(|n| n == c), "{c} missing from {k:?}");
    }
    assert!(!names("gd.report.csv").iter().any(|n| n == "cir"));

    let n_test = rows(d.join("test.csv")).len();
    let preds = rows(d.join("kd.predictions.csv"));
    assert_eq!(preds.len(), n_test);
    assert_eq!(preds[0].len(), 4);
    assert_eq!(rows(d.join("gd.predictions.csv"))[0].len(), 3);
}

#[test]
fn constant_test_outputs_are_a_numerical_failure() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["fit", "--method", "kernel", "--base", "learn.csv", "--out", "g.json"]);
    let text = fs::read_to_string(d.join("test.csv")).unwrap();
    let mut flat = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            flat.push_str(line);
        } else {
            let mut f: Vec<&str> = line.split(',').collect();
            f[11] = "500";
            flat.push_str(&f.join(","));
        }
        flat.push('\n');
    }
    fs::write(d.join("flat.csv"), flat).unwrap();
    let out = surrogate(d, &["diagnose", "--model", "g.json", "--test", "flat.csv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shifted_runs_top_the_outlier_ranking() {
    let dir = workspace();
    let d = dir.path();
    // Corrupt two learning runs the way a silent code failure would.
    let text = fs::read_to_string(d.join("learn.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    for i in [7, 31] {
        let mut f: Vec<String> = lines[i].split(',').map(String::from).collect();
        f[11] = (f[11].parse::<f64>().unwrap() + 400.0).to_string();
        lines[i] = f.join(",");
    }
    fs::write(d.join("bad.csv"), lines.join("\n") + "\n").unwrap();

    for method in ["kriging", "kernel"] {
        let model = format!("{method}.json");
        ok(d, &["fit", "--method", method, "--base", "bad.csv", "--config", "fit.json", "--out", &model]);
        ok(d, &["outliers", "--model", &model, "--base", "bad.csv", "--top-k", "2", "--out", "top.csv"]);
        let top = rows(d.join("top.csv"));
        let mut idx: Vec<&str> = top.iter().map(|r| r[1].as_str()).collect();
        idx.sort();
        assert_eq!(idx, ["31", "7"], "{method}");
        ok(d, &["outliers", "--model", &model, "--top-k", "0", "--out", "all.csv"]);
        assert_eq!(rows(d.join("all.csv")).len(), lines.len() - 1);
    }
}

fn max_jump(path: PathBuf) -> f64 {
    let y: Vec<f64> = rows(path).iter().filter_map(|r| r[12].parse().ok()).collect();
    y.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
}

#[test]
fn scans_show_the_instability_only_before_the_fix() {
    let dir = workspace();
    let d = dir.path();
    let a = "0.5,0.2,0.3,0.7,0.4,0.4,0.05,0.4,0.5,0.5,0.5";
    let b = "0.5,0.2,0.3,0.7,0.4,0.4,0.95,0.6,0.5,0.5,0.5";
    ok(d, &["fit", "--method", "kriging", "--base", "learn.csv", "--config", "fit.json", "--out", "k.json"]);
    ok(d, &["scan", "--a", a, "--b", b, "--pre", "v1", "--post", "v1", "--model", "k.json", "--svg", "--out", "s1.csv"]);
    ok(d, &["scan", "--a", a, "--b", b, "--pre", "v2", "--post", "v2", "--out", "s2.csv"]);

    let s1 = rows(d.join("s1.csv"));
    assert_eq!(s1.len(), 97);
    let header = fs::read_to_string(d.join("s1.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with("predicted,lower95,upper95"));
    for r in &s1 {
        let (lo, m, hi): (f64, f64, f64) = (r[16].parse().unwrap(), r[15].parse().unwrap(), r[17].parse().unwrap());
        assert!(lo <= m && m <= hi);
    }
    assert!(d.join("s1.svg").exists());
    assert_eq!(rows(d.join("s2.csv"))[0].len(), 15);

    let (j1, j2) = (max_jump(d.join("s1.csv")), max_jump(d.join("s2.csv")));
    assert!(j1 > 1.5 * j2, "v1 jump {j1}, v2 jump {j2}");
}

#[test]
fn roc_prints_auc_and_rejects_degenerate_classes() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["fit", "--method", "kernel", "--base", "learn.csv", "--out", "g.json"]);
    let median = {
        let mut y: Vec<f64> = rows(d.join("test.csv")).iter().map(|r| r[11].parse().unwrap()).collect();
        y.sort_by(f64::total_cmp);
        y[y.len() / 2].to_string()
    };
    let text = ok(d, &["roc", "--model", "g.json", "--test", "test.csv", "--threshold", &median, "--svg", "--out", "roc.csv"]);
    let auc = text.lines().find_map(|l| l.strip_prefix("AUC ")).expect("AUC line");
    assert_eq!(auc.len(), 6, "{auc}");
    let v: f64 = auc.parse().unwrap();
    assert!((0.0..=1.0).contains(&v));
    assert!(rows(d.join("roc.csv")).len() >= 402);
    assert!(d.join("roc.svg").exists());

    let out = surrogate(d, &["roc", "--model", "g.json", "--test", "test.csv", "--threshold=-1e9", "--out", "r.csv"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));
}

#[test]
fn verify_reproduces_outputs_and_catches_changed_inputs() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["fit", "--method", "kriging", "--base", "learn.csv", "--config", "fit.json", "--out", "models/k.json"]);
    let v = ok(d, &["verify", "models/k.manifest.json"]);
    assert!(v.contains("identical  models/k.json"), "{v}");
    ok(d, &["verify", "test.manifest.json"]);

    // Verification works from any directory.
    let elsewhere = tempfile::tempdir().unwrap();
    let path = d.join("learn_design.manifest.json");
    ok(elsewhere.path(), &["verify", path.to_str().unwrap()]);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("models/k.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "fit");
    assert_eq!(manifest["seeds"][0], 3);
    assert!(manifest["inputs"].as_array().unwrap().len() == 2);

    let mut text = fs::read_to_string(d.join("test_design.csv")).unwrap();
    text.push('\n');
    fs::write(d.join("test_design.csv"), text).unwrap();
    let out = surrogate(d, &["verify", "test.manifest.json"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}
