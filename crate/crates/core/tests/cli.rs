use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fdrhs::io::{read_fit, read_labels, read_metrics, read_truth};

fn fdrhs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdrhs"))
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = fdrhs(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_phantom(dir: &Path) -> PathBuf {
    ok(dir, &["--out", "ph", "--seed", "4", "synth", "--dims", "12,12,12", "--n-per-class", "20"]);
    dir.join("ph/run.manifest")
}

#[test]
fn synth_writes_consistent_files() {
    let tmp = tempfile::tempdir().unwrap();
    small_phantom(tmp.path());
    let ph = tmp.path().join("ph");
    let labels = read_labels(&ph.join("labels.csv")).unwrap();
    assert_eq!(labels.len(), 40);
    let data = std::fs::read_to_string(ph.join("data.csv")).unwrap();
    assert_eq!(data.lines().count(), 1 + 40);
    let truth = read_truth(&ph.join("truth.csv")).unwrap();
    assert!(!truth.lesion.is_empty() && !truth.bias.is_empty());
}

#[test]
fn fit_gamma_nesting_and_reduction() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_phantom(dir);
    let m = "ph/run.manifest";
    ok(dir, &["--manifest", m, "--out", "g2", "fit", "--gamma", "0.2"]);
    ok(dir, &["--manifest", m, "--out", "g5", "fit", "--gamma", "0.5"]);
    let narrow = read_fit(&dir.join("g2/fit.csv")).unwrap().selected();
    let wide = read_fit(&dir.join("g5/fit.csv")).unwrap().selected();
    assert!(narrow.iter().all(|i| wide.contains(i)));

    ok(dir, &["--manifest", m, "--out", "big", "fit", "--lambda", "1e4"]);
    let beta: Vec<f64> = read_fit(&dir.join("big/fit.csv"))
        .unwrap()
        .rows
        .iter()
        .map(|r| r.beta)
        .collect();
    let mean = beta.iter().sum::<f64>() / beta.len() as f64;
    let spread = beta.iter().map(|b| (b - mean).abs()).fold(0.0, f64::max);
    assert!(spread <= 1e-3, "spread {spread}");
}

#[test]
fn localfdr_baseline_matches_constant_prior_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_phantom(dir);
    let m = "ph/run.manifest";
    ok(dir, &["--manifest", m, "--out", "r", "fit", "--constant-prior"]);
    ok(dir, &["--manifest", m, "--out", "r", "baseline", "--method", "localfdr"]);
    let fit = read_fit(&dir.join("r/fit.csv")).unwrap();
    let base = read_fit(&dir.join("r/baseline_localfdr.csv")).unwrap();
    assert_eq!(fit.selected(), base.selected());
    for (a, b) in fit.rows.iter().zip(&base.rows) {
        assert!((a.lfdr - b.lfdr).abs() <= 1e-12);
    }
}

#[test]
fn null_phantom_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        dir,
        &[
            "--out", "null", "--seed", "11", "synth", "--dims", "22,22,22", "--lesion-effect", "0", "--no-shell",
        ],
    );
    let m = "null/run.manifest";
    ok(dir, &["--manifest", m, "--out", "r", "baseline", "--method", "ttest"]);
    ok(dir, &["--manifest", m, "--out", "r", "baseline", "--method", "bh", "--q", "1e-9"]);
    let t = read_fit(&dir.join("r/baseline_ttest.csv")).unwrap().selected().len();
    assert!((432..=632).contains(&t), "t-test selected {t}");
    assert!(read_fit(&dir.join("r/baseline_bh.csv")).unwrap().selected().is_empty());
}

#[test]
fn metrics_on_identical_folds_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_phantom(dir);
    let m = "ph/run.manifest";
    ok(dir, &["--manifest", m, "--out", "r", "fit"]);
    ok(
        dir,
        &["--manifest", m, "--out", "r", "metrics", "--fit", "r/fit.csv", "--fit", "r/fit.csv", "--fit", "r/fit.csv"],
    );
    let rows = read_metrics(&dir.join("r/metrics.csv")).unwrap();
    let get = |metric: &str, group: &str| {
        rows.iter()
            .find(|r| r.metric == metric && r.group == group)
            .map(|r| r.value)
            .unwrap()
    };
    if !read_fit(&dir.join("r/fit.csv")).unwrap().selected().is_empty() {
        assert_eq!(get("mdc", "all"), 1.0);
    }
    assert!(get("fdp", "all") >= 0.0 && get("power", "all") <= 1.0);
}

#[test]
fn render_slices_recover_selection() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_phantom(dir);
    let m = "ph/run.manifest";
    ok(dir, &["--manifest", m, "--out", "r", "fit", "--gamma", "0.5"]);
    let table = read_fit(&dir.join("r/fit.csv")).unwrap();
    let mut recovered = Vec::new();
    for k in 0..12 {
        let s = k.to_string();
        ok(dir, &["--manifest", m, "--out", "r", "render", "--axis", "k", "--slice", &s]);
        let pgm = std::fs::read(dir.join(format!("r/slice_k{k}.pgm"))).unwrap();
        let header = b"P5\n12 12\n255\n";
        assert_eq!(pgm.len(), header.len() + 144);
        assert_eq!(&pgm[..header.len()], header);
        for (idx, &v) in pgm[header.len()..].iter().enumerate() {
            if v == 255 || v == 160 {
                recovered.push([idx % 12, idx / 12, k]);
            }
        }
    }
    let mut expected: Vec<[usize; 3]> = table.selected().into_iter().map(|i| table.coords[i]).collect();
    expected.sort();
    recovered.sort();
    assert_eq!(recovered, expected);
}

#[test]
fn singleton_gridsearch_matches_direct_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_phantom(dir);
    let m = "ph/run.manifest";
    ok(
        dir,
        &[
            "--manifest", m, "--out", "r", "gridsearch", "--lambda-pro", "1", "--lambda-les", "0.5",
            "--lambda-proles", "2", "--gamma", "0.2", "--target-power", "0",
        ],
    );
    let report = std::fs::read_to_string(dir.join("r/gridsearch.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 2);
    let objective: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();

    ok(dir, &["--manifest", m, "--out", "d", "fit", "--lambda-pro", "1", "--lambda-les", "0.5", "--lambda-proles", "2"]);
    ok(dir, &["--manifest", m, "--out", "d", "metrics", "--fit", "d/fit.csv"]);
    let rows = read_metrics(&dir.join("d/metrics.csv")).unwrap();
    let fdp = rows.iter().find(|r| r.metric == "fdp" && r.group == "all").unwrap().value;
    assert_eq!(objective, fdp);
}

#[test]
fn gridsearch_row_count_is_grid_size() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_phantom(dir);
    ok(
        dir,
        &[
            "--manifest", "ph/run.manifest", "--out", "r", "--jobs", "2", "gridsearch", "--lambda-pro", "0.5,1",
            "--lambda-les", "0.5", "--lambda-proles", "1,2,3", "--gamma", "0.1,0.3",
        ],
    );
    let report = std::fs::read_to_string(dir.join("r/gridsearch.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 2 * 3 * 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(fdrhs(dir, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(fdrhs(dir, &["fit", "--cv-folds", "5"]).status.code(), Some(1));
    small_phantom(dir);
    std::fs::write(dir.join("ph/labels.csv"), "subject_id,label\n0,7\n").unwrap();
    assert_eq!(fdrhs(dir, &["--manifest", "ph/run.manifest", "--out", "r", "fit"]).status.code(), Some(2));

    small_phantom(dir);
    ok(dir, &["--manifest", "ph/run.manifest", "--out", "r", "fit"]);
    let out = fdrhs(dir, &["--manifest", "ph/run.manifest", "--out", "r", "render", "--slice", "12"]);
    assert!(!out.status.success());
}

#[test]
fn best_grid_row_respects_penalty_ordering() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["--out", "ph", "synth"]);
    ok(
        dir,
        &[
            "--manifest", "ph/run.manifest", "--out", "r", "gridsearch", "--lambda-pro", "0.5,2", "--lambda-les",
            "0.5,2", "--lambda-proles", "0.5,2", "--gamma", "0.2",
        ],
    );
    let report = std::fs::read_to_string(dir.join("r/gridsearch.csv")).unwrap();
    let best: Vec<f64> = report.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    let (pro, les, proles) = (best[0], best[1], best[2]);
    assert!(les <= pro && pro <= proles, "best row {best:?}");
}
