use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn normgauge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normgauge")).args(args).output().expect("spawn normgauge")
}

fn ok(args: &[&str]) -> Output {
    let out = normgauge(args);
    assert!(
        out.status.success(),
        "normgauge {:?} failed ({:?}): {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

/// Writes a synthetic cohort and returns (covariates, features).
fn synth(dir: &Path, spec: &str) -> (PathBuf, PathBuf) {
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, spec).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--spec", s(&spec_path), "--out", s(&data)]);
    (data.join("covariates.csv"), data.join("features.csv"))
}

const SMALL: &str = r#"{"groups": {"A": 60, "B": 60, "W": 60}, "n_regions": 4, "seed": 3}"#;

fn fit(cov: &Path, feat: &Path, out: &Path, covariates: &str) {
    ok(&[
        "fit",
        "--covariates-file",
        s(cov),
        "--features-file",
        s(feat),
        "--out",
        s(out),
        "--covariates",
        covariates,
    ]);
}

fn schema_columns(model: &Path) -> Vec<String> {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(model.join("model.json")).unwrap()).unwrap();
    v["schema"]["columns"].as_array().unwrap().iter().map(|c| c.as_str().unwrap().to_string()).collect()
}

#[test]
fn covariate_set_selects_schema_columns() {
    let tmp = TempDir::new().unwrap();
    let (cov, feat) = synth(tmp.path(), SMALL);
    fit(&cov, &feat, &tmp.path().join("plain"), "age,sex");
    fit(&cov, &feat, &tmp.path().join("race"), "age,sex,race");

    let plain = schema_columns(&tmp.path().join("plain/model"));
    assert!(plain.iter().all(|c| !c.starts_with("race")), "{plain:?}");
    let race = schema_columns(&tmp.path().join("race/model"));
    assert!(race.contains(&"race_A".to_string()) && race.contains(&"race_B".to_string()), "{race:?}");
    assert!(!race.contains(&"race_W".to_string()));
}

#[test]
fn missing_features_file_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let (cov, _) = synth(tmp.path(), SMALL);
    let missing = tmp.path().join("nope.csv");
    let out = normgauge(&[
        "fit",
        "--covariates-file",
        s(&cov),
        "--features-file",
        s(&missing),
        "--out",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
    assert!(!tmp.path().join("run/model").exists());
}

#[test]
fn region_mismatch_is_a_schema_error() {
    let tmp = TempDir::new().unwrap();
    let (cov, feat) = synth(tmp.path(), SMALL);
    fit(&cov, &feat, &tmp.path().join("run"), "age,sex");

    let text = fs::read_to_string(&feat).unwrap();
    let renamed = text.replacen("region_003", "region_xyz", 1);
    let other = tmp.path().join("other.csv");
    fs::write(&other, renamed).unwrap();
    let out = normgauge(&[
        "evaluate",
        "--model",
        s(&tmp.path().join("run/model")),
        "--covariates-file",
        s(&cov),
        "--features-file",
        s(&other),
        "--out",
        s(&tmp.path().join("eval")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("region_003"));
}

#[test]
fn unseen_site_level_is_a_schema_error() {
    let tmp = TempDir::new().unwrap();
    let spec = r#"{"groups": {"A": 40, "B": 40, "W": 40}, "n_regions": 2, "sites": ["s1", "s2"], "seed": 1}"#;
    let (cov, feat) = synth(tmp.path(), spec);
    fit(&cov, &feat, &tmp.path().join("run"), "age,sex,site");

    let text = fs::read_to_string(&cov).unwrap();
    let other = tmp.path().join("cov2.csv");
    fs::write(&other, text.replace(",s2", ",s9")).unwrap();
    let out = normgauge(&[
        "evaluate",
        "--model",
        s(&tmp.path().join("run/model")),
        "--covariates-file",
        s(&other),
        "--features-file",
        s(&feat),
        "--out",
        s(&tmp.path().join("eval")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("s9"));
}

#[test]
fn evaluating_the_training_split_reproduces_fit_metrics() {
    let tmp = TempDir::new().unwrap();
    let (cov, feat) = synth(tmp.path(), SMALL);
    let run = tmp.path().join("run");
    fit(&cov, &feat, &run, "age,sex,race");
    ok(&[
        "evaluate",
        "--model",
        s(&run.join("model")),
        "--covariates-file",
        s(&cov),
        "--features-file",
        s(&feat),
        "--split",
        s(&run.join("split.csv")),
        "--subset",
        "train",
        "--out",
        s(&tmp.path().join("eval")),
    ]);
    assert_eq!(
        fs::read_to_string(run.join("fit_metrics.csv")).unwrap(),
        fs::read_to_string(tmp.path().join("eval/metrics.csv")).unwrap()
    );
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let (cov, feat) = synth(tmp.path(), SMALL);
    let first = tmp.path().join("first");
    ok(&[
        "fit",
        "--covariates-file",
        s(&cov),
        "--features-file",
        s(&feat),
        "--out",
        s(&first),
        "--train-fraction",
        "0.7",
        "--seed",
        "11",
    ]);
    let second = tmp.path().join("second");
    ok(&["fit", "--config", s(&first.join("run_config.json")), "--out", s(&second)]);
    for f in ["fit_metrics.csv", "split.csv", "model/regions.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

/// Fit + evaluate on a held-out split; returns the evaluation directory.
fn fit_and_evaluate(dir: &Path, cov: &Path, feat: &Path, covariates: &str) -> PathBuf {
    let run = dir.join("fit");
    fit(cov, feat, &run, covariates);
    let eval = dir.join("eval");
    ok(&[
        "evaluate",
        "--model",
        s(&run.join("model")),
        "--covariates-file",
        s(cov),
        "--features-file",
        s(feat),
        "--split",
        s(&run.join("split.csv")),
        "--subset",
        "test",
        "--out",
        s(&eval),
    ]);
    eval
}

#[test]
fn file_contracts() {
    let tmp = TempDir::new().unwrap();
    let (cov, feat) = synth(tmp.path(), SMALL);
    let eval = fit_and_evaluate(tmp.path(), &cov, &feat, "age,sex");
    let regions = "region_000,region_001,region_002,region_003";
    assert_eq!(header(&eval.join("deviations.csv")), format!("id,{regions}"));
    assert_eq!(header(&eval.join("errors.csv")), format!("id,{regions}"));
    assert_eq!(header(&eval.join("metrics.csv")), "region,explained_variance,msll,skew,kurtosis");

    let audit = tmp.path().join("audit");
    ok(&[
        "audit",
        "--deviations",
        s(&eval.join("deviations.csv")),
        "--errors",
        s(&eval.join("errors.csv")),
        "--covariates-file",
        s(&cov),
        "--out",
        s(&audit),
    ]);
    assert_eq!(header(&audit.join("audit_tests.csv")), "contrast,metric,region,t,p,fdr_flag");
    assert_eq!(header(&audit.join("table4.csv")), "contrast,metric,n_regions,n_significant,pct_significant");
    assert!(audit.join("audit_summary.csv").is_file() && audit.join("parity.json").is_file());

    let clf = tmp.path().join("clf");
    ok(&[
        "classify",
        "--deviations",
        s(&eval.join("deviations.csv")),
        "--covariates-file",
        s(&cov),
        "--folds",
        "3",
        "--out",
        s(&clf),
    ]);
    assert_eq!(header(&clf.join("clf_metrics.csv")), "class,fold,auc,precision,recall,f");
    assert_eq!(header(&clf.join("roc_points.csv")), "class,fold,fpr,tpr");
    assert_eq!(header(&clf.join("confusion.csv")), "fold,true_class,A,B,W");
    assert!(!clf.join("roc.svg").exists());
    for dir in [&eval, &audit, &clf] {
        assert!(dir.join("run_config.json").is_file());
    }
}

#[test]
fn unknown_contrast_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let (cov, feat) = synth(tmp.path(), SMALL);
    let eval = fit_and_evaluate(tmp.path(), &cov, &feat, "age,sex");
    let out = normgauge(&[
        "audit",
        "--deviations",
        s(&eval.join("deviations.csv")),
        "--covariates-file",
        s(&cov),
        "--contrasts",
        "W-Q",
        "--out",
        s(&tmp.path().join("audit")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains('Q'));
}

#[test]
fn classify_rejects_classes_smaller_than_fold_count() {
    let tmp = TempDir::new().unwrap();
    let (cov, feat) = synth(tmp.path(), SMALL);
    let eval = fit_and_evaluate(tmp.path(), &cov, &feat, "age,sex");
    // 12 held-out subjects per group
    let out = normgauge(&[
        "classify",
        "--deviations",
        s(&eval.join("deviations.csv")),
        "--covariates-file",
        s(&cov),
        "--folds",
        "20",
        "--out",
        s(&tmp.path().join("clf")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("folds"));
}

#[test]
fn null_data_audit_stays_near_nominal() {
    let tmp = TempDir::new().unwrap();
    let spec = r#"{"groups": {"A": 300, "B": 300, "W": 300}, "n_regions": 20, "seed": 8}"#;
    let (cov, feat) = synth(tmp.path(), spec);
    let eval = fit_and_evaluate(tmp.path(), &cov, &feat, "age,sex");
    let audit = tmp.path().join("audit");
    ok(&[
        "audit",
        "--deviations",
        s(&eval.join("deviations.csv")),
        "--errors",
        s(&eval.join("errors.csv")),
        "--covariates-file",
        s(&cov),
        "--out",
        s(&audit),
    ]);
    let text = fs::read_to_string(audit.join("table4.csv")).unwrap();
    for line in text.lines().skip(1) {
        let pct: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(pct <= 7.0, "{line}");
    }
}

#[test]
fn separable_groups_are_classified() {
    let tmp = TempDir::new().unwrap();
    // per-region group offsets of 3 noise sd
    let spec = r#"{"groups": {"A": 150, "B": 150, "W": 150}, "n_regions": 10, "noise_sd": 0.25,
                   "region_offset_sd": 0.75, "seed": 4}"#;
    let (cov, feat) = synth(tmp.path(), spec);
    let eval = fit_and_evaluate(tmp.path(), &cov, &feat, "age,sex");
    let clf = tmp.path().join("clf");
    ok(&[
        "classify",
        "--deviations",
        s(&eval.join("deviations.csv")),
        "--covariates-file",
        s(&cov),
        "--out",
        s(&clf),
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(clf.join("clf_summary.json")).unwrap()).unwrap();
    for c in v["summary"].as_array().unwrap() {
        let auc = c["auc"]["mean"].as_f64().unwrap();
        assert!(auc > 0.95, "{}: {auc}", c["class"]);
    }
}

#[test]
fn report_covers_a_complete_run() {
    let tmp = TempDir::new().unwrap();
    let (cov, feat) = synth(tmp.path(), SMALL);
    let eval = fit_and_evaluate(tmp.path(), &cov, &feat, "age,sex");
    ok(&[
        "audit",
        "--deviations",
        s(&eval.join("deviations.csv")),
        "--errors",
        s(&eval.join("errors.csv")),
        "--covariates-file",
        s(&cov),
        "--out",
        s(&tmp.path().join("audit")),
    ]);
    ok(&[
        "classify",
        "--deviations",
        s(&eval.join("deviations.csv")),
        "--covariates-file",
        s(&cov),
        "--folds",
        "3",
        "--out",
        s(&tmp.path().join("clf")),
    ]);
    ok(&["report", "--run", s(tmp.path())]);
    let md = fs::read_to_string(tmp.path().join("report.md")).unwrap();
    for section in ["## Demographics", "## Fit metrics", "## Group differences", "## Attribute prediction"] {
        assert!(md.contains(section), "missing {section}");
    }
    assert!(!md.contains("Missing inputs"));

    let demo = fs::read_to_string(tmp.path().join("fit/demographics.csv")).unwrap();
    let cols: Vec<&str> = demo.lines().next().unwrap().split(',').collect();
    for line in demo.lines().skip(1) {
        let vals: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        let sum = |pref: &[&str]| -> f64 {
            cols[1..].iter().zip(&vals).filter(|(c, _)| pref.contains(c)).map(|(_, v)| v).sum()
        };
        assert!((sum(&["pct_female", "pct_male"]) - 100.0).abs() < 1e-9, "{line}");
        assert!((sum(&["pct_A", "pct_B", "pct_W"]) - 100.0).abs() < 1e-9, "{line}");
    }
}

#[test]
fn report_notes_missing_inputs() {
    let tmp = TempDir::new().unwrap();
    let (cov, feat) = synth(tmp.path(), SMALL);
    fit(&cov, &feat, &tmp.path().join("fit"), "age,sex");
    let out = tmp.path().join("card.md");
    ok(&["report", "--run", s(tmp.path()), "--out", s(&out)]);
    let md = fs::read_to_string(out).unwrap();
    assert!(md.contains("## Missing inputs"));
    assert!(md.contains("table4.csv") && md.contains("clf_summary.json"));
    assert!(md.contains("## Fit metrics"));
}
