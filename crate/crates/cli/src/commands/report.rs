use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::Value;

use normgauge::cohort::open_table;

use crate::error::{CliError, CliResult};
use crate::io::write_text;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory; it and its immediate subdirectories are searched for outputs.
    #[arg(long)]
    pub run: PathBuf,
    /// Defaults to `<run>/report.md`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Every file called `name` in `root` or one level below, sorted by path.
fn find(root: &Path, name: &str) -> Vec<PathBuf> {
    let mut hits = Vec::new();
    if root.join(name).is_file() {
        hits.push(root.join(name));
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(root)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        if d.join(name).is_file() {
            hits.push(d.join(name));
        }
    }
    hits
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).display().to_string()
}

fn table(headers: &[String], rows: &[Vec<String>]) -> String {
    let mut out = format!("| {} |\n|{}\n", headers.join(" | "), "---|".repeat(headers.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out
}

fn fmt_num(s: &str, digits: usize) -> String {
    s.parse::<f64>().map(|v| format!("{v:.digits$}")).unwrap_or_else(|_| s.to_string())
}

fn demographics(root: &Path, out: &mut String, missing: &mut Vec<&'static str>) -> CliResult<()> {
    out.push_str("## Demographics\n\n");
    let files = find(root, "demographics.csv");
    if files.is_empty() {
        missing.push("demographics.csv");
        out.push_str("_Not available: demographics.csv not found._\n\n");
        return Ok(());
    }
    for f in files {
        let (headers, rows) = open_table(&f)?;
        let _ = writeln!(out, "From `{}`:\n", rel(root, &f));
        let pretty: Vec<String> = headers
            .iter()
            .map(|h| match h.strip_prefix("pct_") {
                Some(rest) => format!("% {rest}"),
                None => h.replace('_', " "),
            })
            .collect();
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&headers)
                    .map(|(v, h)| match h.as_str() {
                        "set" | "n" => v.to_string(),
                        _ => fmt_num(v, 1),
                    })
                    .collect()
            })
            .collect();
        out.push_str(&table(&pretty, &body));
        out.push('\n');
    }
    Ok(())
}

fn fit_metrics(root: &Path, out: &mut String, missing: &mut Vec<&'static str>) -> CliResult<()> {
    out.push_str("## Fit metrics\n\n");
    let mut files = find(root, "fit_metrics.csv");
    files.extend(find(root, "metrics.csv"));
    if files.is_empty() {
        missing.push("fit_metrics.csv / metrics.csv");
        out.push_str("_Not available: no fit metrics found._\n\n");
        return Ok(());
    }
    out.push_str("Across regions: mean (min, max). Skew and kurtosis are of the deviation scores.\n\n");
    let headers: Vec<String> =
        ["file", "regions", "explained variance", "MSLL", "skew", "excess kurtosis"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for f in files {
        let (h, recs) = open_table(&f)?;
        let mut row = vec![format!("`{}`", rel(root, &f)), recs.len().to_string()];
        for col in ["explained_variance", "msll", "skew", "kurtosis"] {
            let Some(j) = h.iter().position(|x| x == col) else {
                row.push(String::new());
                continue;
            };
            let v: Vec<f64> = recs.iter().filter_map(|r| r.get(j).and_then(|s| s.parse().ok())).collect();
            if v.is_empty() {
                row.push(String::new());
            } else {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.push(format!("{mean:.3} ({min:.3}, {max:.3})"));
            }
        }
        rows.push(row);
    }
    out.push_str(&table(&headers, &rows));
    out.push('\n');
    Ok(())
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| normgauge::Error::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| normgauge::Error::Json { path: path.into(), source: e }.into())
}

fn audit(root: &Path, out: &mut String, missing: &mut Vec<&'static str>) -> CliResult<()> {
    out.push_str("## Group differences\n\n");
    out.push_str(
        "Welch two-sample t-tests per region (unequal variances), Benjamini–Hochberg correction across regions \
         within each contrast and metric. Positive t means group one is higher.\n\n",
    );
    let files = find(root, "table4.csv");
    if files.is_empty() {
        missing.push("table4.csv");
        out.push_str("_Not available: table4.csv not found._\n\n");
    }
    for f in files {
        let (_, recs) = open_table(&f)?;
        let _ = writeln!(out, "From `{}`:\n", rel(root, &f));
        let headers = ["contrast", "metric", "significant regions", "% significant"].map(String::from).to_vec();
        let rows: Vec<Vec<String>> = recs
            .iter()
            .map(|r| {
                vec![r[0].replace('-', " vs "), r[1].to_string(), format!("{}/{}", &r[3], &r[2]), fmt_num(&r[4], 1)]
            })
            .collect();
        out.push_str(&table(&headers, &rows));
        out.push('\n');
    }
    for f in find(root, "parity.json") {
        let v = read_json(&f)?;
        let _ = writeln!(out, "Parity (`{}`):\n", rel(root, &f));
        let headers =
            ["group", "n", "EV", "MSLL", "mean Z", "mean \\|Z\\|", "extreme rate"].map(String::from).to_vec();
        let num = |g: &Value, k: &str| g.get(k).and_then(Value::as_f64).map(|x| format!("{x:.3}")).unwrap_or_default();
        let rows: Vec<Vec<String>> = v["groups"]
            .as_array()
            .into_iter()
            .flatten()
            .map(|g| {
                vec![
                    g["group"].as_str().unwrap_or("").to_string(),
                    g["n"].to_string(),
                    num(g, "explained_variance"),
                    num(g, "msll"),
                    num(g, "mean_z"),
                    num(g, "mean_abs_z"),
                    num(g, "extreme_rate"),
                ]
            })
            .collect();
        out.push_str(&table(&headers, &rows));
        if let Some(gaps) = v["gaps"].as_object() {
            let list: Vec<String> =
                gaps.iter().map(|(k, x)| format!("{k} {:.3}", x.as_f64().unwrap_or(f64::NAN))).collect();
            let _ = writeln!(out, "\nGaps (max − min across groups): {}.", list.join(", "));
        }
        out.push('\n');
    }
    Ok(())
}

fn classifier(root: &Path, out: &mut String, missing: &mut Vec<&'static str>) -> CliResult<()> {
    out.push_str("## Attribute prediction from deviations\n\n");
    let files = find(root, "clf_summary.json");
    if files.is_empty() {
        missing.push("clf_summary.json");
        out.push_str("_Not available: clf_summary.json not found._\n\n");
        return Ok(());
    }
    for f in files {
        let v = read_json(&f)?;
        let _ = writeln!(
            out,
            "From `{}` ({}; {}; {}). Mean ± s.d. across folds.\n",
            rel(root, &f),
            v["mode"].as_str().unwrap_or("?"),
            v["decision_rule"].as_str().unwrap_or(""),
            v["penalty"].as_str().unwrap_or("")
        );
        let ms = |m: &Value| match (m.get("mean").and_then(Value::as_f64), m.get("sd").and_then(Value::as_f64)) {
            (Some(a), Some(b)) => format!("{a:.3} ± {b:.3}"),
            _ => String::new(),
        };
        let headers = ["class", "AUC", "precision", "recall", "F"].map(String::from).to_vec();
        let mut rows: Vec<Vec<String>> = v["summary"]
            .as_array()
            .into_iter()
            .flatten()
            .map(|s| {
                vec![
                    s["class"].as_str().unwrap_or("").to_string(),
                    ms(&s["auc"]),
                    ms(&s["precision"]),
                    ms(&s["recall"]),
                    ms(&s["f_score"]),
                ]
            })
            .collect();
        let macro_of = |k: &str| v[k].as_f64().map(|x| format!("{x:.3}")).unwrap_or_default();
        rows.push(vec!["mean".into(), macro_of("macro_auc"), String::new(), String::new(), macro_of("macro_f_score")]);
        out.push_str(&table(&headers, &rows));
        if let Some(null) = v["permutation_macro_auc"].as_array().filter(|a| !a.is_empty()) {
            let vals: Vec<f64> = null.iter().filter_map(Value::as_f64).collect();
            let _ = writeln!(
                out,
                "\nPermutation null macro AUC over {} replicates: mean {:.3}.",
                vals.len(),
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            );
        }
        out.push('\n');
    }
    Ok(())
}

pub fn run(args: ReportArgs) -> CliResult<()> {
    if !args.run.is_dir() {
        return Err(CliError::Missing(format!("run directory {}", args.run.display())));
    }
    let mut md = String::from("# Normative model card\n\n");
    let _ = writeln!(md, "Generated by normgauge {} from `{}`.\n", env!("CARGO_PKG_VERSION"), args.run.display());
    let mut missing = Vec::new();
    demographics(&args.run, &mut md, &mut missing)?;
    fit_metrics(&args.run, &mut md, &mut missing)?;
    audit(&args.run, &mut md, &mut missing)?;
    classifier(&args.run, &mut md, &mut missing)?;
    if !missing.is_empty() {
        let _ = writeln!(md, "## Missing inputs\n\n{}\n", missing.iter().map(|m| format!("- {m}")).collect::<Vec<_>>().join("\n"));
        log::warn!("report is missing: {}", missing.join(", "));
    }
    let out = args.out.unwrap_or_else(|| args.run.join("report.md"));
    write_text(&out, &md)?;
    println!("{}", out.display());
    Ok(())
}
