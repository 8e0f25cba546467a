//! Subgroup bias audit of deviation scores: per-group summaries, group
//! difference tests with FDR control, and parity gaps.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blr::{evaluate, metrics_from_evaluation, NormativeModel};
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::stats::{bh_fdr, welch_t_test, WelchResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell<T> {
    /// `None` when the group has no members.
    pub mean_deviation: Option<T>,
    pub pct_extreme_pos: Option<f64>,
    pub pct_extreme_neg: Option<f64>,
    pub pct_extreme_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary<T> {
    pub groups: Vec<String>,
    pub regions: Vec<String>,
    pub sizes: Vec<usize>,
    pub threshold: f64,
    /// Indexed `[group][region]`.
    pub cells: Vec<Vec<SummaryCell<T>>>,
}

fn rows_of(labels: &[String], group: &str) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, l)| l.as_str() == group).map(|(i, _)| i).collect()
}

fn check_labels<T: Scalar>(values: &Matrix<T>, labels: &[String]) -> Result<()> {
    if values.rows() != labels.len() {
        return Err(Error::Validation(format!("{} labels for {} subjects", labels.len(), values.rows())));
    }
    Ok(())
}

/// Mean and extreme-deviation fractions (`Z > t`, `Z < −t`) per group and region.
pub fn group_summary<T: Scalar>(
    values: &Matrix<T>,
    regions: &[String],
    labels: &[String],
    groups: &[String],
    threshold: f64,
) -> Result<GroupSummary<T>> {
    check_labels(values, labels)?;
    if !(threshold > 0.0) {
        return Err(Error::Validation(format!("extreme threshold must be positive, got {threshold}")));
    }
    let t = T::lit(threshold);
    let mut sizes = Vec::with_capacity(groups.len());
    let mut cells = Vec::with_capacity(groups.len());
    for g in groups {
        let rows = rows_of(labels, g);
        sizes.push(rows.len());
        let n = rows.len() as f64;
        cells.push(
            (0..values.cols())
                .map(|j| {
                    if rows.is_empty() {
                        return SummaryCell {
                            mean_deviation: None,
                            pct_extreme_pos: None,
                            pct_extreme_neg: None,
                            pct_extreme_total: None,
                        };
                    }
                    let col: Vec<T> = rows.iter().map(|&i| values[(i, j)]).collect();
                    let pos = col.iter().filter(|&&v| v > t).count() as f64 / n;
                    let neg = col.iter().filter(|&&v| v < -t).count() as f64 / n;
                    SummaryCell {
                        mean_deviation: crate::scalar::mean(&col),
                        pct_extreme_pos: Some(pos),
                        pct_extreme_neg: Some(neg),
                        pct_extreme_total: Some(pos + neg),
                    }
                })
                .collect(),
        );
    }
    Ok(GroupSummary { groups: groups.to_vec(), regions: regions.to_vec(), sizes, threshold, cells })
}

/// Ordered pair of groups; `t` is positive when the first group's mean is higher.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Contrast {
    pub first: String,
    pub second: String,
}

impl Contrast {
    pub fn new(first: impl Into<String>, second: impl Into<String>) -> Self {
        Contrast { first: first.into(), second: second.into() }
    }

    /// Reference group against every other group, in label order.
    pub fn defaults(groups: &[String], reference: &str) -> Vec<Contrast> {
        groups.iter().filter(|g| g.as_str() != reference).map(|g| Contrast::new(reference, g.as_str())).collect()
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.first, self.second)
    }
}

impl FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['-', ':']).map(str::trim).collect();
        match parts.as_slice() {
            [a, b] if !a.is_empty() && !b.is_empty() && a != b => Ok(Contrast::new(*a, *b)),
            _ => Err(Error::Config(format!("contrast '{s}' is not of the form A-B with two different groups"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Deviations,
    Errors,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Deviations => "deviations",
            Metric::Errors => "errors",
        }
    }
}

/// Welch test of `first − second` in every column. `None` marks an untestable
/// region (a group with fewer than two members).
pub fn group_difference<T: Scalar>(
    values: &Matrix<T>,
    labels: &[String],
    contrast: &Contrast,
) -> Result<Vec<Option<WelchResult<T>>>> {
    check_labels(values, labels)?;
    let a = rows_of(labels, &contrast.first);
    let b = rows_of(labels, &contrast.second);
    Ok((0..values.cols())
        .into_par_iter()
        .map(|j| {
            let xa: Vec<T> = a.iter().map(|&i| values[(i, j)]).collect();
            let xb: Vec<T> = b.iter().map(|&i| values[(i, j)]).collect();
            welch_t_test(&xa, &xb)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRow<T> {
    pub contrast: Contrast,
    pub metric: Metric,
    pub region: String,
    pub result: Option<WelchResult<T>>,
    pub fdr_significant: bool,
}

/// Group-difference tests for every contrast and metric, with BH control at
/// level `q` across the testable regions of each contrast–metric pair.
pub fn run_tests<T: Scalar>(
    metrics: &[(Metric, &Matrix<T>)],
    regions: &[String],
    labels: &[String],
    contrasts: &[Contrast],
    q: f64,
) -> Result<Vec<TestRow<T>>> {
    let mut out = Vec::new();
    for contrast in contrasts {
        for &(metric, values) in metrics {
            if values.cols() != regions.len() {
                return Err(Error::Validation(format!("{} matrix has {} columns for {} regions", metric.as_str(), values.cols(), regions.len())));
            }
            let results = group_difference(values, labels, contrast)?;
            let testable: Vec<usize> = (0..results.len()).filter(|&j| results[j].is_some()).collect();
            let p: Vec<T> = testable.iter().map(|&j| results[j].expect("testable").p).collect();
            let flags = bh_fdr(&p, q)?;
            let mut sig = vec![false; results.len()];
            for (&j, f) in testable.iter().zip(flags) {
                sig[j] = f;
            }
            for (j, r) in results.into_iter().enumerate() {
                out.push(TestRow {
                    contrast: contrast.clone(),
                    metric,
                    region: regions[j].clone(),
                    result: r,
                    fdr_significant: sig[j],
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub contrast: Contrast,
    pub metric: Metric,
    pub n_regions: usize,
    pub n_significant: usize,
    /// `100 · n_significant / n_regions`.
    pub pct_significant: f64,
}

/// Percentage of FDR-significant regions per contrast and metric, in first-seen order.
pub fn significance_table<T>(rows: &[TestRow<T>]) -> Vec<SignificanceRow> {
    let mut order: Vec<(Contrast, Metric)> = Vec::new();
    let mut counts: BTreeMap<(Contrast, Metric), (usize, usize)> = BTreeMap::new();
    for r in rows {
        let key = (r.contrast.clone(), r.metric);
        let e = counts.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0, 0)
        });
        e.0 += 1;
        e.1 += usize::from(r.fdr_significant);
    }
    order
        .into_iter()
        .map(|key| {
            let (n, s) = counts[&key];
            SignificanceRow {
                contrast: key.0,
                metric: key.1,
                n_regions: n,
                n_significant: s,
                pct_significant: if n == 0 { 0.0 } else { 100.0 * s as f64 / n as f64 },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupParity {
    pub group: String,
    pub n: usize,
    /// Region-averaged explained variance; absent without a model.
    pub explained_variance: Option<f64>,
    pub msll: Option<f64>,
    pub mean_z: Option<f64>,
    pub mean_abs_z: Option<f64>,
    pub extreme_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub threshold: f64,
    pub groups: Vec<GroupParity>,
    /// Max − min across groups for every metric defined in at least one group.
    pub gaps: BTreeMap<String, f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().filter(|x| x.is_finite()).collect();
    crate::scalar::mean(&v)
}

fn z_stats<T: Scalar>(z: &Matrix<T>, rows: &[usize], threshold: f64) -> (Option<f64>, Option<f64>, Option<f64>) {
    if rows.is_empty() || z.cols() == 0 {
        return (None, None, None);
    }
    let vals: Vec<f64> = rows.iter().flat_map(|&i| z.row(i).iter().map(|v| v.as_f64())).collect();
    let n = vals.len() as f64;
    (
        Some(vals.iter().sum::<f64>() / n),
        Some(vals.iter().map(|v| v.abs()).sum::<f64>() / n),
        Some(vals.iter().filter(|v| v.abs() > threshold).count() as f64 / n),
    )
}

fn with_gaps(threshold: f64, groups: Vec<GroupParity>) -> ParityReport {
    let mut gaps = BTreeMap::new();
    let fields: [(&str, fn(&GroupParity) -> Option<f64>); 5] = [
        ("explained_variance", |g| g.explained_variance),
        ("msll", |g| g.msll),
        ("mean_z", |g| g.mean_z),
        ("mean_abs_z", |g| g.mean_abs_z),
        ("extreme_rate", |g| g.extreme_rate),
    ];
    for (name, get) in fields {
        let v: Vec<f64> = groups.iter().filter_map(get).collect();
        if !v.is_empty() {
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            gaps.insert(name.to_string(), max - min);
        }
    }
    ParityReport { threshold, groups, gaps }
}

/// Per-group fit metrics of `model` on `cohort` plus deviation statistics, and their gaps.
pub fn parity_report<T: Scalar>(
    model: &NormativeModel<T>,
    cohort: &Cohort<T>,
    labels: &[String],
    groups: &[String],
    threshold: f64,
) -> Result<ParityReport> {
    if labels.len() != cohort.len() {
        return Err(Error::Validation(format!("{} labels for {} subjects", labels.len(), cohort.len())));
    }
    let eval = evaluate(model, cohort)?;
    let out = groups
        .iter()
        .map(|g| {
            let rows = rows_of(labels, g);
            let (mean_z, mean_abs_z, extreme_rate) = z_stats(&eval.deviations.z, &rows, threshold);
            let (ev, msll) = if rows.len() < 2 {
                (None, None)
            } else {
                let m = metrics_from_evaluation(model, &eval, Some(&rows));
                (
                    mean_defined(m.iter().map(|r| r.explained_variance.map(|v| v.as_f64()))),
                    mean_defined(m.iter().map(|r| r.msll.map(|v| v.as_f64()))),
                )
            };
            GroupParity { group: g.clone(), n: rows.len(), explained_variance: ev, msll, mean_z, mean_abs_z, extreme_rate }
        })
        .collect();
    Ok(with_gaps(threshold, out))
}

/// Parity restricted to deviation statistics, for when no model is at hand.
pub fn parity_from_deviations<T: Scalar>(z: &Matrix<T>, labels: &[String], groups: &[String], threshold: f64) -> Result<ParityReport> {
    check_labels(z, labels)?;
    let out = groups
        .iter()
        .map(|g| {
            let rows = rows_of(labels, g);
            let (mean_z, mean_abs_z, extreme_rate) = z_stats(z, &rows, threshold);
            GroupParity { group: g.clone(), n: rows.len(), explained_variance: None, msll: None, mean_z, mean_abs_z, extreme_rate }
        })
        .collect();
    Ok(with_gaps(threshold, out))
}

fn opt<V: fmt::Display>(v: Option<V>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn summary_csv<T: Scalar>(s: &GroupSummary<T>) -> String {
    let mut out = String::from("group,region,n,mean_deviation,pct_extreme_pos,pct_extreme_neg,pct_extreme_total\n");
    for (g, (name, n)) in s.groups.iter().zip(&s.sizes).enumerate() {
        for (j, region) in s.regions.iter().enumerate() {
            let c = &s.cells[g][j];
            let _ = writeln!(
                out,
                "{name},{region},{n},{},{},{},{}",
                opt(c.mean_deviation),
                opt(c.pct_extreme_pos),
                opt(c.pct_extreme_neg),
                opt(c.pct_extreme_total)
            );
        }
    }
    out
}

pub fn tests_csv<T: Scalar>(rows: &[TestRow<T>]) -> String {
    let mut out = String::from("contrast,metric,region,t,p,fdr_flag\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.contrast,
            r.metric.as_str(),
            r.region,
            opt(r.result.map(|w| w.t)),
            opt(r.result.map(|w| w.p)),
            u8::from(r.fdr_significant)
        );
    }
    out
}

pub fn significance_csv(rows: &[SignificanceRow]) -> String {
    let mut out = String::from("contrast,metric,n_regions,n_significant,pct_significant\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.contrast, r.metric.as_str(), r.n_regions, r.n_significant, r.pct_significant);
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
