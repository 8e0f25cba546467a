//! One-vs-rest L2 logistic regression on deviation scores, with stratified
//! cross-validation, ROC analysis and confusion matrices.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::optim::{minimize, LbfgsOptions};
use crate::scalar::Scalar;
use crate::seeds::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// `λ` in `Σ log(1 + exp(−ỹ·s)) + (λ/2)‖w‖²`; equals `1/C` in the sum-loss convention.
    pub l2_strength: f64,
    pub n_folds: usize,
    pub seed: u64,
    pub standardize_features: bool,
    /// Fixed stratified holdout with this test fraction instead of k-fold CV.
    pub holdout: Option<f64>,
    pub max_iter: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { l2_strength: 1.0, n_folds: 5, seed: 0, standardize_features: false, holdout: None, max_iter: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvrModel<T> {
    pub classes: Vec<String>,
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<T>,
    /// Per-feature `(mean, sd)` applied before scoring, when standardizing.
    pub scaling: Option<Vec<(T, T)>>,
    pub converged: Vec<bool>,
}

fn sorted_classes(labels: &[String]) -> Vec<String> {
    let mut c: Vec<String> = labels.to_vec();
    c.sort();
    c.dedup();
    c
}

fn column_scaling<T: Scalar>(x: &Matrix<T>) -> Vec<(T, T)> {
    (0..x.cols())
        .map(|j| {
            let col = x.column(j);
            let mu = crate::scalar::mean(&col).unwrap_or(T::zero());
            let sd = crate::scalar::population_variance(&col).map_or(T::one(), |v| v.sqrt());
            (mu, if sd > T::zero() { sd } else { T::one() })
        })
        .collect()
}

fn apply_scaling<T: Scalar>(x: &Matrix<T>, scaling: &[(T, T)]) -> Matrix<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, &(mu, sd)) in out.row_mut(i).iter_mut().zip(scaling) {
            *v = (*v - mu) / sd;
        }
    }
    out
}

/// Binary L2 logistic regression with unpenalized bias; `y` is ±1.
fn fit_binary<T: Scalar>(x: &Matrix<T>, y: &[T], lambda: T, max_iter: usize) -> (Vec<T>, T, bool) {
    let d = x.cols();
    let objective = |p: &[T], g: &mut [T]| {
        let (w, b) = (&p[..d], p[d]);
        g.iter_mut().for_each(|v| *v = T::zero());
        let mut f = T::zero();
        for (row, &yi) in x.row_iter().zip(y) {
            let s = crate::linalg::dot(w, row) + b;
            let m = -yi * s;
            f = f + m.softplus();
            let coef = -yi * m.sigmoid();
            for (gj, &xj) in g[..d].iter_mut().zip(row) {
                *gj = *gj + coef * xj;
            }
            g[d] = g[d] + coef;
        }
        let half = T::lit(0.5);
        for (gj, &wj) in g[..d].iter_mut().zip(w) {
            *gj = *gj + lambda * wj;
            f = f + half * lambda * wj * wj;
        }
        f
    };
    let opts = LbfgsOptions { g_tol: 1e-6, f_tol: 0.0, max_iter, ..Default::default() };
    let r = minimize(objective, &vec![T::zero(); d + 1], &opts);
    let converged = r.converged();
    let b = r.x[d];
    let mut w = r.x;
    w.truncate(d);
    (w, b, converged)
}

/// Fits one binary classifier per class (class vs rest).
pub fn fit_ovr_logistic<T: Scalar>(x: &Matrix<T>, labels: &[String], cfg: &ClassifierConfig) -> Result<OvrModel<T>> {
    if x.rows() != labels.len() {
        return Err(Error::Validation(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    if !(cfg.l2_strength > 0.0) {
        return Err(Error::Config(format!("l2_strength must be positive, got {}", cfg.l2_strength)));
    }
    let classes = sorted_classes(labels);
    if classes.len() < 2 {
        return Err(Error::Validation(format!("need at least 2 classes, found {}", classes.len())));
    }
    let scaling = cfg.standardize_features.then(|| column_scaling(x));
    let xs = match &scaling {
        Some(s) => apply_scaling(x, s),
        None => x.clone(),
    };
    let lambda = T::lit(cfg.l2_strength);
    let fits: Vec<(Vec<T>, T, bool)> = classes
        .par_iter()
        .map(|c| {
            let y: Vec<T> = labels.iter().map(|l| if l == c { T::one() } else { -T::one() }).collect();
            fit_binary(&xs, &y, lambda, cfg.max_iter)
        })
        .collect();
    for (c, f) in classes.iter().zip(&fits) {
        if !f.2 {
            log::warn!("classifier for class '{c}' did not converge; using best iterate");
        }
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut converged = Vec::new();
    for (w, b, ok) in fits {
        weights.push(w);
        biases.push(b);
        converged.push(ok);
    }
    Ok(OvrModel { classes, weights, biases, scaling, converged })
}

impl<T: Scalar> OvrModel<T> {
    /// Linear scores, one column per class.
    pub fn scores(&self, x: &Matrix<T>) -> Matrix<T> {
        let xs = match &self.scaling {
            Some(s) => apply_scaling(x, s),
            None => x.clone(),
        };
        let mut out = Matrix::zeros(x.rows(), self.classes.len());
        for (i, row) in xs.row_iter().enumerate() {
            for (k, (w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
                out[(i, k)] = crate::linalg::dot(w, row) + b;
            }
        }
        out
    }

    /// Argmax of the per-class scores; the first class wins ties.
    pub fn predict(&self, x: &Matrix<T>) -> Vec<usize> {
        let s = self.scores(x);
        s.row_iter()
            .map(|r| r.iter().enumerate().fold(0, |best, (k, &v)| if v > r[best] { k } else { best }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

/// ROC curve over the distinct scores, highest first, starting at (0, 0).
/// Tied scores form a single threshold, so AUC equals Mann–Whitney with half credit for ties.
pub fn roc_points<T: Scalar>(scores: &[T], positive: &[bool]) -> Result<Roc> {
    if scores.len() != positive.len() {
        return Err(Error::Validation("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Validation("ROC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let (mut fpr, mut tpr) = (vec![0.0], vec![0.0]);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x, y) = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        auc += (x - fpr[fpr.len() - 1]) * (y + tpr[tpr.len() - 1]) / 2.0;
        fpr.push(x);
        tpr.push(y);
    }
    Ok(Roc { fpr, tpr, auc })
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin,
/// continuing the rotation across classes so fold sizes stay balanced.
pub fn stratified_folds(labels: &[String], n_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if n_folds < 2 {
        return Err(Error::Config(format!("n_folds must be at least 2, got {n_folds}")));
    }
    let classes = sorted_classes(labels);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for (ci, c) in classes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| &labels[i] == c).collect();
        if idx.len() < n_folds {
            return Err(Error::Validation(format!("class '{c}' has {} members, fewer than {n_folds} folds", idx.len())));
        }
        idx.shuffle(&mut stream_rng(seed, ci as u64));
        for i in idx {
            fold[i] = next % n_folds;
            next += 1;
        }
    }
    Ok(fold)
}

/// Stratified holdout: returns `true` for test rows.
pub fn stratified_holdout(labels: &[String], test_fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("holdout fraction must be in (0, 1), got {test_fraction}")));
    }
    let classes = sorted_classes(labels);
    let mut test = vec![false; labels.len()];
    for (ci, c) in classes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| &labels[i] == c).collect();
        idx.shuffle(&mut stream_rng(seed, ci as u64));
        let k = ((test_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
        for &i in &idx[..k] {
            test[i] = true;
        }
    }
    Ok(test)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// `None` when the class is absent from this fold's test set.
    pub metrics: Vec<Option<ClassMetrics>>,
    pub roc: Vec<Option<Roc>>,
    /// Raw counts, `[true][predicted]`.
    pub confusion_counts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(v: &[f64]) -> Option<MeanSd> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Some(MeanSd { mean, sd, n: v.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub auc: Option<MeanSd>,
    pub precision: Option<MeanSd>,
    pub recall: Option<MeanSd>,
    pub f_score: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub classes: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub summary: Vec<ClassSummary>,
    pub macro_auc: Option<f64>,
    pub macro_f_score: Option<f64>,
    pub mode: String,
}

/// Counts normalized by row (true class); rows without members become NaN.
pub fn normalize_rows(counts: &[Vec<usize>]) -> Vec<Vec<f64>> {
    counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter().map(|&c| if total == 0 { f64::NAN } else { c as f64 / total as f64 }).collect()
        })
        .collect()
}

impl ClassifierReport {
    pub fn pooled_confusion(&self) -> Vec<Vec<f64>> {
        let k = self.classes.len();
        let mut total = vec![vec![0usize; k]; k];
        for f in &self.folds {
            for (t, row) in f.confusion_counts.iter().enumerate() {
                for (p, &c) in row.iter().enumerate() {
                    total[t][p] += c;
                }
            }
        }
        normalize_rows(&total)
    }
}

fn evaluate_fold<T: Scalar>(
    fold: usize,
    x: &Matrix<T>,
    labels: &[String],
    classes: &[String],
    train: &[usize],
    test: &[usize],
    cfg: &ClassifierConfig,
) -> Result<FoldResult> {
    let train_labels: Vec<String> = train.iter().map(|&i| labels[i].clone()).collect();
    let model = fit_ovr_logistic(&x.select_rows(train), &train_labels, cfg)?;
    if model.classes != classes {
        return Err(Error::Validation(format!("fold {fold}: training folds lack some classes")));
    }
    let xt = x.select_rows(test);
    let scores = model.scores(&xt);
    let pred = model.predict(&xt);
    let truth: Vec<usize> = test.iter().map(|&i| classes.iter().position(|c| c == &labels[i]).expect("known class")).collect();
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(&pred) {
        confusion[t][p] += 1;
    }
    let mut metrics = Vec::with_capacity(k);
    let mut rocs = Vec::with_capacity(k);
    for c in 0..k {
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        if !positive.iter().any(|&p| p) || positive.iter().all(|&p| p) {
            metrics.push(None);
            rocs.push(None);
            continue;
        }
        let roc = roc_points(&scores.column(c), &positive)?;
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..k).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = tp / actual as f64;
        let f_score = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        metrics.push(Some(ClassMetrics { auc: roc.auc, precision, recall, f_score }));
        rocs.push(Some(roc));
    }
    Ok(FoldResult { fold, metrics, roc: rocs, confusion_counts: confusion })
}

fn summarize(classes: &[String], folds: Vec<FoldResult>, mode: &str) -> ClassifierReport {
    let summary: Vec<ClassSummary> = classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let vals = |get: fn(&ClassMetrics) -> f64| {
                MeanSd::of(&folds.iter().filter_map(|f| f.metrics[c].as_ref().map(get)).collect::<Vec<_>>())
            };
            ClassSummary {
                class: name.clone(),
                auc: vals(|m| m.auc),
                precision: vals(|m| m.precision),
                recall: vals(|m| m.recall),
                f_score: vals(|m| m.f_score),
            }
        })
        .collect();
    let macro_of = |get: fn(&ClassSummary) -> Option<MeanSd>| {
        let v: Vec<f64> = summary.iter().filter_map(|s| get(s).map(|m| m.mean)).collect();
        crate::scalar::mean(&v)
    };
    ClassifierReport {
        classes: classes.to_vec(),
        macro_auc: macro_of(|s| s.auc),
        macro_f_score: macro_of(|s| s.f_score),
        summary,
        folds,
        mode: mode.to_string(),
    }
}

/// Stratified k-fold cross-validation, or a single stratified holdout when `cfg.holdout` is set.
pub fn cross_validate<T: Scalar>(x: &Matrix<T>, labels: &[String], cfg: &ClassifierConfig) -> Result<ClassifierReport> {
    if x.rows() != labels.len() {
        return Err(Error::Validation(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    let classes = sorted_classes(labels);
    if classes.len() < 2 {
        return Err(Error::Validation(format!("need at least 2 classes, found {}", classes.len())));
    }
    let (assign, n_folds, mode) = match cfg.holdout {
        Some(f) => {
            let test = stratified_holdout(labels, f, cfg.seed)?;
            (test.into_iter().map(usize::from).collect::<Vec<_>>(), 1, format!("holdout({f})"))
        }
        None => (stratified_folds(labels, cfg.n_folds, cfg.seed)?, cfg.n_folds, format!("{}-fold", cfg.n_folds)),
    };
    let test_id = |k: usize| if cfg.holdout.is_some() { 1 } else { k };
    let folds: Vec<Result<FoldResult>> = (0..n_folds)
        .into_par_iter()
        .map(|k| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| assign[i] == test_id(k));
            evaluate_fold(k, x, labels, &classes, &train, &test, cfg)
        })
        .collect();
    let folds = folds.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(summarize(&classes, folds, &mode))
}

/// Macro AUC of cross-validation on `reps` random label permutations.
pub fn permutation_null<T: Scalar>(x: &Matrix<T>, labels: &[String], cfg: &ClassifierConfig, reps: usize) -> Result<Vec<f64>> {
    (0..reps)
        .map(|r| {
            let mut permuted = labels.to_vec();
            permuted.shuffle(&mut stream_rng(cfg.seed, 1_000_000 + r as u64));
            let run = ClassifierConfig { seed: cfg.seed.wrapping_add(r as u64 + 1), ..cfg.clone() };
            cross_validate(x, &permuted, &run).map(|rep| rep.macro_auc.unwrap_or(f64::NAN))
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => x.to_string(),
        _ => String::new(),
    }
}

pub fn metrics_csv(r: &ClassifierReport) -> String {
    let mut out = String::from("class,fold,auc,precision,recall,f\n");
    for (c, name) in r.classes.iter().enumerate() {
        for f in &r.folds {
            let m = f.metrics[c];
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{}",
                f.fold,
                cell(m.map(|m| m.auc)),
                cell(m.map(|m| m.precision)),
                cell(m.map(|m| m.recall)),
                cell(m.map(|m| m.f_score))
            );
        }
    }
    out
}

pub fn roc_csv(r: &ClassifierReport) -> String {
    let mut out = String::from("class,fold,fpr,tpr\n");
    for (c, name) in r.classes.iter().enumerate() {
        for f in &r.folds {
            if let Some(roc) = &f.roc[c] {
                for (x, y) in roc.fpr.iter().zip(&roc.tpr) {
                    let _ = writeln!(out, "{name},{},{x},{y}", f.fold);
                }
            }
        }
    }
    out
}

/// Row-normalized confusion matrices per fold and pooled over folds.
pub fn confusion_csv(r: &ClassifierReport) -> String {
    let mut out = String::from("fold,true_class");
    for c in &r.classes {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    let mut emit = |fold: &str, m: &[Vec<f64>]| {
        for (t, row) in m.iter().enumerate() {
            let _ = write!(out, "{fold},{}", r.classes[t]);
            for &v in row {
                let _ = write!(out, ",{}", cell(Some(v)));
            }
            out.push('\n');
        }
    };
    for f in &r.folds {
        emit(&f.fold.to_string(), &normalize_rows(&f.confusion_counts));
    }
    emit("pooled", &r.pooled_confusion());
    out
}

/// Mean ROC on a fixed FPR grid by linear interpolation of each fold's curve.
fn mean_curve(rocs: &[&Roc]) -> Vec<(f64, f64)> {
    (0..=100)
        .map(|i| {
            let x = i as f64 / 100.0;
            let y = rocs.iter().map(|r| interp(&r.fpr, &r.tpr, x)).sum::<f64>() / rocs.len() as f64;
            (x, y)
        })
        .collect()
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    // last point with fpr ≤ x, taking the highest tpr at a vertical step
    let j = xs.partition_point(|&v| v <= x);
    if j == 0 {
        return ys[0];
    }
    if j >= xs.len() {
        return ys[ys.len() - 1];
    }
    let (x0, x1, y0, y1) = (xs[j - 1], xs[j], ys[j - 1], ys[j]);
    if x1 == x0 {
        y1
    } else {
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Per-fold ROC curves (thin, translucent) and the fold-mean curve per class.
pub fn roc_svg(r: &ClassifierReport) -> String {
    let (w, h, pad) = (420.0, 420.0, 40.0);
    let sx = |x: f64| pad + x * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y * (h - 2.0 * pad);
    let mut out = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    out.push('\n');
    let _ = writeln!(
        out,
        r##"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(out, r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#aaa" stroke-dasharray="4 3"/>"##, sx(0.0), sy(0.0), sx(1.0), sy(1.0));
    let poly = |pts: &mut dyn Iterator<Item = (f64, f64)>| pts.map(|(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect::<Vec<_>>().join(" ");
    for (c, name) in r.classes.iter().enumerate() {
        let color = PALETTE[c % PALETTE.len()];
        let rocs: Vec<&Roc> = r.folds.iter().filter_map(|f| f.roc[c].as_ref()).collect();
        for roc in &rocs {
            let pts = poly(&mut roc.fpr.iter().copied().zip(roc.tpr.iter().copied()));
            let _ = writeln!(out, r#"<polyline points="{pts}" fill="none" stroke="{color}" stroke-opacity="0.3" stroke-width="1"/>"#);
        }
        if !rocs.is_empty() {
            let pts = poly(&mut mean_curve(&rocs).into_iter());
            let _ = writeln!(out, r#"<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2.5"/>"#);
            let auc = r.summary[c].auc.map_or(String::new(), |m| format!(" AUC {:.3}", m.mean));
            let _ = writeln!(out, r#"<text x="{}" y="{}" fill="{color}">{name}{auc}</text>"#, sx(0.55), sy(0.25) + 14.0 * c as f64);
        }
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">False positive rate</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(out, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">True positive rate</text>"#, h / 2.0, h / 2.0);
    out.push_str("</svg>\n");
    out
}
