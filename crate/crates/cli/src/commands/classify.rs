use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use normgauge::classify::{confusion_csv, cross_validate, metrics_csv, permutation_null, roc_csv, roc_svg, ClassifierConfig};
use normgauge::cohort::LabelSchema;
use normgauge::LabeledMatrix;

use crate::commands::audit::labels_for;
use crate::error::CliResult;
use crate::io::{echo_config, ensure_dir, load_config, require, split_list, write_json, write_text};

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub deviations: Option<PathBuf>,
    #[arg(long)]
    pub covariates_file: Option<PathBuf>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Single stratified holdout with this test fraction instead of k-fold CV.
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long)]
    pub standardize: bool,
    /// Also run this many label-permutation replicates.
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long)]
    pub svg: bool,
    #[arg(long)]
    pub races: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub deviations: Option<PathBuf>,
    pub covariates_file: Option<PathBuf>,
    pub classifier: ClassifierConfig,
    pub permutations: usize,
    pub svg: bool,
    pub races: Vec<String>,
    pub out: Option<PathBuf>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            deviations: None,
            covariates_file: None,
            classifier: ClassifierConfig::default(),
            permutations: 0,
            svg: false,
            races: LabelSchema::default().races,
            out: None,
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    mode: &'a str,
    classes: &'a [String],
    summary: &'a [normgauge::classify::ClassSummary],
    macro_auc: Option<f64>,
    macro_f_score: Option<f64>,
    pooled_confusion: Vec<Vec<f64>>,
    permutation_macro_auc: Vec<f64>,
    decision_rule: &'static str,
    penalty: String,
}

pub fn run(args: ClassifyArgs) -> CliResult<()> {
    let mut cfg: ClassifyConfig = load_config(args.config.as_deref())?;
    if args.deviations.is_some() {
        cfg.deviations = args.deviations;
    }
    if args.covariates_file.is_some() {
        cfg.covariates_file = args.covariates_file;
    }
    if args.out.is_some() {
        cfg.out = args.out;
    }
    if let Some(v) = args.l2 {
        cfg.classifier.l2_strength = v;
    }
    if let Some(v) = args.folds {
        cfg.classifier.n_folds = v;
    }
    if args.holdout.is_some() {
        cfg.classifier.holdout = args.holdout;
    }
    if args.standardize {
        cfg.classifier.standardize_features = true;
    }
    if let Some(v) = args.permutations {
        cfg.permutations = v;
    }
    if args.svg {
        cfg.svg = true;
    }
    if let Some(r) = &args.races {
        cfg.races = split_list(r);
    }
    if let Some(s) = args.seed {
        cfg.classifier.seed = s;
    }
    let dev = require(&cfg.deviations, "--deviations")?;
    let cov = require(&cfg.covariates_file, "--covariates-file")?;
    let out = require(&cfg.out, "--out")?;

    let z = LabeledMatrix::read_csv(&dev)?;
    if z.values.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(normgauge::Error::Validation(format!("{} has empty or non-finite cells", dev.display())).into());
    }
    let labels = labels_for(&z.ids, &cov, &cfg.races)?;
    let report = cross_validate(&z.values, &labels, &cfg.classifier)?;
    let null = if cfg.permutations > 0 {
        permutation_null(&z.values, &labels, &cfg.classifier, cfg.permutations)?
    } else {
        Vec::new()
    };

    ensure_dir(&out)?;
    write_text(&out.join("clf_metrics.csv"), &metrics_csv(&report))?;
    write_text(&out.join("roc_points.csv"), &roc_csv(&report))?;
    write_text(&out.join("confusion.csv"), &confusion_csv(&report))?;
    write_json(
        &out.join("clf_summary.json"),
        &Summary {
            mode: &report.mode,
            classes: &report.classes,
            summary: &report.summary,
            macro_auc: report.macro_auc,
            macro_f_score: report.macro_f_score,
            pooled_confusion: report.pooled_confusion(),
            permutation_macro_auc: null,
            decision_rule: "argmax of one-vs-rest linear scores",
            penalty: format!(
                "sum logistic loss + (lambda/2)||w||^2 with lambda = {} (C = 1/lambda), bias unpenalized",
                cfg.classifier.l2_strength
            ),
        },
    )?;
    if cfg.svg {
        write_text(&out.join("roc.svg"), &roc_svg(&report))?;
    }
    echo_config(&out, &cfg)?;
    Ok(())
}
