use std::collections::HashSet;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use normgauge::blr::{evaluate, metrics_from_evaluation};
use normgauge::cohort::{open_table, LabelSchema};
use normgauge::{Cohort, LabeledMatrix, NormativeModel};

use crate::commands::fit::{demographics_csv, load_labeled, metrics_csv};
use crate::error::{CliError, CliResult};
use crate::io::{echo_config, ensure_dir, load_config, require, split_list, write_text};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    All,
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model bundle directory (as written by `fit`, under `model/`).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub covariates_file: Option<PathBuf>,
    #[arg(long)]
    pub features_file: Option<PathBuf>,
    /// `split.csv` from `fit`, used with `--subset`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub subset: Option<Subset>,
    #[arg(long)]
    pub races: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub model: Option<PathBuf>,
    pub covariates_file: Option<PathBuf>,
    pub features_file: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub subset: Subset,
    pub races: Vec<String>,
    pub out: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            model: None,
            covariates_file: None,
            features_file: None,
            split: None,
            subset: Subset::All,
            races: LabelSchema::default().races,
            out: None,
        }
    }
}

fn subset_ids(split: &Path, subset: Subset) -> CliResult<HashSet<String>> {
    let (headers, rows) = open_table(split)?;
    if headers != ["id", "set"] {
        return Err(normgauge::Error::Schema(format!("{}: expected columns id,set", split.display())).into());
    }
    let want = match subset {
        Subset::Train => "train",
        Subset::Test => "test",
        Subset::All => return Ok(rows.iter().map(|r| r[0].to_string()).collect()),
    };
    Ok(rows.iter().filter(|r| &r[1] == want).map(|r| r[0].to_string()).collect())
}

pub fn run(args: EvaluateArgs) -> CliResult<()> {
    let mut cfg: EvaluateConfig = load_config(args.config.as_deref())?;
    macro_rules! take {
        ($($f:ident),*) => { $( if args.$f.is_some() { cfg.$f = args.$f; } )* };
    }
    take!(model, covariates_file, features_file, split, out);
    if let Some(s) = args.subset {
        cfg.subset = s;
    }
    if let Some(r) = &args.races {
        cfg.races = split_list(r);
    }
    let model_dir = require(&cfg.model, "--model")?;
    let cov = require(&cfg.covariates_file, "--covariates-file")?;
    let feat = require(&cfg.features_file, "--features-file")?;
    let out = require(&cfg.out, "--out")?;
    if cfg.subset != Subset::All && cfg.split.is_none() {
        return Err(CliError::Usage("--subset train|test needs --split".into()));
    }

    let model = NormativeModel::load(&model_dir)?;
    let mut cohort: Cohort = load_labeled(&cov, &feat, &cfg.races)?;
    if let Some(split) = &cfg.split {
        cohort = cohort.subset_ids(&subset_ids(split, cfg.subset)?);
    }
    if cohort.is_empty() {
        return Err(normgauge::Error::Validation("no subjects left to evaluate".into()).into());
    }
    let eval = evaluate(&model, &cohort)?;
    if eval.clamped > 0 {
        log::warn!("{} subjects had ages outside the model's range and were clamped", eval.clamped);
    }
    let metrics = metrics_from_evaluation(&model, &eval, None);
    let dev = &eval.deviations;

    ensure_dir(&out)?;
    LabeledMatrix::new(dev.ids.clone(), dev.regions.clone(), dev.z.clone())?.write_csv(&out.join("deviations.csv"))?;
    LabeledMatrix::new(dev.ids.clone(), dev.regions.clone(), dev.errors.clone())?.write_csv(&out.join("errors.csv"))?;
    write_text(&out.join("metrics.csv"), &metrics_csv(&metrics))?;
    write_text(&out.join("demographics.csv"), &demographics_csv(&[("evaluated", &cohort)], &cfg.races))?;
    echo_config(&out, &cfg)?;
    Ok(())
}
