use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use normgauge::blr::{evaluate, fit_normative, metrics_from_evaluation, FitOptions, FitMetrics, WarpSelection};
use normgauge::cohort::{load_cohort, qc_filter, stratified_split, Demographics, LabelSchema, SplitSpec};
use normgauge::design::ModelConfig;
use normgauge::Cohort;

use crate::error::{CliError, CliResult};
use crate::io::{echo_config, ensure_dir, load_config, parse_fractions, require, split_list, write_text};

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub covariates_file: Option<PathBuf>,
    #[arg(long)]
    pub features_file: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Covariate set: `age,sex`, `age,sex,site` or `age,sex,race`.
    #[arg(long)]
    pub covariates: Option<String>,
    /// Train fraction for every race label not listed in `--split-fractions`.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Per-label train fractions, e.g. `A=0.01,B=0.01,W=0.8`.
    #[arg(long)]
    pub split_fractions: Option<String>,
    /// Race label set, e.g. `A,B,W`.
    #[arg(long)]
    pub races: Option<String>,
    #[arg(long)]
    pub min_qc: Option<f64>,
    #[arg(long)]
    pub n_knots: Option<usize>,
    /// Keep the identity warp for every region.
    #[arg(long)]
    pub no_warp: bool,
    /// `bic`, `lower-nll` or `margin:<value>`.
    #[arg(long)]
    pub warp_selection: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub covariates_file: Option<PathBuf>,
    pub features_file: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub races: Vec<String>,
    pub min_qc: Option<f64>,
    pub model: ModelConfig,
    pub split: SplitSpec,
    pub fit: FitOptions,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            covariates_file: None,
            features_file: None,
            out: None,
            races: LabelSchema::default().races,
            min_qc: None,
            model: ModelConfig::default(),
            split: SplitSpec::default(),
            fit: FitOptions::default(),
            seed: 0,
        }
    }
}

pub fn parse_warp_selection(s: &str) -> CliResult<WarpSelection> {
    match s {
        "bic" => Ok(WarpSelection::Bic),
        "lower-nll" | "lower_nll" => Ok(WarpSelection::LowerNll),
        _ => s
            .strip_prefix("margin:")
            .and_then(|v| v.parse().ok())
            .map(WarpSelection::Margin)
            .ok_or_else(|| CliError::Usage(format!("unknown warp selection '{s}'"))),
    }
}

fn resolve(args: FitArgs) -> CliResult<FitConfig> {
    let mut cfg: FitConfig = load_config(args.config.as_deref())?;
    if args.covariates_file.is_some() {
        cfg.covariates_file = args.covariates_file;
    }
    if args.features_file.is_some() {
        cfg.features_file = args.features_file;
    }
    if args.out.is_some() {
        cfg.out = args.out;
    }
    if let Some(c) = &args.covariates {
        cfg.model.covariates = c.parse()?;
    }
    if let Some(f) = args.train_fraction {
        cfg.split.default_fraction = f;
    }
    if let Some(s) = &args.split_fractions {
        cfg.split.fractions = parse_fractions(s)?.into_iter().collect();
    }
    if let Some(r) = &args.races {
        cfg.races = split_list(r);
    }
    if args.min_qc.is_some() {
        cfg.min_qc = args.min_qc;
    }
    if let Some(k) = args.n_knots {
        cfg.model.basis.n_knots = k;
    }
    if args.no_warp {
        cfg.fit.optimize_warp = false;
    }
    if let Some(w) = &args.warp_selection {
        cfg.fit.warp_selection = parse_warp_selection(w)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.split.seed = cfg.seed;
    Ok(cfg)
}

pub fn load_labeled(cov: &Path, feat: &Path, races: &[String]) -> CliResult<Cohort> {
    let loaded = load_cohort::<f64>(cov, feat, &LabelSchema::with_races(races.iter().cloned()))?;
    let r = loaded.report;
    if r.warning_count() > 0 {
        log::warn!(
            "dropped {} subjects present in only one file and {} with missing covariates",
            r.dropped_unmatched,
            r.dropped_missing_covariates
        );
    }
    Ok(loaded.cohort)
}

pub fn metrics_csv(rows: &[FitMetrics<f64>]) -> String {
    let cell = |v: Option<f64>| v.filter(|x| x.is_finite()).map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("region,explained_variance,msll,skew,kurtosis\n");
    for m in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            m.region,
            cell(m.explained_variance),
            cell(m.msll),
            cell(m.skew),
            cell(m.kurtosis)
        );
    }
    out
}

pub fn demographics_csv(sets: &[(&str, &Cohort)], races: &[String]) -> String {
    let mut out = String::from("set,n,pct_female,pct_male,age_mean,age_sd");
    for r in races {
        let _ = write!(out, ",pct_{r}");
    }
    out.push('\n');
    let schema = LabelSchema::with_races(races.iter().cloned());
    for (name, c) in sets {
        let d = Demographics::of(*c, &schema);
        let _ = write!(out, "{name},{},{},{},{},{}", d.n, d.pct_female, d.pct_male, d.age_mean, d.age_sd);
        for r in races {
            let _ = write!(out, ",{}", d.race_pct.get(r).copied().unwrap_or(0.0));
        }
        out.push('\n');
    }
    out
}

fn split_csv(train: &Cohort, test: &Cohort) -> String {
    let mut rows: Vec<(&str, &str)> = train.ids().into_iter().map(|id| (id, "train")).collect();
    rows.extend(test.ids().into_iter().map(|id| (id, "test")));
    rows.sort();
    let mut out = String::from("id,set\n");
    for (id, set) in rows {
        let _ = writeln!(out, "{id},{set}");
    }
    out
}

pub fn run(args: FitArgs) -> CliResult<()> {
    let cfg = resolve(args)?;
    let cov = require(&cfg.covariates_file, "--covariates-file")?;
    let feat = require(&cfg.features_file, "--features-file")?;
    let out = require(&cfg.out, "--out")?;

    let cohort = load_labeled(&cov, &feat, &cfg.races)?;
    let cohort = qc_filter(&cohort, cfg.min_qc)?;
    let split = stratified_split(&cohort, &cfg.split)?;
    log::info!("training on {} subjects, holding out {}", split.train.len(), split.test.len());

    let model = fit_normative(&split.train, &cfg.model, &cfg.fit, cfg.seed)?;
    let unconverged = model.regions.iter().filter(|r| !r.converged).count();
    if unconverged > 0 {
        log::warn!("{unconverged} region fits stopped before convergence");
    }
    let eval = evaluate(&model, &split.train)?;
    let metrics = metrics_from_evaluation(&model, &eval, None);

    ensure_dir(&out)?;
    let bundle = out.join("model");
    let partial = out.join("model.partial");
    let saved = (|| -> CliResult<()> {
        if partial.exists() {
            fs::remove_dir_all(&partial).map_err(|e| normgauge::Error::Io { path: partial.clone(), source: e })?;
        }
        model.save(&partial)?;
        if bundle.exists() {
            fs::remove_dir_all(&bundle).map_err(|e| normgauge::Error::Io { path: bundle.clone(), source: e })?;
        }
        fs::rename(&partial, &bundle).map_err(|e| normgauge::Error::Io { path: bundle.clone(), source: e })?;
        Ok(())
    })();
    if let Err(e) = saved {
        let _ = fs::remove_dir_all(&partial);
        return Err(e);
    }

    write_text(&out.join("fit_metrics.csv"), &metrics_csv(&metrics))?;
    write_text(&out.join("split.csv"), &split_csv(&split.train, &split.test))?;
    write_text(
        &out.join("demographics.csv"),
        &demographics_csv(&[("train", &split.train), ("test", &split.test)], &cfg.races),
    )?;
    echo_config(&out, &cfg)?;
    Ok(())
}
