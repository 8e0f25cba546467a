use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use normgauge::audit::{
    group_summary, parity_from_deviations, parity_report, run_tests, significance_csv, significance_table, summary_csv,
    tests_csv, Contrast, Metric,
};
use normgauge::cohort::{load_covariates, LabelSchema};
use normgauge::{LabeledMatrix, NormativeModel, Subject};

use crate::commands::fit::load_labeled;
use crate::error::{CliError, CliResult};
use crate::io::{echo_config, ensure_dir, load_config, require, split_list, write_json, write_text};

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub deviations: Option<PathBuf>,
    #[arg(long)]
    pub errors: Option<PathBuf>,
    #[arg(long)]
    pub covariates_file: Option<PathBuf>,
    /// Comma-separated contrasts such as `W-A,W-B`; the first group is group one.
    #[arg(long)]
    pub contrasts: Option<String>,
    /// Group one of the default contrasts.
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long)]
    pub fdr_q: Option<f64>,
    /// Extreme deviation threshold on |Z|.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub races: Option<String>,
    /// Model bundle; with `--features-file`, parity includes per-group EV and MSLL.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub features_file: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub deviations: Option<PathBuf>,
    pub errors: Option<PathBuf>,
    pub covariates_file: Option<PathBuf>,
    pub contrasts: Vec<String>,
    pub reference: String,
    pub fdr_q: f64,
    pub threshold: f64,
    pub races: Vec<String>,
    pub model: Option<PathBuf>,
    pub features_file: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub test: String,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            deviations: None,
            errors: None,
            covariates_file: None,
            contrasts: Vec::new(),
            reference: "W".into(),
            fdr_q: 0.05,
            threshold: 2.0,
            races: LabelSchema::default().races,
            model: None,
            features_file: None,
            out: None,
            test: "welch".into(),
        }
    }
}

/// Race label of every row id, or an error naming ids without covariates.
pub fn labels_for(ids: &[String], covariates: &Path, races: &[String]) -> CliResult<Vec<String>> {
    let (subjects, _): (Vec<Subject>, _) = load_covariates(covariates, &LabelSchema::with_races(races.iter().cloned()))?;
    let by_id: HashMap<&str, &str> = subjects.iter().map(|s| (s.id.as_str(), s.race.as_str())).collect();
    let missing: Vec<&str> = ids.iter().map(String::as_str).filter(|id| !by_id.contains_key(id)).collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(5).copied().collect();
        return Err(normgauge::Error::Validation(format!(
            "{} ids have no covariates (first: {})",
            missing.len(),
            shown.join(", ")
        ))
        .into());
    }
    Ok(ids.iter().map(|id| by_id[id.as_str()].to_string()).collect())
}

pub fn run(args: AuditArgs) -> CliResult<()> {
    let mut cfg: AuditConfig = load_config(args.config.as_deref())?;
    macro_rules! take {
        ($($f:ident),*) => { $( if args.$f.is_some() { cfg.$f = args.$f; } )* };
    }
    take!(deviations, errors, covariates_file, model, features_file, out);
    if let Some(c) = &args.contrasts {
        cfg.contrasts = split_list(c);
    }
    if let Some(r) = args.reference {
        cfg.reference = r;
    }
    if let Some(q) = args.fdr_q {
        cfg.fdr_q = q;
    }
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    if let Some(r) = &args.races {
        cfg.races = split_list(r);
    }
    let dev_path = require(&cfg.deviations, "--deviations")?;
    let cov = require(&cfg.covariates_file, "--covariates-file")?;
    let out = require(&cfg.out, "--out")?;

    let z = LabeledMatrix::read_csv(&dev_path)?;
    let errors = match &cfg.errors {
        Some(p) => {
            let e = LabeledMatrix::read_csv(p)?;
            if e.columns != z.columns {
                return Err(normgauge::Error::Schema("errors and deviations have different regions".into()).into());
            }
            let rows = e.align(&z.ids)?;
            Some(e.values.select_rows(&rows))
        }
        None => None,
    };
    let labels = labels_for(&z.ids, &cov, &cfg.races)?;

    let contrasts: Vec<Contrast> = if cfg.contrasts.is_empty() {
        if !cfg.races.contains(&cfg.reference) {
            return Err(CliError::Usage(format!("reference group '{}' is not a race label", cfg.reference)));
        }
        Contrast::defaults(&cfg.races, &cfg.reference)
    } else {
        cfg.contrasts.iter().map(|c| c.parse()).collect::<normgauge::Result<_>>()?
    };
    for c in &contrasts {
        for g in [&c.first, &c.second] {
            if !cfg.races.contains(g) {
                return Err(CliError::Usage(format!("contrast {c} names unknown group '{g}'")));
            }
        }
    }

    let mut metrics = vec![(Metric::Deviations, &z.values)];
    if let Some(e) = &errors {
        metrics.push((Metric::Errors, e));
    }
    let summary = group_summary(&z.values, &z.columns, &labels, &cfg.races, cfg.threshold)?;
    let tests = run_tests(&metrics, &z.columns, &labels, &contrasts, cfg.fdr_q)?;
    let table = significance_table(&tests);

    let parity = match (&cfg.model, &cfg.features_file) {
        (Some(m), Some(f)) => {
            let model = NormativeModel::load(m)?;
            let cohort = load_labeled(&cov, f, &cfg.races)?;
            let keep: std::collections::HashSet<String> = z.ids.iter().cloned().collect();
            let cohort = cohort.subset_ids(&keep);
            let cohort_labels: Vec<String> = cohort.subjects().iter().map(|s| s.race.clone()).collect();
            parity_report(&model, &cohort, &cohort_labels, &cfg.races, cfg.threshold)?
        }
        (None, None) => parity_from_deviations(&z.values, &labels, &cfg.races, cfg.threshold)?,
        _ => return Err(CliError::Usage("--model and --features-file must be given together".into())),
    };

    ensure_dir(&out)?;
    write_text(&out.join("audit_summary.csv"), &summary_csv(&summary))?;
    write_text(&out.join("audit_tests.csv"), &tests_csv(&tests))?;
    write_text(&out.join("table4.csv"), &significance_csv(&table))?;
    write_json(&out.join("parity.json"), &parity)?;
    echo_config(&out, &cfg)?;
    Ok(())
}
