use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use normgauge::synth::{generate, SynthSpec};

use crate::error::CliResult;
use crate::io::{echo_config, ensure_dir, load_config, require, write_json};

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON run config (`spec`, `out`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON synthetic cohort spec; replaces the config's `spec`.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_regions: Option<usize>,
    /// Subjects in every declared group.
    #[arg(long)]
    pub n_per_group: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub out: Option<PathBuf>,
    pub spec: SynthSpec,
}

pub fn run(args: SynthArgs) -> CliResult<()> {
    let mut cfg: SynthConfig = load_config(args.config.as_deref())?;
    if let Some(p) = &args.spec {
        cfg.spec = load_config(Some(p))?;
    }
    if args.out.is_some() {
        cfg.out = args.out;
    }
    if let Some(s) = args.seed {
        cfg.spec.seed = s;
    }
    if let Some(d) = args.n_regions {
        cfg.spec.n_regions = d;
    }
    if let Some(n) = args.n_per_group {
        cfg.spec.groups.values_mut().for_each(|v| *v = n);
    }
    let out = require(&cfg.out, "--out")?;

    let (cohort, truth) = generate::<f64>(&cfg.spec)?;
    ensure_dir(&out)?;
    cohort.write_csv(&out.join("covariates.csv"), &out.join("features.csv"))?;
    write_json(&out.join("truth.json"), &truth)?;
    echo_config(&out, &cfg)?;
    log::info!("wrote {} subjects × {} regions to {}", cohort.len(), cohort.regions().len(), out.display());
    Ok(())
}
