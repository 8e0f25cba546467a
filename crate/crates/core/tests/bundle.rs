use normgauge::blr::{evaluate, fit_normative, FitOptions};
use normgauge::design::{CovariateSet, ModelConfig};
use normgauge::synth::{generate, SynthSpec};
use normgauge::{Cohort, Error, NormativeModel, WarpParams};

fn skewed_cohort() -> Cohort {
    let spec = SynthSpec {
        n_regions: 3,
        noise_skew: Some(WarpParams::new(0.8, 0.3)),
        seed: 21,
        ..SynthSpec::default()
    };
    generate(&spec).unwrap().0
}

#[test]
fn saved_bundle_reloads_bit_exact() {
    let cohort = skewed_cohort();
    let config = ModelConfig { covariates: CovariateSet::AgeSexRace, ..ModelConfig::default() };
    let model = fit_normative(&cohort, &config, &FitOptions::default(), 5).unwrap();
    assert!(model.regions.iter().any(|r| r.warped));

    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = NormativeModel::load(dir.path()).unwrap();
    assert_eq!(loaded, model);

    let a = evaluate(&model, &cohort).unwrap();
    let b = evaluate(&loaded, &cohort).unwrap();
    assert_eq!(a.deviations.z, b.deviations.z);
}

#[test]
fn tampered_bundle_is_rejected() {
    let cohort = skewed_cohort();
    let model = fit_normative(&cohort, &ModelConfig::default(), &FitOptions::default(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();

    let header = dir.path().join("model.json");
    let text = std::fs::read_to_string(&header).unwrap();
    std::fs::write(&header, text.replace("normgauge-model/1", "normgauge-model/9")).unwrap();
    let err = NormativeModel::load(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Schema(_)), "{err}");
}
