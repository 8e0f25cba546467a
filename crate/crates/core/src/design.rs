//! Design-matrix construction: clamped B-spline expansion of age plus
//! dummy-coded sex, site and race, under three covariate configurations.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Sex, Subject};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CovariateSet {
    #[serde(rename = "age,sex")]
    AgeSex,
    #[serde(rename = "age,sex,site")]
    AgeSexSite,
    #[serde(rename = "age,sex,race")]
    AgeSexRace,
}

impl CovariateSet {
    pub fn includes_site(&self) -> bool {
        matches!(self, CovariateSet::AgeSexSite)
    }

    pub fn includes_race(&self) -> bool {
        matches!(self, CovariateSet::AgeSexRace)
    }
}

impl fmt::Display for CovariateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovariateSet::AgeSex => "age,sex",
            CovariateSet::AgeSexSite => "age,sex,site",
            CovariateSet::AgeSexRace => "age,sex,race",
        })
    }
}

impl FromStr for CovariateSet {
    type Err = Error;

    /// Accepts a comma- or plus-separated list in any order and case.
    fn from_str(s: &str) -> Result<Self> {
        let items: BTreeSet<String> = s
            .split([',', '+'])
            .map(|t| t.trim().to_ascii_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        let v: Vec<&str> = items.iter().map(String::as_str).collect();
        match v.as_slice() {
            ["age", "sex"] => Ok(CovariateSet::AgeSex),
            ["age", "sex", "site"] => Ok(CovariateSet::AgeSexSite),
            ["age", "race", "sex"] => Ok(CovariateSet::AgeSexRace),
            _ => Err(Error::Config(format!(
                "covariate set '{s}' is not one of age,sex | age,sex,site | age,sex,race"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    /// Distinct, evenly spaced knots spanning the age range (boundaries included).
    pub n_knots: usize,
    pub degree: usize,
    /// Defaults to the training age range.
    pub knot_range: Option<[f64; 2]>,
    pub include_linear_age: bool,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { n_knots: 5, degree: 3, knot_range: None, include_linear_age: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub covariates: CovariateSet,
    pub basis: BasisConfig,
    pub race_reference_level: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { covariates: CovariateSet::AgeSex, basis: BasisConfig::default(), race_reference_level: "W".into() }
    }
}

impl ModelConfig {
    pub fn with_covariates(covariates: CovariateSet) -> Self {
        ModelConfig { covariates, ..Default::default() }
    }
}

/// Everything needed to rebuild the same columns at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSchema {
    pub covariates: CovariateSet,
    pub degree: usize,
    /// Full clamped knot vector (boundary knots repeated `degree + 1` times).
    pub knots: Vec<f64>,
    /// Clamp range for ages.
    pub range: [f64; 2],
    pub include_linear_age: bool,
    pub site_reference: Option<String>,
    /// Site levels with their own column, in column order.
    pub site_levels: Vec<String>,
    pub race_reference: Option<String>,
    pub race_levels: Vec<String>,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<T> {
    pub values: Matrix<T>,
    pub columns: Vec<String>,
    /// Rows whose age fell outside the knot range and was clamped.
    pub clamped: usize,
}

impl<T: Scalar> DesignMatrix<T> {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }
}

/// Clamped B-spline basis on evenly spaced knots.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    degree: usize,
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn evenly_spaced(lo: f64, hi: f64, n_knots: usize, degree: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::Config(format!("degenerate knot range [{lo}, {hi}]")));
        }
        if n_knots < 2 {
            return Err(Error::Config(format!("need at least 2 knots, got {n_knots}")));
        }
        if degree < 1 {
            return Err(Error::Config("spline degree must be at least 1".into()));
        }
        let mut knots = vec![lo; degree];
        for i in 0..n_knots {
            let t = if i + 1 == n_knots { hi } else { lo + (hi - lo) * i as f64 / (n_knots - 1) as f64 };
            knots.push(t);
        }
        knots.extend(std::iter::repeat_n(hi, degree));
        Ok(BSplineBasis { degree, knots })
    }

    pub fn from_knots(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if knots.len() < 2 * (degree + 1) || knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Validation("invalid clamped knot vector".into()));
        }
        Ok(BSplineBasis { degree, knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lo(&self) -> f64 {
        self.knots[0]
    }

    pub fn hi(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Knot span containing `x`; the right boundary belongs to the last span.
    fn span(&self, x: f64) -> usize {
        let n = self.len();
        if x >= self.knots[n] {
            return n - 1;
        }
        let mut k = self.degree;
        while k < n - 1 && x >= self.knots[k + 1] {
            k += 1;
        }
        k
    }

    /// All basis functions at `x`, which must lie in `[lo, hi]`.
    pub fn evaluate<T: Scalar>(&self, x: T) -> Vec<T> {
        let p = self.degree;
        let xf = x.as_f64();
        let k = self.span(xf);
        let t = |i: usize| T::lit(self.knots[i]);
        let mut nz = vec![T::zero(); p + 1];
        let mut left = vec![T::zero(); p + 1];
        let mut right = vec![T::zero(); p + 1];
        nz[0] = T::one();
        for j in 1..=p {
            left[j] = x - t(k + 1 - j);
            right[j] = t(k + j) - x;
            let mut saved = T::zero();
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == T::zero() { T::zero() } else { nz[r] / denom };
                nz[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            nz[j] = saved;
        }
        let mut out = vec![T::zero(); self.len()];
        for (r, v) in nz.into_iter().enumerate() {
            out[k - p + r] = v;
        }
        out
    }
}

fn sorted_levels<'a>(it: impl Iterator<Item = &'a str>) -> Vec<String> {
    it.collect::<BTreeSet<_>>().into_iter().map(String::from).collect()
}

/// Fits the covariate schema on `cohort` and expands it.
pub fn fit_design<T: Scalar>(cohort: &Cohort<T>, config: &ModelConfig) -> Result<(DesignMatrix<T>, DesignSchema)> {
    if cohort.is_empty() {
        return Err(Error::Config("cannot fit a design on an empty cohort".into()));
    }
    let [lo, hi] = match config.basis.knot_range {
        Some(r) => r,
        None => {
            let ages = cohort.subjects().iter().map(|s| s.age.as_f64());
            [ages.clone().fold(f64::INFINITY, f64::min), ages.fold(f64::NEG_INFINITY, f64::max)]
        }
    };
    let basis = BSplineBasis::evenly_spaced(lo, hi, config.basis.n_knots, config.basis.degree)?;

    let mut columns: Vec<String> = (0..basis.len()).map(|j| format!("age_spline_{j}")).collect();
    if config.basis.include_linear_age {
        columns.push("age_linear".into());
    }
    columns.push("sex_M".into());

    let (mut site_reference, mut site_levels) = (None, Vec::new());
    if config.covariates.includes_site() {
        if let Some(s) = cohort.subjects().iter().find(|s| s.site.is_none()) {
            return Err(Error::Validation(format!("subject '{}' has no site but the model includes site", s.id)));
        }
        let levels = sorted_levels(cohort.subjects().iter().filter_map(|s| s.site.as_deref()));
        site_reference = levels.first().cloned();
        site_levels = levels.into_iter().skip(1).collect();
        columns.extend(site_levels.iter().map(|l| format!("site_{l}")));
    }

    let (mut race_reference, mut race_levels) = (None, Vec::new());
    if config.covariates.includes_race() {
        let levels = sorted_levels(cohort.subjects().iter().map(|s| s.race.as_str()));
        let reference = &config.race_reference_level;
        if !levels.contains(reference) {
            return Err(Error::Config(format!(
                "race reference level '{reference}' does not occur in the training cohort (levels {levels:?})"
            )));
        }
        race_levels = levels.into_iter().filter(|l| l != reference).collect();
        race_reference = Some(reference.clone());
        columns.extend(race_levels.iter().map(|l| format!("race_{l}")));
    }

    let schema = DesignSchema {
        covariates: config.covariates,
        degree: basis.degree(),
        knots: basis.knots().to_vec(),
        range: [lo, hi],
        include_linear_age: config.basis.include_linear_age,
        site_reference,
        site_levels,
        race_reference,
        race_levels,
        columns,
    };
    let dm = apply_design(cohort.subjects(), &schema)?;
    Ok((dm, schema))
}

fn check_levels<'a>(
    covariate: &str,
    values: impl Iterator<Item = Option<&'a str>>,
    reference: &Option<String>,
    levels: &[String],
) -> Result<()> {
    let mut unseen = BTreeSet::new();
    for v in values {
        match v {
            Some(v) if reference.as_deref() == Some(v) || levels.iter().any(|l| l == v) => {}
            Some(v) => {
                unseen.insert(v.to_string());
            }
            None => {
                unseen.insert("<missing>".to_string());
            }
        }
    }
    if unseen.is_empty() {
        Ok(())
    } else {
        Err(Error::UnseenLevel { covariate: covariate.into(), levels: unseen.into_iter().collect() })
    }
}

/// Expands `subjects` with a previously fitted schema. Ages outside the knot
/// range are clamped to the nearest boundary and counted.
pub fn apply_design<T: Scalar>(subjects: &[Subject<T>], schema: &DesignSchema) -> Result<DesignMatrix<T>> {
    if schema.covariates.includes_site() {
        check_levels("site", subjects.iter().map(|s| s.site.as_deref()), &schema.site_reference, &schema.site_levels)?;
    }
    if schema.covariates.includes_race() {
        check_levels("race", subjects.iter().map(|s| Some(s.race.as_str())), &schema.race_reference, &schema.race_levels)?;
    }
    let basis = BSplineBasis::from_knots(schema.knots.clone(), schema.degree)?;
    let [lo, hi] = schema.range;
    let (tlo, thi) = (T::lit(lo), T::lit(hi));
    let m = schema.columns.len();
    let mut values = Matrix::zeros(subjects.len(), m);
    let mut clamped = 0;
    for (i, s) in subjects.iter().enumerate() {
        let age = if s.age < tlo || s.age > thi {
            clamped += 1;
            s.age.max(tlo).min(thi)
        } else {
            s.age
        };
        let row = values.row_mut(i);
        let spline = basis.evaluate(age);
        let mut j = spline.len();
        row[..j].copy_from_slice(&spline);
        if schema.include_linear_age {
            row[j] = (age - tlo) / (thi - tlo);
            j += 1;
        }
        row[j] = if s.sex == Sex::M { T::one() } else { T::zero() };
        j += 1;
        for l in &schema.site_levels {
            row[j] = if s.site.as_deref() == Some(l.as_str()) { T::one() } else { T::zero() };
            j += 1;
        }
        for l in &schema.race_levels {
            row[j] = if &s.race == l { T::one() } else { T::zero() };
            j += 1;
        }
        debug_assert_eq!(j, m);
    }
    if clamped > 0 {
        log::info!("clamped {clamped} age(s) to the knot range [{lo}, {hi}]");
    }
    Ok(DesignMatrix { values, columns: schema.columns.clone(), clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn subject(id: &str, age: f64, sex: Sex, race: &str, site: Option<&str>) -> Subject<f64> {
        Subject { id: id.into(), age, sex, race: race.into(), site: site.map(String::from), qc_score: None }
    }

    fn cohort() -> Cohort<f64> {
        let subjects = vec![
            subject("a", 20.0, Sex::F, "A", Some("s1")),
            subject("b", 35.0, Sex::M, "B", Some("s2")),
            subject("c", 50.0, Sex::F, "W", Some("s1")),
            subject("d", 65.0, Sex::M, "W", Some("s3")),
            subject("e", 80.0, Sex::F, "A", Some("s2")),
        ];
        Cohort::new(subjects, vec!["r".into()], Matrix::from_vec(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()).unwrap()
    }

    #[test]
    fn default_basis_has_seven_columns() {
        let b = BSplineBasis::evenly_spaced(20.0, 80.0, 5, 3).unwrap();
        assert_eq!(b.len(), 7);
        assert_eq!(b.knots(), &[20.0, 20.0, 20.0, 20.0, 35.0, 50.0, 65.0, 80.0, 80.0, 80.0, 80.0]);
    }

    #[test]
    fn endpoints_are_interpolated() {
        let b = BSplineBasis::evenly_spaced(0.0, 1.0, 5, 3).unwrap();
        let at_lo: Vec<f64> = b.evaluate(0.0);
        let at_hi: Vec<f64> = b.evaluate(1.0);
        assert_eq!(at_lo[0], 1.0);
        assert_eq!(at_hi[6], 1.0);
        assert!(at_lo[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_basis_is_hat_functions() {
        let b = BSplineBasis::evenly_spaced(0.0, 2.0, 3, 1).unwrap();
        let v: Vec<f64> = b.evaluate(0.5);
        assert_eq!(v, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn column_layout_by_covariate_set() {
        let co = cohort();
        let (dm, schema) = fit_design(&co, &ModelConfig::with_covariates(CovariateSet::AgeSex)).unwrap();
        assert_eq!(dm.cols(), 7 + 1 + 1);
        assert!(schema.columns.iter().all(|c| !c.starts_with("race_")));

        let (dm, schema) = fit_design(&co, &ModelConfig::with_covariates(CovariateSet::AgeSexRace)).unwrap();
        assert_eq!(&schema.columns[9..], &["race_A", "race_B"]);
        assert_eq!(dm.values.row(2)[9..], [0.0, 0.0]); // W subject
        assert_eq!(dm.values.row(0)[9..], [1.0, 0.0]);
        assert_eq!(dm.values.row(0)[8], 0.0); // F
        assert_eq!(dm.values.row(1)[8], 1.0); // M

        let (dm, schema) = fit_design(&co, &ModelConfig::with_covariates(CovariateSet::AgeSexSite)).unwrap();
        assert_eq!(&schema.columns[9..], &["site_s2", "site_s3"]);
        assert_eq!(dm.cols(), 11);
    }

    #[test]
    fn column_count_formula() {
        let co = cohort();
        for (set, extra) in [(CovariateSet::AgeSex, 0), (CovariateSet::AgeSexSite, 2), (CovariateSet::AgeSexRace, 2)] {
            for linear in [true, false] {
                for (k, p) in [(5, 3), (4, 2), (2, 1)] {
                    let cfg = ModelConfig {
                        covariates: set,
                        basis: BasisConfig { n_knots: k, degree: p, include_linear_age: linear, ..Default::default() },
                        ..Default::default()
                    };
                    let (dm, _) = fit_design(&co, &cfg).unwrap();
                    assert_eq!(dm.cols(), (k + p - 1) + linear as usize + 1 + extra);
                }
            }
        }
    }

    #[test]
    fn degenerate_range_is_config_error() {
        let subjects = vec![subject("a", 30.0, Sex::F, "W", None), subject("b", 30.0, Sex::M, "W", None)];
        let co = Cohort::new(subjects, vec![], Matrix::zeros(2, 0)).unwrap();
        assert!(matches!(fit_design(&co, &ModelConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn apply_reproduces_fit_and_clamps() {
        let co = cohort();
        let cfg = ModelConfig::with_covariates(CovariateSet::AgeSexRace);
        let (dm, schema) = fit_design(&co, &cfg).unwrap();
        let again = apply_design(co.subjects(), &schema).unwrap();
        assert_eq!(again.values, dm.values);
        assert_eq!(again.clamped, 0);

        let at_max = apply_design(&[subject("x", 80.0, Sex::F, "A", None)], &schema).unwrap();
        assert_eq!(at_max.values.row(0), dm.values.row(4));
        let above = apply_design(&[subject("y", 95.0, Sex::F, "A", None)], &schema).unwrap();
        assert_eq!(above.values.row(0), dm.values.row(4));
        assert_eq!(above.clamped, 1);
    }

    #[test]
    fn unseen_levels_are_named() {
        let co = cohort();
        let (_, schema) = fit_design(&co, &ModelConfig::with_covariates(CovariateSet::AgeSexSite)).unwrap();
        let err = apply_design(&[subject("x", 40.0, Sex::F, "W", Some("s9"))], &schema).unwrap_err();
        match err {
            Error::UnseenLevel { covariate, levels } => {
                assert_eq!(covariate, "site");
                assert_eq!(levels, vec!["s9".to_string()]);
            }
            other => panic!("{other}"),
        }
        let (_, schema) = fit_design(&co, &ModelConfig::with_covariates(CovariateSet::AgeSexRace)).unwrap();
        assert!(matches!(
            apply_design(&[subject("x", 40.0, Sex::F, "Q", None)], &schema),
            Err(Error::UnseenLevel { .. })
        ));
        // race is irrelevant when the model does not include it
        let (_, schema) = fit_design(&co, &ModelConfig::default()).unwrap();
        assert!(apply_design(&[subject("x", 40.0, Sex::F, "Q", None)], &schema).is_ok());
    }

    #[test]
    fn reference_level_must_be_observed() {
        let co = cohort();
        let cfg = ModelConfig { race_reference_level: "Z".into(), ..ModelConfig::with_covariates(CovariateSet::AgeSexRace) };
        assert!(matches!(fit_design(&co, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn covariate_set_parsing() {
        assert_eq!("age,sex".parse::<CovariateSet>().unwrap(), CovariateSet::AgeSex);
        assert_eq!("Age + Sex + Race".parse::<CovariateSet>().unwrap(), CovariateSet::AgeSexRace);
        assert_eq!("site,age,sex".parse::<CovariateSet>().unwrap(), CovariateSet::AgeSexSite);
        assert!("age".parse::<CovariateSet>().is_err());
        let json = serde_json::to_string(&CovariateSet::AgeSexRace).unwrap();
        assert_eq!(json, "\"age,sex,race\"");
    }

    proptest! {
        #[test]
        fn partition_of_unity(x in 20.0f64..=80.0, k in 2usize..9, p in 1usize..5) {
            let b = BSplineBasis::evenly_spaced(20.0, 80.0, k, p).unwrap();
            let v: Vec<f64> = b.evaluate(x);
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.iter().all(|&u| u >= -1e-15));
        }

        #[test]
        fn partition_of_unity_f32(x in 0.0f32..=1.0) {
            let b = BSplineBasis::evenly_spaced(0.0, 1.0, 5, 3).unwrap();
            let v: Vec<f32> = b.evaluate(x);
            prop_assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn spline_locality() {
        let (k, p) = (6, 3);
        let b = BSplineBasis::evenly_spaced(0.0, 5.0, k, p).unwrap();
        // sample the interior of every inter-knot interval
        let intervals = k - 1;
        for j in 0..b.len() {
            let support: Vec<usize> = (0..intervals)
                .filter(|&iv| {
                    (1..10).any(|s| {
                        let x = iv as f64 + s as f64 / 10.0;
                        b.evaluate::<f64>(x)[j].abs() > 0.0
                    })
                })
                .collect();
            assert!(!support.is_empty());
            assert!(support.len() <= p + 1);
            assert!(support.windows(2).all(|w| w[1] == w[0] + 1), "non-adjacent support for column {j}");
        }
    }
}
