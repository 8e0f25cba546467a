//! Cohort loading, validation, quality filtering and stratified splitting.
//!
//! A cohort pairs a covariates CSV (`id,age,sex,race[,site][,qc_score]`) with a
//! features CSV (`id,<region_1>,...,<region_D>`). Subjects are always held in
//! ascending id order so downstream results do not depend on file row order.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::seeds::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

impl Sex {
    pub fn parse(s: &str) -> Option<Sex> {
        match s {
            "F" => Some(Sex::F),
            "M" => Some(Sex::M),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Sex::F => "F",
            Sex::M => "M",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Declared label set for the race covariate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub races: Vec<String>,
}

impl Default for LabelSchema {
    fn default() -> Self {
        LabelSchema { races: vec!["A".into(), "B".into(), "W".into()] }
    }
}

impl LabelSchema {
    pub fn with_races<I: IntoIterator<Item = S>, S: Into<String>>(races: I) -> Self {
        LabelSchema { races: races.into_iter().map(Into::into).collect() }
    }

    pub fn knows_race(&self, r: &str) -> bool {
        self.races.iter().any(|x| x == r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject<T> {
    pub id: String,
    pub age: T,
    pub sex: Sex,
    pub race: String,
    pub site: Option<String>,
    pub qc_score: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort<T> {
    subjects: Vec<Subject<T>>,
    regions: Vec<String>,
    responses: Matrix<T>,
}

impl<T: Scalar> Cohort<T> {
    /// Validates the invariants and sorts subjects (and their response rows) by id.
    pub fn new(subjects: Vec<Subject<T>>, regions: Vec<String>, responses: Matrix<T>) -> Result<Self> {
        if responses.rows() != subjects.len() {
            return Err(Error::Validation(format!(
                "response matrix has {} rows for {} subjects",
                responses.rows(),
                subjects.len()
            )));
        }
        if responses.cols() != regions.len() {
            return Err(Error::Validation(format!(
                "response matrix has {} columns for {} regions",
                responses.cols(),
                regions.len()
            )));
        }
        let mut seen = HashSet::new();
        for r in &regions {
            if !seen.insert(r.as_str()) {
                return Err(Error::Validation(format!("duplicate region name '{r}'")));
            }
        }
        let mut ids = HashSet::new();
        for s in &subjects {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate subject id '{}'", s.id)));
            }
            if !s.age.is_finite() || s.age <= T::zero() {
                return Err(Error::Validation(format!("subject '{}' has invalid age {}", s.id, s.age)));
            }
        }
        if let Some(pos) = responses.as_slice().iter().position(|v| !v.is_finite()) {
            let cols = regions.len().max(1);
            return Err(Error::Validation(format!(
                "non-finite response for subject '{}' region '{}'",
                subjects[pos / cols].id,
                regions[pos % cols]
            )));
        }

        let mut order: Vec<usize> = (0..subjects.len()).collect();
        order.sort_by(|&a, &b| subjects[a].id.cmp(&subjects[b].id));
        let responses = responses.select_rows(&order);
        let mut slots: Vec<Option<Subject<T>>> = subjects.into_iter().map(Some).collect();
        let subjects = order.iter().map(|&i| slots[i].take().expect("permutation")).collect();
        Ok(Cohort { subjects, regions, responses })
    }

    pub fn empty_like(&self) -> Self {
        Cohort { subjects: Vec::new(), regions: self.regions.clone(), responses: Matrix::zeros(0, self.regions.len()) }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subjects(&self) -> &[Subject<T>] {
        &self.subjects
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn responses(&self) -> &Matrix<T> {
        &self.responses
    }

    pub fn ids(&self) -> Vec<&str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn races(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.race.clone()).collect()
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r == name)
    }

    pub fn region_values(&self, d: usize) -> Vec<T> {
        self.responses.column(d)
    }

    /// Subjects at the given positions; order follows `idx`, which callers keep ascending.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Cohort {
            subjects: idx.iter().map(|&i| self.subjects[i].clone()).collect(),
            regions: self.regions.clone(),
            responses: self.responses.select_rows(idx),
        }
    }

    /// Subjects whose id is in `ids`.
    pub fn subset_ids(&self, ids: &HashSet<String>) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| ids.contains(&self.subjects[i].id)).collect();
        self.subset(&idx)
    }

    /// Canonical CSV text of the covariates and features files.
    pub fn to_csv_strings(&self) -> (String, String) {
        let has_site = self.subjects.iter().any(|s| s.site.is_some());
        let has_qc = self.subjects.iter().any(|s| s.qc_score.is_some());
        let mut cov = String::from("id,age,sex,race");
        if has_site {
            cov.push_str(",site");
        }
        if has_qc {
            cov.push_str(",qc_score");
        }
        cov.push('\n');
        for s in &self.subjects {
            cov.push_str(&format!("{},{},{},{}", s.id, s.age, s.sex, s.race));
            if has_site {
                cov.push(',');
                cov.push_str(s.site.as_deref().unwrap_or(""));
            }
            if has_qc {
                cov.push(',');
                if let Some(q) = s.qc_score {
                    cov.push_str(&q.to_string());
                }
            }
            cov.push('\n');
        }

        let mut feat = String::from("id");
        for r in &self.regions {
            feat.push(',');
            feat.push_str(r);
        }
        feat.push('\n');
        for (s, row) in self.subjects.iter().zip(self.responses.row_iter()) {
            feat.push_str(&s.id);
            for v in row {
                feat.push(',');
                feat.push_str(&v.to_string());
            }
            feat.push('\n');
        }
        if self.regions.is_empty() {
            // row_iter yields nothing for zero-width matrices
            feat = String::from("id\n");
            for s in &self.subjects {
                feat.push_str(&s.id);
                feat.push('\n');
            }
        }
        (cov, feat)
    }

    /// SHA-256 over the canonical CSV representation, hex encoded.
    pub fn content_hash(&self) -> String {
        let (cov, feat) = self.to_csv_strings();
        let mut h = Sha256::new();
        h.update(cov.as_bytes());
        h.update(b"\0");
        h.update(feat.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_csv(&self, covariates_path: &Path, features_path: &Path) -> Result<()> {
        let (cov, feat) = self.to_csv_strings();
        fs::write(covariates_path, cov).map_err(|e| Error::io(covariates_path, e))?;
        fs::write(features_path, feat).map_err(|e| Error::io(features_path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    /// Subjects present in only one of the two files.
    pub dropped_unmatched: usize,
    /// Subjects with an empty or NA age, sex or race.
    pub dropped_missing_covariates: usize,
}

impl LoadReport {
    pub fn warning_count(&self) -> usize {
        self.dropped_unmatched + self.dropped_missing_covariates
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCohort<T> {
    pub cohort: Cohort<T>,
    pub report: LoadReport,
}

const MISSING: [&str; 6] = ["", "NA", "NaN", "na", "nan", "null"];

fn is_missing(s: &str) -> bool {
    MISSING.contains(&s)
}

/// Header and records of a CSV file, with surrounding whitespace trimmed.
pub fn open_table(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    open_csv(path)
}

pub(crate) fn open_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) => Error::io(path, std::io::Error::new(io.kind(), io.to_string())),
            _ => Error::csv(path, &e),
        })?;
    let headers: Vec<String> = rdr.headers().map_err(|e| Error::csv(path, &e))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec.map_err(|e| Error::csv(path, &e))?);
    }
    Ok((headers, rows))
}

pub(crate) fn parse_num<T: Scalar>(path: &Path, row: usize, column: &str, value: &str) -> Result<T> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(T::lit)
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: column.to_string(),
            value: value.to_string(),
            expected: "finite number",
        })
}

/// Reads only the covariates file. Subjects with missing required covariates are
/// skipped; their ids are returned alongside the parsed subjects.
pub fn load_covariates<T: Scalar>(path: &Path, schema: &LabelSchema) -> Result<(Vec<Subject<T>>, Vec<String>)> {
    let (headers, rows) = open_csv(path)?;
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut required = [0usize; 4];
    for (slot, name) in required.iter_mut().zip(["id", "age", "sex", "race"]) {
        *slot = col(name).ok_or_else(|| {
            Error::Schema(format!("covariates file {} is missing required column '{name}'", path.display()))
        })?;
    }
    let [c_id, c_age, c_sex, c_race] = required;
    let c_site = col("site");
    let c_qc = col("qc_score");

    let mut out = Vec::with_capacity(rows.len());
    let mut missing = Vec::new();
    let mut ids = HashSet::new();
    for (i, rec) in rows.iter().enumerate() {
        let row = i + 1;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let id = get(c_id);
        if id.is_empty() {
            return Err(Error::Validation(format!("{}: empty id at row {row}", path.display())));
        }
        if !ids.insert(id.to_string()) {
            return Err(Error::Validation(format!("{}: duplicate id '{id}'", path.display())));
        }
        let (age_s, sex_s, race_s) = (get(c_age), get(c_sex), get(c_race));
        if is_missing(age_s) || is_missing(sex_s) || is_missing(race_s) {
            missing.push(id.to_string());
            continue;
        }
        let age: T = parse_num(path, row, "age", age_s)?;
        if age <= T::zero() {
            return Err(Error::Validation(format!("{}: age must be positive at row {row}", path.display())));
        }
        let sex = Sex::parse(sex_s).ok_or_else(|| {
            Error::Validation(format!("{}: sex '{sex_s}' at row {row} is not one of F, M", path.display()))
        })?;
        if !schema.knows_race(race_s) {
            return Err(Error::Validation(format!(
                "{}: race '{race_s}' at row {row} is not in the declared label set {:?}",
                path.display(),
                schema.races
            )));
        }
        let site = c_site.map(get).filter(|s| !is_missing(s)).map(String::from);
        let qc_score = match c_qc.map(get) {
            Some(q) if !is_missing(q) => Some(parse_num(path, row, "qc_score", q)?),
            _ => None,
        };
        out.push(Subject { id: id.to_string(), age, sex, race: race_s.to_string(), site, qc_score });
    }
    Ok((out, missing))
}

/// Reads the features file into `(regions, id -> row values)`, preserving file order.
pub fn load_features<T: Scalar>(path: &Path) -> Result<(Vec<String>, Vec<(String, Vec<T>)>)> {
    let (headers, rows) = open_csv(path)?;
    if headers.first().map(String::as_str) != Some("id") {
        return Err(Error::Schema(format!("features file {} must start with an 'id' column", path.display())));
    }
    let regions: Vec<String> = headers[1..].to_vec();
    let mut seen = HashSet::new();
    for r in &regions {
        if r.is_empty() || !seen.insert(r.as_str()) {
            return Err(Error::Schema(format!("features file {}: empty or duplicate region name '{r}'", path.display())));
        }
    }
    let mut out = Vec::with_capacity(rows.len());
    let mut ids = HashSet::new();
    for (i, rec) in rows.iter().enumerate() {
        let row = i + 1;
        let id = rec.get(0).unwrap_or("");
        if id.is_empty() {
            return Err(Error::Validation(format!("{}: empty id at row {row}", path.display())));
        }
        if !ids.insert(id.to_string()) {
            return Err(Error::Validation(format!("{}: duplicate id '{id}'", path.display())));
        }
        if rec.len() != headers.len() {
            return Err(Error::Schema(format!(
                "{}: row {row} has {} fields, header has {}",
                path.display(),
                rec.len(),
                headers.len()
            )));
        }
        let vals = regions
            .iter()
            .enumerate()
            .map(|(j, r)| parse_num(path, row, r, rec.get(j + 1).unwrap_or("")))
            .collect::<Result<Vec<T>>>()?;
        out.push((id.to_string(), vals));
    }
    Ok((regions, out))
}

/// Loads and joins the covariates/features pair.
pub fn load_cohort<T: Scalar>(covariates_path: &Path, features_path: &Path, schema: &LabelSchema) -> Result<LoadedCohort<T>> {
    let (subjects, excluded) = load_covariates::<T>(covariates_path, schema)?;
    let (regions, feats) = load_features::<T>(features_path)?;
    let feat_map: HashMap<&str, &Vec<T>> = feats.iter().map(|(id, v)| (id.as_str(), v)).collect();
    let cov_ids: HashSet<&str> = subjects.iter().map(|s| s.id.as_str()).collect();

    let mut kept = Vec::with_capacity(subjects.len());
    let mut data = Vec::with_capacity(subjects.len() * regions.len());
    let mut unmatched = 0;
    for s in &subjects {
        match feat_map.get(s.id.as_str()) {
            Some(v) => {
                data.extend_from_slice(v);
                kept.push(s.clone());
            }
            None => unmatched += 1,
        }
    }
    // feature rows whose covariates were excluded as missing are counted once, below
    let excluded_set: HashSet<&str> = excluded.iter().map(String::as_str).collect();
    unmatched += feats
        .iter()
        .filter(|(id, _)| !cov_ids.contains(id.as_str()) && !excluded_set.contains(id.as_str()))
        .count();

    let report = LoadReport { dropped_unmatched: unmatched, dropped_missing_covariates: excluded.len() };
    if report.dropped_unmatched > 0 {
        log::warn!("dropped {} subject(s) present in only one input file", report.dropped_unmatched);
    }
    if report.dropped_missing_covariates > 0 {
        log::warn!("excluded {} subject(s) with missing age, sex or race", report.dropped_missing_covariates);
    }
    let n = kept.len();
    let responses = Matrix::from_vec(n, regions.len(), data)?;
    Ok(LoadedCohort { cohort: Cohort::new(kept, regions, responses)?, report })
}

/// Keeps subjects with `qc_score >= min_qc`. `None` keeps everyone.
pub fn qc_filter<T: Scalar>(cohort: &Cohort<T>, min_qc: Option<T>) -> Result<Cohort<T>> {
    let Some(min_qc) = min_qc else {
        return Ok(cohort.clone());
    };
    if let Some(s) = cohort.subjects().iter().find(|s| s.qc_score.is_none()) {
        return Err(Error::Config(format!(
            "a QC threshold was given but subject '{}' has no qc_score",
            s.id
        )));
    }
    let idx: Vec<usize> = (0..cohort.len())
        .filter(|&i| cohort.subjects()[i].qc_score.is_some_and(|q| q >= min_qc))
        .collect();
    if idx.is_empty() && !cohort.is_empty() {
        log::warn!("QC threshold {min_qc} removed every subject");
    }
    Ok(cohort.subset(&idx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratifyKey {
    Race,
    Sex,
    Site,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// Train fraction per race label.
    pub fractions: BTreeMap<String, f64>,
    /// Train fraction for race labels absent from `fractions`.
    pub default_fraction: f64,
    pub seed: u64,
    pub stratify_keys: Vec<StratifyKey>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { fractions: BTreeMap::new(), default_fraction: 0.8, seed: 0, stratify_keys: vec![StratifyKey::Race] }
    }
}

impl SplitSpec {
    pub fn uniform(fraction: f64, seed: u64) -> Self {
        SplitSpec { default_fraction: fraction, seed, ..Default::default() }
    }

    pub fn with_fractions<I: IntoIterator<Item = (S, f64)>, S: Into<String>>(fractions: I, seed: u64) -> Self {
        SplitSpec {
            fractions: fractions.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            seed,
            ..Default::default()
        }
    }

    fn fraction_for(&self, race: &str) -> f64 {
        self.fractions.get(race).copied().unwrap_or(self.default_fraction)
    }
}

#[derive(Debug, Clone)]
pub struct Split<T> {
    pub train: Cohort<T>,
    pub test: Cohort<T>,
}

/// Number of training subjects for a group: `floor(fraction·n)`, but at least one when `fraction > 0`.
pub fn train_count(fraction: f64, n: usize) -> usize {
    if n == 0 || fraction <= 0.0 {
        return 0;
    }
    // tolerance absorbs products such as 0.29·100 = 28.999…
    let k = (fraction * n as f64 + 1e-9).floor() as usize;
    k.clamp(1, n)
}

fn group_key<T>(s: &Subject<T>, keys: &[StratifyKey]) -> Vec<String> {
    keys.iter()
        .map(|k| match k {
            StratifyKey::Race => s.race.clone(),
            StratifyKey::Sex => s.sex.to_string(),
            StratifyKey::Site => s.site.clone().unwrap_or_default(),
        })
        .collect()
}

pub fn stratified_split<T: Scalar>(cohort: &Cohort<T>, spec: &SplitSpec) -> Result<Split<T>> {
    let check = |f: f64, what: &str| {
        if !(0.0..=1.0).contains(&f) {
            Err(Error::Validation(format!("train fraction {f} for {what} is outside [0, 1]")))
        } else {
            Ok(())
        }
    };
    check(spec.default_fraction, "the default")?;
    let present: BTreeSet<&str> = cohort.subjects().iter().map(|s| s.race.as_str()).collect();
    for (label, &f) in &spec.fractions {
        check(f, label)?;
        if !present.contains(label.as_str()) {
            return Err(Error::Validation(format!("split fraction given for race '{label}' absent from the cohort")));
        }
    }

    let mut keys = spec.stratify_keys.clone();
    keys.sort();
    keys.dedup();
    let mut groups: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
    for (i, s) in cohort.subjects().iter().enumerate() {
        groups.entry(group_key(s, &keys)).or_default().push(i);
    }

    let mut rng = stream_rng(spec.seed, 0);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for members in groups.values() {
        let race = &cohort.subjects()[members[0]].race;
        let frac = if keys.contains(&StratifyKey::Race) { spec.fraction_for(race) } else { spec.default_fraction };
        let k = train_count(frac, members.len());
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        train_idx.extend_from_slice(&shuffled[..k]);
        test_idx.extend_from_slice(&shuffled[k..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    if test_idx.is_empty() {
        log::warn!("split left the test set empty");
    }
    if train_idx.is_empty() {
        log::warn!("split left the training set empty");
    }
    Ok(Split { train: cohort.subset(&train_idx), test: cohort.subset(&test_idx) })
}

/// Per-cohort demographic summary used in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub n: usize,
    pub pct_female: f64,
    pub pct_male: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    /// Race label -> percentage, in label order.
    pub race_pct: BTreeMap<String, f64>,
}

impl Demographics {
    pub fn of<T: Scalar>(cohort: &Cohort<T>, schema: &LabelSchema) -> Self {
        let n = cohort.len();
        let nf = n.max(1) as f64;
        let females = cohort.subjects().iter().filter(|s| s.sex == Sex::F).count() as f64;
        let ages: Vec<f64> = cohort.subjects().iter().map(|s| s.age.as_f64()).collect();
        let age_mean = crate::scalar::mean(&ages).unwrap_or(f64::NAN);
        let age_sd = crate::scalar::sample_variance(&ages).map_or(f64::NAN, f64::sqrt);
        let race_pct = schema
            .races
            .iter()
            .map(|r| {
                let c = cohort.subjects().iter().filter(|s| &s.race == r).count() as f64;
                (r.clone(), 100.0 * c / nf)
            })
            .collect();
        Demographics {
            n,
            pct_female: 100.0 * females / nf,
            pct_male: 100.0 * (n as f64 - females) / nf,
            age_mean,
            age_sd,
            race_pct,
        }
    }
}
