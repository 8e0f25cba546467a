//! Synthetic cohorts with known age curves and injectable group effects.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Sex, Subject};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::seeds::stream_rng;
use crate::warp::WarpParams;

/// Cubic curve in normalized age `t = (age − mid)/half ∈ [−1, 1]`, plus a
/// shift for male subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCurve {
    pub coefficients: [f64; 4],
    pub sex_offset: f64,
}

impl RegionCurve {
    pub fn value(&self, t: f64, sex: Sex) -> f64 {
        let c = &self.coefficients;
        let base = c[0] + t * (c[1] + t * (c[2] + t * c[3]));
        if sex == Sex::M {
            base + self.sex_offset
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Subjects per group (group = race label).
    pub groups: BTreeMap<String, usize>,
    pub age_range: [f64; 2],
    pub n_regions: usize,
    /// Explicit curves, one per region; drawn from the seed when absent.
    pub curves: Option<Vec<RegionCurve>>,
    /// Additive response offset per group.
    pub group_offsets: BTreeMap<String, f64>,
    /// Standard deviation of an extra per-group, per-region offset.
    pub region_offset_sd: f64,
    /// Group-specific multiplier on the noise standard deviation.
    pub group_noise_scale: BTreeMap<String, f64>,
    pub noise_sd: f64,
    /// Noise shape: `noise_sd · warp⁻¹(n)` with `n ~ N(0, 1)`.
    pub noise_skew: Option<WarpParams<f64>>,
    /// Group-specific noise shape, overriding `noise_skew`.
    pub group_noise_skew: BTreeMap<String, WarpParams<f64>>,
    /// Site labels assigned uniformly at random; none when empty.
    pub sites: Vec<String>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            groups: [("A", 100), ("B", 100), ("W", 100)].into_iter().map(|(g, n)| (g.to_string(), n)).collect(),
            age_range: [20.0, 80.0],
            n_regions: 10,
            curves: None,
            group_offsets: BTreeMap::new(),
            region_offset_sd: 0.0,
            group_noise_scale: BTreeMap::new(),
            noise_sd: 0.25,
            noise_skew: None,
            group_noise_skew: BTreeMap::new(),
            sites: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub regions: Vec<String>,
    pub curves: Vec<RegionCurve>,
    /// Effective offset per group and region (`groups × regions`, group order of the spec).
    pub offsets: BTreeMap<String, Vec<f64>>,
    pub spec: SynthSpec,
}

impl Truth {
    /// Noise-free mean response of a subject in region `d` (exact only for symmetric noise).
    pub fn mean_response(&self, d: usize, age: f64, sex: Sex, group: &str) -> f64 {
        let [lo, hi] = self.spec.age_range;
        let t = (age - 0.5 * (lo + hi)) / (0.5 * (hi - lo));
        self.curves[d].value(t, sex) + self.offsets.get(group).map_or(0.0, |o| o[d])
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.values().any(|&n| n == 0) {
            return Err(Error::Config("every declared group needs at least one subject".into()));
        }
        if !(self.noise_sd > 0.0) {
            return Err(Error::Config(format!("noise_sd must be positive, got {}", self.noise_sd)));
        }
        let [lo, hi] = self.age_range;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::Config(format!("invalid age range [{lo}, {hi}]")));
        }
        if self.n_regions == 0 {
            return Err(Error::Config("n_regions must be at least 1".into()));
        }
        if let Some(c) = &self.curves {
            if c.len() != self.n_regions {
                return Err(Error::Config(format!("{} curves for {} regions", c.len(), self.n_regions)));
            }
        }
        if !(self.region_offset_sd >= 0.0) {
            return Err(Error::Config("region_offset_sd must be non-negative".into()));
        }
        for name in self.group_offsets.keys().chain(self.group_noise_scale.keys()).chain(self.group_noise_skew.keys()) {
            if !self.groups.contains_key(name) {
                return Err(Error::Config(format!("group '{name}' has an effect but no subjects")));
            }
        }
        if self.group_noise_scale.values().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("group noise scales must be positive".into()));
        }
        Ok(())
    }
}

fn random_curve(rng: &mut impl Rng) -> RegionCurve {
    let n = |rng: &mut dyn rand::RngCore, sd: f64| sd * rng.sample::<f64, _>(StandardNormal);
    RegionCurve {
        coefficients: [rng.random_range(2.0..3.0), rng.random_range(-0.3..0.1), n(rng, 0.1), n(rng, 0.05)],
        sex_offset: n(rng, 0.1),
    }
}

fn region_name(d: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(3);
    format!("region_{d:0width$}")
}

/// Draws a cohort and its ground truth. Covariates come from stream 0 and
/// each region from its own stream, so the result does not depend on how
/// regions are scheduled.
pub fn generate<T: Scalar>(spec: &SynthSpec) -> Result<(Cohort<T>, Truth)> {
    spec.validate()?;
    let [lo, hi] = spec.age_range;
    let mut rng = stream_rng(spec.seed, 0);
    let mut subjects = Vec::new();
    let mut group_of = Vec::new();
    for (g, &n) in &spec.groups {
        for i in 0..n {
            let age: f64 = rng.random_range(lo..=hi);
            let site = (!spec.sites.is_empty()).then(|| spec.sites[rng.random_range(0..spec.sites.len())].clone());
            subjects.push(Subject {
                id: format!("sub-{g}{i:05}"),
                age: T::lit(age),
                sex: if i % 2 == 0 { Sex::F } else { Sex::M },
                race: g.clone(),
                site,
                qc_score: None,
            });
            group_of.push(g.clone());
        }
    }

    let groups: Vec<&String> = spec.groups.keys().collect();
    let region_draws: Vec<(RegionCurve, Vec<f64>, Vec<f64>)> = (0..spec.n_regions)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream_rng(spec.seed, 1 + d as u64);
            let curve = match &spec.curves {
                Some(c) => c[d].clone(),
                None => random_curve(&mut rng),
            };
            let offsets: Vec<f64> = groups
                .iter()
                .map(|g| {
                    let base = spec.group_offsets.get(*g).copied().unwrap_or(0.0);
                    let extra = if spec.region_offset_sd > 0.0 {
                        spec.region_offset_sd * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    base + extra
                })
                .collect();
            let values = subjects
                .iter()
                .zip(&group_of)
                .map(|(s, g)| {
                    let gi = groups.iter().position(|x| *x == g).expect("known group");
                    let t = (s.age.as_f64() - 0.5 * (lo + hi)) / (0.5 * (hi - lo));
                    let n: f64 = rng.sample(StandardNormal);
                    let shape = spec.group_noise_skew.get(g).or(spec.noise_skew.as_ref());
                    let e = shape.map_or(n, |w| w.inverse(n));
                    let scale = spec.group_noise_scale.get(g).copied().unwrap_or(1.0);
                    curve.value(t, s.sex) + offsets[gi] + spec.noise_sd * scale * e
                })
                .collect();
            (curve, offsets, values)
        })
        .collect();

    let regions: Vec<String> = (0..spec.n_regions).map(|d| region_name(d, spec.n_regions)).collect();
    let n = subjects.len();
    let mut responses = Matrix::zeros(n, spec.n_regions);
    for (d, (_, _, values)) in region_draws.iter().enumerate() {
        for (i, &v) in values.iter().enumerate() {
            responses[(i, d)] = T::lit(v);
        }
    }
    let mut offsets: BTreeMap<String, Vec<f64>> = groups.iter().map(|g| ((*g).clone(), Vec::new())).collect();
    let mut curves = Vec::with_capacity(spec.n_regions);
    for (curve, o, _) in region_draws {
        curves.push(curve);
        for (g, v) in groups.iter().zip(o) {
            offsets.get_mut(*g).expect("group").push(v);
        }
    }
    let cohort = Cohort::new(subjects, regions.clone(), responses)?;
    Ok((cohort, Truth { regions, curves, offsets, spec: spec.clone() }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> SynthSpec {
        SynthSpec {
            groups: [("A", n), ("B", n), ("W", n)].into_iter().map(|(g, n)| (g.to_string(), n)).collect(),
            n_regions: 4,
            seed: 42,
            ..Default::default()
        }
    }

    fn group_mean(c: &Cohort<f64>, g: &str, d: usize) -> f64 {
        let v: Vec<f64> = (0..c.len()).filter(|&i| c.subjects()[i].race == g).map(|i| c.responses()[(i, d)]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn reproducible_per_seed() {
        let (a, _) = generate::<f64>(&spec(50)).unwrap();
        let (b, _) = generate::<f64>(&spec(50)).unwrap();
        assert_eq!(a.to_csv_strings(), b.to_csv_strings());
        let (c, _) = generate::<f64>(&SynthSpec { seed: 43, ..spec(50) }).unwrap();
        assert_ne!(a.to_csv_strings(), c.to_csv_strings());
    }

    #[test]
    fn null_groups_differ_by_sampling_error_only() {
        let n = 2000;
        let (c, truth) = generate::<f64>(&spec(n)).unwrap();
        for d in 0..4 {
            // the curve's spread over age adds to the noise
            let spread: Vec<f64> = c.region_values(d);
            let sd = crate::scalar::sample_variance(&spread).unwrap().sqrt();
            let tol = 4.0 * sd * (2.0 / n as f64).sqrt();
            assert!((group_mean(&c, "A", d) - group_mean(&c, "W", d)).abs() < tol);
        }
        assert!(truth.offsets.values().flatten().all(|&o| o == 0.0));
    }

    #[test]
    fn offsets_shift_group_means() {
        let mut s = spec(3000);
        s.group_offsets = [("A".to_string(), -0.5)].into_iter().collect();
        let (c, truth) = generate::<f64>(&s).unwrap();
        for d in 0..4 {
            let diff = group_mean(&c, "A", d) - group_mean(&c, "W", d);
            assert!((diff + 0.5).abs() < 0.06, "{diff}");
        }
        assert_eq!(truth.offsets["A"], vec![-0.5; 4]);
    }

    #[test]
    fn marginal_moments_match_truth() {
        let n = 4000;
        let (c, truth) = generate::<f64>(&SynthSpec { groups: [("W".to_string(), n)].into(), ..spec(0) }).unwrap();
        for d in 0..4 {
            let expected: f64 = c
                .subjects()
                .iter()
                .map(|s| truth.mean_response(d, s.age, s.sex, &s.race))
                .sum::<f64>()
                / n as f64;
            assert!((group_mean(&c, "W", d) - expected).abs() < 4.0 * 0.25 / (n as f64).sqrt());
        }
    }

    #[test]
    fn sexes_balanced_and_ages_in_range() {
        let (c, _) = generate::<f64>(&spec(101)).unwrap();
        for g in ["A", "B", "W"] {
            let f = c.subjects().iter().filter(|s| s.race == g && s.sex == Sex::F).count();
            assert_eq!(f, 51);
        }
        assert!(c.subjects().iter().all(|s| (20.0..=80.0).contains(&s.age)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate::<f64>(&SynthSpec { noise_sd: 0.0, ..spec(5) }).is_err());
        let mut s = spec(5);
        s.group_offsets.insert("Z".into(), 1.0);
        assert!(generate::<f64>(&s).is_err());
        let mut s = spec(5);
        s.groups.insert("Q".into(), 0);
        assert!(generate::<f64>(&s).is_err());
    }

    #[test]
    fn spec_json_uses_defaults() {
        let s: SynthSpec = serde_json::from_str(r#"{"groups": {"A": 3}, "seed": 9}"#).unwrap();
        assert_eq!(s.n_regions, 10);
        assert_eq!(s.noise_sd, 0.25);
        assert!(serde_json::from_str::<SynthSpec>(r#"{"grups": {}}"#).is_err());
    }
}
