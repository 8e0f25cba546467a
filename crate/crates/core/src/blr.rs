//! Bayesian linear regression in a warped latent space.
//!
//! Each region is modelled as `warp(y) = Φw + noise` with an isotropic
//! zero-mean Gaussian prior of precision `α` on `w` and noise precision `β`.
//! The posterior over `w` is Gaussian with precision `A = αI + βΦᵀΦ` and mean
//! `m = βA⁻¹Φᵀz`. Hyperparameters `(log α, log β, ε, log δ)` are chosen by
//! minimizing the negative log evidence with L-BFGS.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::design::{apply_design, fit_design, DesignSchema, ModelConfig};
use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky, Matrix};
use crate::optim::{minimize, LbfgsOptions, Termination};
use crate::scalar::{mean, population_variance, Scalar};
use crate::stats::{excess_kurtosis, skewness};
use crate::warp::WarpParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams<T> {
    pub log_alpha: T,
    pub log_beta: T,
    pub warp: WarpParams<T>,
}

impl<T: Scalar> Hyperparams<T> {
    pub fn new(log_alpha: T, log_beta: T, warp: WarpParams<T>) -> Self {
        Hyperparams { log_alpha, log_beta, warp }
    }

    pub fn alpha(&self) -> T {
        self.log_alpha.exp()
    }

    pub fn beta(&self) -> T {
        self.log_beta.exp()
    }

    pub fn to_vec(&self) -> Vec<T> {
        vec![self.log_alpha, self.log_beta, self.warp.epsilon, self.warp.log_delta]
    }

    pub fn from_slice(v: &[T]) -> Self {
        Hyperparams { log_alpha: v[0], log_beta: v[1], warp: WarpParams::new(v[2], v[3]) }
    }
}

/// Location and scale the warp is centred on: the latent response is
/// `c + s·warp((y − c)/s)`. Keeps the latent space in response units, so
/// the warp shapes the distribution without taking over the regression's
/// intercept. `(0, 1)` gives the plain warp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor<T> {
    pub center: T,
    pub scale: T,
}

impl<T: Scalar> Default for Anchor<T> {
    fn default() -> Self {
        Anchor { center: T::zero(), scale: T::one() }
    }
}

impl<T: Scalar> Anchor<T> {
    /// Mean and population standard deviation of `y`.
    pub fn of(y: &[T]) -> Option<Self> {
        let scale = population_variance(y)?.sqrt();
        (scale > T::zero()).then(|| Anchor { center: mean(y).unwrap_or(T::zero()), scale })
    }

    pub fn forward(&self, w: &WarpParams<T>, y: T) -> T {
        if w.is_identity() {
            return y;
        }
        self.center + self.scale * w.forward((y - self.center) / self.scale)
    }

    pub fn inverse(&self, w: &WarpParams<T>, z: T) -> T {
        if w.is_identity() {
            return z;
        }
        self.center + self.scale * w.inverse((z - self.center) / self.scale)
    }
}

/// Everything computed for one evaluation of the evidence.
#[derive(Debug, Clone)]
pub struct Evidence<T> {
    pub nll: T,
    pub mean: Vec<T>,
    pub precision: Cholesky<T>,
    /// Warped responses.
    pub z: Vec<T>,
    /// Gradient with respect to `(log α, log β, ε, log δ)`.
    pub gradient: [T; 4],
}

/// A fixed regression problem whose evidence can be evaluated at many hyperparameters.
pub struct EvidenceProblem<'a, T> {
    phi: &'a Matrix<T>,
    y: &'a [T],
    gram: Matrix<T>,
    anchor: Anchor<T>,
}

impl<'a, T: Scalar> EvidenceProblem<'a, T> {
    pub fn new(phi: &'a Matrix<T>, y: &'a [T]) -> Result<Self> {
        if phi.rows() != y.len() {
            return Err(Error::Validation(format!("design has {} rows for {} responses", phi.rows(), y.len())));
        }
        Ok(EvidenceProblem { phi, y, gram: phi.gram(), anchor: Anchor::default() })
    }

    pub fn with_anchor(mut self, anchor: Anchor<T>) -> Self {
        self.anchor = anchor;
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn m(&self) -> usize {
        self.phi.cols()
    }

    /// Negative log evidence and its gradient.
    pub fn evaluate(&self, h: &Hyperparams<T>) -> Result<Evidence<T>> {
        let (n, m) = (T::from_usize_lossy(self.n()), T::from_usize_lossy(self.m()));
        let half = T::lit(0.5);
        let (alpha, beta) = (h.alpha(), h.beta());

        let Anchor { center: c, scale: s } = self.anchor;
        let mut z = Vec::with_capacity(self.n());
        let mut dz_de = Vec::with_capacity(self.n());
        let mut dz_dl = Vec::with_capacity(self.n());
        let (mut log_jac, mut dj_de, mut dj_dl) = (T::zero(), T::zero(), T::zero());
        if h.warp.is_identity() {
            z.extend_from_slice(self.y);
            for &y in self.y {
                let p = h.warp.partials((y - c) / s);
                dz_de.push(s * p.dz_depsilon);
                dz_dl.push(s * p.dz_dlog_delta);
                dj_de = dj_de + p.dlogjac_depsilon;
                dj_dl = dj_dl + p.dlogjac_dlog_delta;
            }
        } else {
            for &y in self.y {
                let p = h.warp.partials((y - c) / s);
                z.push(c + s * p.z);
                dz_de.push(s * p.dz_depsilon);
                dz_dl.push(s * p.dz_dlog_delta);
                log_jac = log_jac + p.log_jacobian;
                dj_de = dj_de + p.dlogjac_depsilon;
                dj_dl = dj_dl + p.dlogjac_dlog_delta;
            }
        }

        let mut a = self.gram.scaled(beta);
        a.add_diagonal(alpha);
        let chol = Cholesky::new(&a)?;
        let phit_z = self.phi.t_matvec(&z);
        let mean: Vec<T> = chol.solve(&phit_z).into_iter().map(|v| v * beta).collect();
        let fitted = self.phi.matvec(&mean);
        let resid: Vec<T> = z.iter().zip(&fitted).map(|(&a, &b)| a - b).collect();
        let rss = dot(&resid, &resid);
        let mtm = dot(&mean, &mean);
        let energy = half * beta * rss + half * alpha * mtm;
        let ln2pi = T::lit((2.0 * PI).ln());

        let nll = -half * m * h.log_alpha - half * n * h.log_beta + energy + half * chol.log_det() + half * n * ln2pi
            - log_jac;

        let tr_inv = chol.trace_inverse();
        let g_alpha = -half * m + half * alpha * mtm + half * alpha * tr_inv;
        let g_beta = -half * n + half * beta * rss + half * (m - alpha * tr_inv);
        let g_eps = beta * dot(&resid, &dz_de) - dj_de;
        let g_ldelta = beta * dot(&resid, &dz_dl) - dj_dl;

        Ok(Evidence { nll, mean, precision: chol, z, gradient: [g_alpha, g_beta, g_eps, g_ldelta] })
    }

    pub fn neg_log_evidence(&self, h: &Hyperparams<T>) -> Result<T> {
        self.evaluate(h).map(|e| e.nll)
    }
}

/// Negative log evidence of `y` under design `phi` at hyperparameters `h`.
pub fn neg_log_evidence<T: Scalar>(phi: &Matrix<T>, y: &[T], h: &Hyperparams<T>) -> Result<T> {
    EvidenceProblem::new(phi, y)?.neg_log_evidence(h)
}

/// How the warped fit is chosen over the identity-warp fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum WarpSelection {
    /// Keep the warp whenever its evidence is higher at all.
    LowerNll,
    /// Keep the warp only if it lowers the NLL by more than `ln(N)` (BIC for two extra parameters).
    Bic,
    /// Keep the warp only if it lowers the NLL by more than the given margin.
    Margin(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub optimizer: LbfgsOptions,
    pub optimize_warp: bool,
    pub warp_selection: WarpSelection,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            optimizer: LbfgsOptions { f_tol: 1e-6, g_tol: 1e-5, max_iter: 500, ..Default::default() },
            optimize_warp: true,
            warp_selection: WarpSelection::Bic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline<T> {
    /// Mean of the warped training responses.
    pub mean: T,
    /// Population variance of the warped training responses.
    pub variance: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionModel<T> {
    pub region: String,
    /// Posterior weight mean `m`.
    pub weights: Vec<T>,
    /// Cholesky factor of the posterior precision `A`.
    pub precision: Cholesky<T>,
    pub hyperparams: Hyperparams<T>,
    pub anchor: Anchor<T>,
    pub baseline: Baseline<T>,
    pub nll: T,
    /// NLL of the best identity-warp solution, for reference.
    pub identity_nll: T,
    pub warped: bool,
    pub converged: bool,
    pub iterations: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T> {
    /// Latent mean `mᵀφ`.
    pub latent_mean: T,
    /// Modelling variance `φᵀA⁻¹φ`.
    pub model_variance: T,
    /// Noise variance `1/β`.
    pub noise_variance: T,
    /// Point prediction in response units, `warp⁻¹(latent_mean)`.
    pub point: T,
}

impl<T: Scalar> Prediction<T> {
    pub fn total_variance(&self) -> T {
        self.noise_variance + self.model_variance
    }
}

fn optimize<T: Scalar>(
    problem: &EvidenceProblem<'_, T>,
    start: Hyperparams<T>,
    free_warp: bool,
    opts: &LbfgsOptions,
) -> (Hyperparams<T>, T, bool, usize, Termination, Vec<T>) {
    let k = if free_warp { 4 } else { 2 };
    let x0 = &start.to_vec()[..k];
    let objective = |x: &[T], g: &mut [T]| {
        let mut full = start.to_vec();
        full[..k].copy_from_slice(x);
        match problem.evaluate(&Hyperparams::from_slice(&full)) {
            Ok(e) => {
                g.copy_from_slice(&e.gradient[..k]);
                e.nll
            }
            Err(_) => {
                g.iter_mut().for_each(|v| *v = T::nan());
                T::nan()
            }
        }
    };
    let r = minimize(objective, x0, opts);
    let mut full = start.to_vec();
    full[..k].copy_from_slice(&r.x);
    let converged = r.converged();
    (Hyperparams::from_slice(&full), r.f, converged, r.iterations, r.termination, r.history)
}

/// Optimizer trace of a region fit, kept for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct FitTrace<T> {
    pub identity_history: Vec<T>,
    pub warped_history: Vec<T>,
}

/// Fits one region. Starts from `log α = 0`, `log β = −ln Var(y)` at the
/// identity warp, optimizes `(log α, log β)`, then (if enabled) all four
/// hyperparameters from that optimum, and keeps the warped solution only if
/// it passes `opts.warp_selection`.
pub fn fit_region<T: Scalar>(region: &str, phi: &Matrix<T>, y: &[T], opts: &FitOptions) -> Result<RegionModel<T>> {
    fit_region_traced(region, phi, y, opts).map(|(m, _)| m)
}

pub fn fit_region_traced<T: Scalar>(
    region: &str,
    phi: &Matrix<T>,
    y: &[T],
    opts: &FitOptions,
) -> Result<(RegionModel<T>, FitTrace<T>)> {
    if y.len() < 2 {
        return Err(Error::Validation(format!("region '{region}': need at least 2 subjects, got {}", y.len())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("region '{region}': non-finite response")));
    }
    let Some(anchor) = Anchor::of(y) else {
        return Err(Error::Validation(format!("region '{region}': response is constant")));
    };
    let var = anchor.scale * anchor.scale;
    let problem = EvidenceProblem::new(phi, y)?.with_anchor(anchor);
    let init = Hyperparams::new(T::zero(), -var.ln(), WarpParams::identity());

    let (id_h, id_nll, id_conv, id_iter, id_term, id_hist) = optimize(&problem, init, false, &opts.optimizer);
    let mut chosen = (id_h, id_nll, id_conv, id_iter, id_term, false);
    let mut warped_history = Vec::new();

    if opts.optimize_warp {
        let (w_h, w_nll, w_conv, w_iter, w_term, w_hist) = optimize(&problem, id_h, true, &opts.optimizer);
        warped_history = w_hist;
        let margin = match opts.warp_selection {
            WarpSelection::LowerNll => T::zero(),
            WarpSelection::Bic => T::from_usize_lossy(y.len()).ln(),
            WarpSelection::Margin(v) => T::lit(v),
        };
        if w_nll.is_finite() && w_nll < id_nll - margin {
            chosen = (w_h, w_nll, w_conv, id_iter + w_iter, w_term, true);
        }
    }

    let (h, nll, converged, iterations, termination, warped) = chosen;
    if !converged {
        log::warn!("region '{region}': optimizer stopped without converging ({termination:?}); keeping best iterate");
    }
    let ev = problem.evaluate(&h)?;
    let baseline = Baseline {
        mean: mean(&ev.z).unwrap_or(T::zero()),
        variance: population_variance(&ev.z).unwrap_or(T::zero()),
    };
    let model = RegionModel {
        region: region.to_string(),
        weights: ev.mean,
        precision: ev.precision,
        hyperparams: h,
        anchor,
        baseline,
        nll,
        identity_nll: id_nll,
        warped,
        converged,
        iterations,
        termination,
    };
    Ok((model, FitTrace { identity_history: id_hist, warped_history }))
}

/// Predictive quantities for every row of `phi`.
pub fn predict_region<T: Scalar>(model: &RegionModel<T>, phi: &Matrix<T>) -> Result<Vec<Prediction<T>>> {
    if phi.cols() != model.weights.len() {
        return Err(Error::Schema(format!(
            "region '{}': design has {} columns, model expects {}",
            model.region,
            phi.cols(),
            model.weights.len()
        )));
    }
    let noise_variance = T::one() / model.hyperparams.beta();
    Ok(phi
        .row_iter()
        .map(|row| {
            let latent_mean = dot(&model.weights, row);
            Prediction {
                latent_mean,
                model_variance: model.precision.inv_quad(row).max(T::zero()),
                noise_variance,
                point: model.anchor.inverse(&model.hyperparams.warp, latent_mean),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub training_cohort_hash: String,
    pub n_train: usize,
    pub seed: u64,
    pub software_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormativeModel<T> {
    pub config: ModelConfig,
    pub schema: DesignSchema,
    pub regions: Vec<RegionModel<T>>,
    pub provenance: Provenance,
}

/// Fits one model per cohort region, in parallel over regions. Results do
/// not depend on the number of worker threads.
pub fn fit_normative<T: Scalar>(
    cohort: &Cohort<T>,
    config: &ModelConfig,
    opts: &FitOptions,
    seed: u64,
) -> Result<NormativeModel<T>> {
    let (dm, schema) = fit_design(cohort, config)?;
    let phi = &dm.values;
    let fits: Vec<Result<RegionModel<T>>> = cohort
        .regions()
        .par_iter()
        .enumerate()
        .map(|(d, name)| fit_region(name, phi, &cohort.region_values(d), opts))
        .collect();
    let regions = fits.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(NormativeModel {
        config: config.clone(),
        schema,
        regions,
        provenance: Provenance {
            training_cohort_hash: cohort.content_hash(),
            n_train: cohort.len(),
            seed,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}

impl<T: Scalar> NormativeModel<T> {
    pub fn region_names(&self) -> Vec<String> {
        self.regions.iter().map(|r| r.region.clone()).collect()
    }

    /// Column index in `cohort` for each model region.
    pub fn match_regions(&self, cohort: &Cohort<T>) -> Result<Vec<usize>> {
        let mut idx = Vec::with_capacity(self.regions.len());
        let mut missing = Vec::new();
        for r in &self.regions {
            match cohort.region_index(&r.region) {
                Some(i) => idx.push(i),
                None => missing.push(r.region.clone()),
            }
        }
        if missing.is_empty() {
            Ok(idx)
        } else {
            Err(Error::RegionMismatch { missing })
        }
    }
}

/// Z-scores, residual errors and point predictions (subjects × regions).
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationMatrix<T> {
    pub ids: Vec<String>,
    pub regions: Vec<String>,
    /// `(z − ẑ)/√(σ² + σ*²)` in the latent space.
    pub z: Matrix<T>,
    /// `y − ŷ` in response units.
    pub errors: Matrix<T>,
    /// `ŷ = warp⁻¹(ẑ)` in response units.
    pub predictions: Matrix<T>,
}

/// Full evaluation of a model on a cohort; the deviation matrix plus the latent quantities metrics need.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub deviations: DeviationMatrix<T>,
    pub observed: Matrix<T>,
    pub latent_observed: Matrix<T>,
    pub latent_mean: Matrix<T>,
    pub predictive_variance: Matrix<T>,
    /// Ages clamped to the knot range while building the design.
    pub clamped: usize,
}

pub fn evaluate<T: Scalar>(model: &NormativeModel<T>, cohort: &Cohort<T>) -> Result<Evaluation<T>> {
    let cols = model.match_regions(cohort)?;
    let dm = apply_design(cohort.subjects(), &model.schema)?;
    let n = cohort.len();
    let d = model.regions.len();

    const SLOTS: usize = 7;
    let per_region: Vec<Result<Vec<[T; SLOTS]>>> = model
        .regions
        .par_iter()
        .zip(cols.par_iter())
        .map(|(rm, &c)| {
            let preds = predict_region(rm, &dm.values)?;
            let y = cohort.region_values(c);
            Ok(preds
                .iter()
                .zip(&y)
                .map(|(p, &yi)| {
                    let zi = rm.anchor.forward(&rm.hyperparams.warp, yi);
                    let s2 = p.total_variance();
                    [(zi - p.latent_mean) / s2.sqrt(), yi - p.point, p.point, yi, zi, p.latent_mean, s2]
                })
                .collect())
        })
        .collect();
    let per_region = per_region.into_iter().collect::<Result<Vec<_>>>()?;

    let mut mats: Vec<Matrix<T>> = (0..SLOTS).map(|_| Matrix::zeros(n, d)).collect();
    for (j, col) in per_region.iter().enumerate() {
        for (i, vals) in col.iter().enumerate() {
            for (k, &v) in vals.iter().enumerate() {
                mats[k][(i, j)] = v;
            }
        }
    }
    let mut it = mats.into_iter();
    let mut next = || it.next().expect("matrix");
    let (z, errors, predictions, observed, latent_observed, latent_mean, predictive_variance) =
        (next(), next(), next(), next(), next(), next(), next());
    if let Some(bad) = z.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite deviation for subject '{}' region '{}'",
            cohort.subjects()[bad / d.max(1)].id,
            model.regions[bad % d.max(1)].region
        )));
    }
    Ok(Evaluation {
        deviations: DeviationMatrix {
            ids: cohort.subjects().iter().map(|s| s.id.clone()).collect(),
            regions: model.region_names(),
            z,
            errors,
            predictions,
        },
        observed,
        latent_observed,
        latent_mean,
        predictive_variance,
        clamped: dm.clamped,
    })
}

pub fn deviations<T: Scalar>(model: &NormativeModel<T>, cohort: &Cohort<T>) -> Result<DeviationMatrix<T>> {
    evaluate(model, cohort).map(|e| e.deviations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics<T> {
    pub region: String,
    pub explained_variance: Option<T>,
    pub msll: Option<T>,
    pub skew: Option<T>,
    pub kurtosis: Option<T>,
}

/// `1 − Var(y − ŷ)/Var(y)` with population variances; `None` when `Var(y) = 0`.
pub fn explained_variance<T: Scalar>(y: &[T], yhat: &[T]) -> Option<T> {
    let vy = population_variance(y)?;
    if vy <= T::zero() {
        return None;
    }
    let resid: Vec<T> = y.iter().zip(yhat).map(|(&a, &b)| a - b).collect();
    Some(T::one() - population_variance(&resid)? / vy)
}

/// Mean standardized log loss of Gaussian predictions `(mean, var)` for `z`,
/// relative to the trivial predictor `N(base_mean, base_var)`.
pub fn msll<T: Scalar>(z: &[T], pred_mean: &[T], pred_var: &[T], base_mean: T, base_var: T) -> Option<T> {
    if z.is_empty() || !(base_var > T::zero()) {
        return None;
    }
    let half = T::lit(0.5);
    let two_pi = T::lit(2.0 * PI);
    let loss = |zi: T, mu: T, v: T| half * (two_pi * v).ln() + (zi - mu) * (zi - mu) / (T::lit(2.0) * v);
    let n = T::from_usize_lossy(z.len());
    let model: T = z.iter().zip(pred_mean).zip(pred_var).map(|((&zi, &mu), &v)| loss(zi, mu, v)).sum::<T>() / n;
    let trivial: T = z.iter().map(|&zi| loss(zi, base_mean, base_var)).sum::<T>() / n;
    Some(model - trivial)
}

/// Per-region metrics over the rows in `rows` (all rows when `None`).
pub fn metrics_from_evaluation<T: Scalar>(
    model: &NormativeModel<T>,
    eval: &Evaluation<T>,
    rows: Option<&[usize]>,
) -> Vec<FitMetrics<T>> {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..eval.observed.rows()).collect();
            &all
        }
    };
    let pick = |m: &Matrix<T>, j: usize| rows.iter().map(|&i| m[(i, j)]).collect::<Vec<T>>();
    model
        .regions
        .iter()
        .enumerate()
        .map(|(j, rm)| {
            let y = pick(&eval.observed, j);
            let yhat = pick(&eval.deviations.predictions, j);
            let z = pick(&eval.deviations.z, j);
            FitMetrics {
                region: rm.region.clone(),
                explained_variance: explained_variance(&y, &yhat),
                msll: msll(
                    &pick(&eval.latent_observed, j),
                    &pick(&eval.latent_mean, j),
                    &pick(&eval.predictive_variance, j),
                    rm.baseline.mean,
                    rm.baseline.variance,
                ),
                skew: skewness(&z),
                kurtosis: excess_kurtosis(&z),
            }
        })
        .collect()
}

pub fn fit_metrics<T: Scalar>(model: &NormativeModel<T>, cohort: &Cohort<T>) -> Result<Vec<FitMetrics<T>>> {
    if cohort.is_empty() {
        return Err(Error::Validation("fit metrics need a non-empty cohort".into()));
    }
    let eval = evaluate(model, cohort)?;
    Ok(metrics_from_evaluation(model, &eval, None))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleHeader {
    format: String,
    config: ModelConfig,
    schema: DesignSchema,
    provenance: Provenance,
    regions: Vec<String>,
}

const BUNDLE_FORMAT: &str = "normgauge-model/1";

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

impl<T: Scalar> NormativeModel<T> {
    /// Writes `model.json` and `regions.json` into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = BundleHeader {
            format: BUNDLE_FORMAT.into(),
            config: self.config.clone(),
            schema: self.schema.clone(),
            provenance: self.provenance.clone(),
            regions: self.region_names(),
        };
        write_json(&dir.join("model.json"), &header)?;
        write_json(&dir.join("regions.json"), &self.regions)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: BundleHeader = read_json(&dir.join("model.json"))?;
        if header.format != BUNDLE_FORMAT {
            return Err(Error::Schema(format!("unsupported model bundle format '{}'", header.format)));
        }
        let regions: Vec<RegionModel<T>> = read_json(&dir.join("regions.json"))?;
        let names: Vec<&str> = regions.iter().map(|r| r.region.as_str()).collect();
        if names != header.regions.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Schema("model.json and regions.json list different regions".into()));
        }
        for r in &regions {
            if r.weights.len() != header.schema.columns.len() || r.precision.dim() != r.weights.len() {
                return Err(Error::Schema(format!("region '{}' does not match the design schema", r.region)));
            }
            Cholesky::from_lower(r.precision.lower().clone())?;
        }
        Ok(NormativeModel { config: header.config, schema: header.schema, regions, provenance: header.provenance })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::stream_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn one_feature() -> (Matrix<f64>, Vec<f64>) {
        (Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(), vec![1.0, 3.0])
    }

    #[test]
    fn worked_example_evidence() {
        let (phi, y) = one_feature();
        let h = Hyperparams::new(0.0, 0.0, WarpParams::identity());
        let ev = EvidenceProblem::new(&phi, &y).unwrap().evaluate(&h).unwrap();
        assert!((ev.mean[0] - 4.0 / 3.0).abs() < 1e-15);
        let expected = 7.0 / 3.0 + 0.5 * 3f64.ln() + (2.0 * PI).ln();
        assert!((ev.nll - expected).abs() < 1e-12);
        assert!((ev.nll - 4.72052).abs() < 1e-5);
    }

    #[test]
    fn worked_example_prediction() {
        let (phi, y) = one_feature();
        let ev = EvidenceProblem::new(&phi, &y).unwrap().evaluate(&Hyperparams::new(0.0, 0.0, WarpParams::identity())).unwrap();
        let model = RegionModel {
            region: "r".into(),
            weights: ev.mean.clone(),
            precision: ev.precision.clone(),
            hyperparams: Hyperparams::new(0.0, 0.0, WarpParams::identity()),
            anchor: Anchor::default(),
            baseline: Baseline { mean: 2.0, variance: 1.0 },
            nll: ev.nll,
            identity_nll: ev.nll,
            warped: false,
            converged: true,
            iterations: 0,
            termination: Termination::GradientNorm,
        };
        let p = predict_region(&model, &Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap()).unwrap();
        assert!((p[0].latent_mean - 4.0 / 3.0).abs() < 1e-15);
        assert!((p[0].model_variance - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p[0].noise_variance, 1.0);
        assert_eq!(p[0].point, p[0].latent_mean);
        assert_eq!((p[1].latent_mean, p[1].model_variance), (0.0, 0.0));
        let bad = predict_region(&model, &Matrix::zeros(1, 2));
        assert!(matches!(bad, Err(Error::Schema(_))));
    }

    fn random_problem(seed: u64, n: usize, m: usize) -> (Matrix<f64>, Vec<f64>) {
        let mut rng = stream_rng(seed, 0);
        let mut phi = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                phi[(i, j)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let w: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y = phi.matvec(&w).into_iter().map(|v| v + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        (phi, y)
    }

    #[test]
    fn posterior_mean_is_ridge_solution() {
        for seed in 0..10 {
            let (phi, y) = random_problem(seed, 40, 5);
            let h = Hyperparams::new(0.7, -0.3, WarpParams::identity());
            let ev = EvidenceProblem::new(&phi, &y).unwrap().evaluate(&h).unwrap();
            let mut g = phi.gram();
            g.add_diagonal(h.alpha() / h.beta());
            let ridge = Cholesky::new(&g).unwrap().solve(&phi.t_matvec(&y));
            for (a, b) in ev.mean.iter().zip(&ridge) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (phi, y) = random_problem(3, 50, 4);
        let plain = EvidenceProblem::new(&phi, &y).unwrap();
        let anchored = EvidenceProblem::new(&phi, &y).unwrap().with_anchor(Anchor { center: 0.7, scale: 1.9 });
        let mut rng = stream_rng(4, 0);
        for k in 0..40 {
            let prob = if k % 2 == 0 { &plain } else { &anchored };
            let x = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
            ];
            let g = prob.evaluate(&Hyperparams::from_slice(&x)).unwrap().gradient;
            let mut fd = [0.0; 4];
            for k in 0..4 {
                let h = 1e-5;
                let (mut a, mut b) = (x, x);
                a[k] += h;
                b[k] -= h;
                fd[k] = (prob.neg_log_evidence(&Hyperparams::from_slice(&a)).unwrap()
                    - prob.neg_log_evidence(&Hyperparams::from_slice(&b)).unwrap())
                    / (2.0 * h);
            }
            let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
            assert!(num / den < 1e-5, "{g:?} vs {fd:?}");
        }
    }

    /// Marginal likelihood by direct integration over the single weight.
    fn quadrature_nll(phi: &[f64], y: &[f64], h: &Hyperparams<f64>) -> f64 {
        let (alpha, beta) = (h.alpha(), h.beta());
        let z: Vec<f64> = y.iter().map(|&v| h.warp.forward(v)).collect();
        let log_jac: f64 = y.iter().map(|&v| h.warp.log_jacobian(v)).sum();
        let sd = (1.0 / alpha).sqrt();
        let (lo, hi, k) = (-12.0 * sd, 12.0 * sd, 200_000);
        let dw = (hi - lo) / k as f64;
        let mut total = 0.0;
        for i in 0..k {
            let w = lo + (i as f64 + 0.5) * dw;
            let prior = (alpha / (2.0 * PI)).sqrt() * (-0.5 * alpha * w * w).exp();
            let lik: f64 = phi
                .iter()
                .zip(&z)
                .map(|(&p, &zi)| (beta / (2.0 * PI)).sqrt() * (-0.5 * beta * (zi - p * w).powi(2)).exp())
                .product();
            total += prior * lik * dw;
        }
        -(total.ln() + log_jac)
    }

    #[test]
    fn warped_evidence_matches_quadrature() {
        let phi = [0.5, 1.0, 1.5];
        let y = [0.2, 1.4, 2.9];
        let design = Matrix::from_rows(&phi.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap();
        for h in [
            Hyperparams::new(0.0, 0.0, WarpParams::identity()),
            Hyperparams::new(-0.5, 0.4, WarpParams::new(0.3, 0.2)),
            Hyperparams::new(0.8, -0.2, WarpParams::new(-0.7, -0.3)),
        ] {
            let closed = neg_log_evidence(&design, &y, &h).unwrap();
            let oracle = quadrature_nll(&phi, &y, &h);
            assert!(((closed - oracle) / oracle).abs() < 1e-4, "{closed} vs {oracle}");
        }
    }

    #[test]
    fn identity_warp_has_no_jacobian_term() {
        let (phi, y) = random_problem(5, 20, 3);
        let id = neg_log_evidence(&phi, &y, &Hyperparams::new(0.1, 0.2, WarpParams::identity())).unwrap();
        // same value through the general warped path with parameters at the identity
        let tiny = neg_log_evidence(&phi, &y, &Hyperparams::new(0.1, 0.2, WarpParams::new(0.0, 1e-300))).unwrap();
        assert!((id - tiny).abs() < 1e-10);
    }

    fn generative(seed: u64, n: usize, noise: f64) -> (Matrix<f64>, Vec<f64>) {
        let mut rng = stream_rng(seed, 0);
        let mut phi = Matrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let x: f64 = rng.random_range(0.0..1.0);
            phi[(i, 0)] = 1.0;
            phi[(i, 1)] = x;
            y.push(2.0 + 0.0 * x + noise * rng.sample::<f64, _>(StandardNormal));
        }
        (phi, y)
    }

    #[test]
    fn recovers_noise_precision_without_warp() {
        let (phi, y) = generative(21, 500, 0.1);
        let m = fit_region("r", &phi, &y, &FitOptions::default()).unwrap();
        let beta = m.hyperparams.beta();
        assert!((80.0..=125.0).contains(&beta), "beta={beta}");
        assert!(m.hyperparams.warp.epsilon.abs() < 0.1);
        assert!(m.converged);
    }

    #[test]
    fn gaussian_data_does_not_engage_warp() {
        for seed in 30..35 {
            let (phi, y) = generative(seed, 500, 0.1);
            let m = fit_region("r", &phi, &y, &FitOptions::default()).unwrap();
            assert!((m.nll - m.identity_nll).abs() < 1e-3, "seed {seed}: {} vs {}", m.nll, m.identity_nll);
        }
    }

    #[test]
    fn skewed_data_engages_warp() {
        let mut rng = stream_rng(8, 0);
        let truth = WarpParams::new(-1.0, 0.4f64);
        let n = 2000;
        let mut phi = Matrix::zeros(n, 2);
        let mut y = Vec::new();
        for i in 0..n {
            let x: f64 = rng.random_range(0.0..1.0);
            phi[(i, 0)] = 1.0;
            phi[(i, 1)] = x;
            y.push(truth.inverse(0.5 + x + 0.3 * rng.sample::<f64, _>(StandardNormal)));
        }
        let m = fit_region("r", &phi, &y, &FitOptions::default()).unwrap();
        assert!(m.warped);
        assert!(m.nll < m.identity_nll - 10.0);
        let ev = EvidenceProblem::new(&phi, &y).unwrap().with_anchor(m.anchor).evaluate(&m.hyperparams).unwrap();
        let resid: Vec<f64> = ev.z.iter().zip(phi.matvec(&m.weights)).map(|(a, b)| a - b).collect();
        assert!(skewness(&resid).unwrap().abs() < 0.1);
    }

    #[test]
    fn optimizer_history_is_monotone() {
        let (phi, y) = random_problem(9, 80, 3);
        let y: Vec<f64> = y.iter().map(|v| v.exp().min(50.0)).collect();
        let (_, trace) = fit_region_traced("r", &phi, &y, &FitOptions::default()).unwrap();
        for h in [&trace.identity_history, &trace.warped_history] {
            assert!(h.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn constant_response_is_rejected() {
        let (phi, _) = generative(1, 10, 0.1);
        let err = fit_region("r", &phi, &[2.0; 10], &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(m) if m.contains("constant")));
        assert!(fit_region("r", &Matrix::zeros(1, 1), &[1.0], &FitOptions::default()).is_err());
    }

    #[test]
    fn ev_and_msll_examples() {
        assert_eq!(explained_variance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), Some(1.0));
        let ev: f64 = explained_variance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]).unwrap();
        assert!((ev + 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(explained_variance(&[2.0, 2.0], &[1.0, 3.0]), None);

        let z = [0.3, -1.2, 2.0, 0.1];
        let v = msll(&z, &[0.5; 4], &[2.0; 4], 0.5, 2.0).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn works_in_f32() {
        let phi = Matrix::from_rows(&[vec![1.0f32], vec![1.0]]).unwrap();
        let nll = neg_log_evidence(&phi, &[1.0, 3.0], &Hyperparams::new(0.0, 0.0, WarpParams::identity())).unwrap();
        assert!((nll - 4.72052).abs() < 1e-4);
    }
}

