//! Warped Bayesian linear regression normative models and subgroup bias audits.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common `f64` instantiation.

pub mod audit;
pub mod blr;
pub mod classify;
pub mod cohort;
pub mod design;
pub mod error;
pub mod linalg;
pub mod optim;
pub mod scalar;
pub mod seeds;
pub mod stats;
pub mod synth;
pub mod table;
pub mod warp;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Cohort = cohort::Cohort<f64>;
pub type Subject = cohort::Subject<f64>;
pub type Matrix = linalg::Matrix<f64>;
pub type WarpParams = warp::WarpParams<f64>;
pub type Hyperparams = blr::Hyperparams<f64>;
pub type RegionModel = blr::RegionModel<f64>;
pub type NormativeModel = blr::NormativeModel<f64>;
pub type DeviationMatrix = blr::DeviationMatrix<f64>;
pub type LabeledMatrix = table::LabeledMatrix<f64>;

pub type CohortF32 = cohort::Cohort<f32>;
pub type NormativeModelF32 = blr::NormativeModel<f32>;
