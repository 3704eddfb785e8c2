//! Treatment-response curves for irregularly sampled multivariate
//! time series: second-order LTI responses to dosing events, a
//! covariate-driven fixed effect, and a sparse variational multi-output
//! GP random effect, fitted by per-patient ELBO ascent under a
//! population prior.
//!
//! Everything numerical is generic over [`scalar::Scalar`]; the aliases
//! below fix it to `f64`.

pub mod data;
pub mod elbo;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod lti;
pub mod mean_model;
pub mod mogp;
pub mod optimizer;
pub mod params;
pub mod scalar;
pub mod serialize;
pub mod synthetic;

pub use error::{Error, Result};
pub use mean_model::CovariateBasis;
pub use optimizer::OptimizerConfig;
pub use params::{Hyperparams, ModelConfig};
pub use scalar::Scalar;

pub type Cohort = data::Cohort<f64>;
pub type PatientRecord = data::PatientRecord<f64>;
pub type ObservationSeries = data::ObservationSeries<f64>;
pub type TreatmentSchedule = data::TreatmentSchedule<f64>;
pub type DoseEvent = data::DoseEvent<f64>;
pub type SecondOrderLti = lti::SecondOrderLti<f64>;
pub type LocalParams = params::LocalParams<f64>;
pub type GlobalParams = params::GlobalParams<f64>;
pub type FitResult = optimizer::FitResult<f64>;
pub type FittedModel = serialize::FittedModel<f64>;
pub type Matrix = linalg::Matrix<f64>;
