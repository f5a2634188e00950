//! Hazard-based targeted maximum likelihood estimation of survival
//! probabilities in two-stage resampling designs.
//!
//! The crate is organised the way an analysis flows:
//!
//! - [`data`]: the coarsened longitudinal record, risk-row expansion and CSV I/O.
//! - [`sim`]: the synthetic cohort generator and a large-sample truth oracle.
//! - [`learners`]: logistic IRLS, lasso-logistic and a discrete Super Learner.
//! - [`hazard`]: pooled initial fit of the discrete death hazard.
//! - [`tmle`]: fixed follow-up TMLE and the varied follow-up (stratified / IPCW) variants.
//! - [`comparators`]: Kaplan-Meier, weighted Kaplan-Meier, IPW and the untargeted plug-in.
//! - [`harness`]: Monte Carlo study driver and report emission.

pub mod comparators;
pub mod data;
pub mod error;
pub mod harness;
pub mod hazard;
pub mod learners;
pub mod report;
pub mod rng;
pub mod sim;
pub mod tmle;

pub use error::{Error, Result};
pub use report::{Diagnostics, EstimateReport};
