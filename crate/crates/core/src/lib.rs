//! Cure-rate change-point joint model for longitudinal tumor burden and
//! progression time, fitted by Monte Carlo EM.

pub mod data;
pub mod dist;
pub mod error;
pub mod model;
pub mod params;
pub mod rng;
pub mod estep;
pub mod inference;
pub mod lbfgs;
pub mod mstep;
pub mod mcem;
pub mod simulation;

pub use data::{DesignMeans, GroupLabel, Schema, StudyDataset, SubjectData};
pub use error::{Error, Result};
pub use params::ModelParameters;
