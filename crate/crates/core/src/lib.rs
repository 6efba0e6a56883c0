//! Hierarchical shrinkage models for predicting how long a user session will
//! last, from the raw event log to evaluated predictions.
//!
//! The model ladder runs from per-user empirical Bayes shrinkage
//! ([`shrinkage`]) through covariate models with ridge, lasso or boosted-tree
//! links fitted jointly with user effects ([`bcd`]), to Huber-robust variants
//! that absorb corrupted sessions.

pub mod bcd;
pub mod dataset;
pub mod error;
pub mod features;
pub mod gbt;
pub mod model_file;
pub mod pipeline;
pub mod shrinkage;
pub mod simulate;
pub mod solvers;
pub mod stats;
pub mod tuning;

pub use bcd::{bcd_fit, BcdConfig, FittedModel, Link, OracleSpec, UserIndex};
pub use dataset::{Event, Session, SessionDataset, SplitDataset, SplitFractions};
pub use error::{Error, Result};
pub use features::{DesignMatrix, FeatureConfig, FeatureTable, Standardizer};
pub use gbt::{GbtModel, GbtParams};
pub use model_file::ModelFile;
pub use shrinkage::{Model1Fit, VarianceComponents};
pub use solvers::{GramFactorization, LinearCoefficients};
pub use tuning::{EvalReport, Family, Grid, ModelData, Predictor};
