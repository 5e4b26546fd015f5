//! Step-function publication selection models.
//!
//! Fits selection models to replication or meta-study data by maximum
//! likelihood or moment conditions, and produces bias-corrected estimates and
//! confidence intervals for individual published studies.

pub mod cli;
pub mod error;
pub mod correct;
pub mod estimate;
pub mod gmm;
pub mod likelihood;
pub mod model;
pub mod normal;
pub(crate) mod optim;
pub mod quadrature;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{
    marginal_latent_density, CellPartition, EffectDistribution, SelectionFunction, StudyRecord,
};
pub use likelihood::{ModelKind, ModelSpec};
