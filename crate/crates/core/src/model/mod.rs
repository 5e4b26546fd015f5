//! Domain types: study records, step selection functions and effect distributions.

mod effect;
mod selection;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use effect::EffectDistribution;
pub use selection::{expected_with, CellPartition, CovariateOffset, SelectionFunction};

use crate::error::{Error, Result};
use crate::normal;
use crate::quadrature::{DEFAULT_NODES, DEFAULT_TOLERANCE, MAX_NODES};

/// One published estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub cluster_id: String,
    pub x: f64,
    pub sigma: f64,
    pub xr: Option<f64>,
    pub sigmar: Option<f64>,
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
    #[serde(default)]
    pub sign_normalized: bool,
}

impl StudyRecord {
    pub fn new(study_id: impl Into<String>, x: f64, sigma: f64) -> Self {
        let study_id = study_id.into();
        StudyRecord {
            cluster_id: study_id.clone(),
            study_id,
            x,
            sigma,
            xr: None,
            sigmar: None,
            covariates: BTreeMap::new(),
            sign_normalized: false,
        }
    }

    pub fn with_replication(mut self, xr: f64, sigmar: f64) -> Self {
        self.xr = Some(xr);
        self.sigmar = Some(sigmar);
        self
    }

    pub fn with_cluster(mut self, cluster_id: impl Into<String>) -> Self {
        self.cluster_id = cluster_id.into();
        self
    }

    pub fn with_covariate(mut self, name: impl Into<String>, value: f64) -> Self {
        self.covariates.insert(name.into(), value);
        self
    }

    pub fn sign_normalized(mut self, flag: bool) -> Self {
        self.sign_normalized = flag;
        self
    }

    /// z-statistic x / sigma.
    pub fn z(&self) -> f64 {
        self.x / self.sigma
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.study_id;
        if !self.x.is_finite() {
            return Err(Error::input(format!("study {id}: x must be finite")));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::input(format!("study {id}: sigma must be positive")));
        }
        if let Some(s) = self.sigmar {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::input(format!("study {id}: sigmar must be positive")));
            }
        }
        if self.xr.is_some_and(|v| !v.is_finite()) {
            return Err(Error::input(format!("study {id}: xr must be finite")));
        }
        if self.xr.is_some() != self.sigmar.is_some() {
            return Err(Error::input(format!("study {id}: xr and sigmar must be given together")));
        }
        if self.sign_normalized && self.x < 0.0 {
            return Err(Error::input(format!("study {id}: sign-normalized estimate must be >= 0")));
        }
        Ok(())
    }
}

/// Latent density of Z = X*/sigma: integral of phi(z - theta/sigma) dmu(theta).
pub fn marginal_latent_density(mu: &EffectDistribution, z: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::input("sigma must be positive"));
    }
    match mu {
        EffectDistribution::PointMass { value } => Ok(normal::pdf(z - value / sigma)),
        EffectDistribution::Normal { mean, sd } => {
            let s = (1.0 + (sd / sigma).powi(2)).sqrt();
            Ok(normal::pdf((z - mean / sigma) / s) / s)
        }
        EffectDistribution::FiniteMixture { .. } => {
            Ok(mu.quadrature_rule(1).integrate(|t| normal::pdf(z - t / sigma)))
        }
        _ => integrate_until_stable(|n| mu.quadrature_rule(n).integrate(|t| normal::pdf(z - t / sigma))),
    }
}

/// Evaluates `f(n)` for n = 201, 402, ... until successive values agree.
pub(crate) fn integrate_until_stable(f: impl Fn(usize) -> f64) -> Result<f64> {
    let mut n = DEFAULT_NODES;
    let mut prev = f(n);
    let mut achieved = f64::INFINITY;
    while n < MAX_NODES {
        n *= 2;
        let next = f(n);
        achieved = (next - prev).abs() / next.abs().max(f64::MIN_POSITIVE);
        if achieved < DEFAULT_TOLERANCE || (next - prev).abs() < 1e-300 {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Integration { achieved })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn closed_forms() {
        let pm = EffectDistribution::point_mass(0.0).unwrap();
        assert_relative_eq!(marginal_latent_density(&pm, 0.0, 1.0).unwrap(), 0.398_942_280_401_432_7);
        let n = EffectDistribution::normal(0.0, 1.0).unwrap();
        assert_relative_eq!(marginal_latent_density(&n, 0.0, 1.0).unwrap(), 0.282_094_791_773_878_1, epsilon = 1e-15);
    }

    #[test]
    fn record_validation() {
        assert!(StudyRecord::new("a", 1.0, 0.0).validate().is_err());
        assert!(StudyRecord::new("a", -1.0, 1.0).sign_normalized(true).validate().is_err());
        assert!(StudyRecord::new("a", 1.0, 1.0).with_replication(1.0, -1.0).validate().is_err());
        assert!(StudyRecord::new("a", 1.0, 1.0).with_replication(1.0, 2.0).validate().is_ok());
        assert_eq!(StudyRecord::new("a", 3.0, 2.0).z(), 1.5);
    }
}
