//! Data-generating process for published studies and distributional diagnostics.

mod diagnostics;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use diagnostics::{
    symmetry_diagnostic, z_density_diagnostics, CutoffJump, DensityBin, PairRatio, SymmetryDiagnostic,
    TriangleResidual, ZDensity,
};

use crate::error::{Error, Result};
use crate::model::{integrate_until_stable, EffectDistribution, SelectionFunction, StudyRecord};
use crate::normal;

/// Latent draws generated per RNG stream.
pub const CHUNK: u64 = 4096;
const CHUNKS_PER_BATCH: u64 = 16;

/// Distribution of latent standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SigmaDist {
    Fixed { value: f64 },
    Discrete { values: Vec<f64>, weights: Vec<f64> },
    LogUniform { low: f64, high: f64 },
}

impl SigmaDist {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            SigmaDist::Fixed { value } => value.is_finite() && *value > 0.0,
            SigmaDist::Discrete { values, weights } => {
                !values.is_empty()
                    && values.len() == weights.len()
                    && values.iter().all(|v| v.is_finite() && *v > 0.0)
                    && weights.iter().all(|w| w.is_finite() && *w >= 0.0)
                    && weights.iter().sum::<f64>() > 0.0
            }
            SigmaDist::LogUniform { low, high } => low.is_finite() && high.is_finite() && *low > 0.0 && high >= low,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::input("invalid standard-error distribution"))
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            SigmaDist::Fixed { value } => *value,
            SigmaDist::Discrete { values, weights } => {
                let total: f64 = weights.iter().sum();
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                for (v, w) in values.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return *v;
                    }
                }
                *values.last().expect("non-empty")
            }
            SigmaDist::LogUniform { low, high } => {
                let u: f64 = rng.random();
                (low.ln() + u * (high.ln() - low.ln())).exp()
            }
        }
    }
}

/// Replication standard error relative to the original one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReplicationRule {
    Fixed { ratio: f64 },
    /// `ratios[k]` applies when |z*| lies in the k-th cell of `cutoffs`.
    StepOnAbsZ { cutoffs: Vec<f64>, ratios: Vec<f64> },
}

impl ReplicationRule {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            ReplicationRule::Fixed { ratio } => ratio.is_finite() && *ratio > 0.0,
            ReplicationRule::StepOnAbsZ { cutoffs, ratios } => {
                ratios.len() == cutoffs.len() + 1
                    && cutoffs.windows(2).all(|w| w[0] < w[1])
                    && ratios.iter().all(|r| r.is_finite() && *r > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::input("invalid replication rule"))
        }
    }

    fn ratio(&self, z: f64) -> f64 {
        match self {
            ReplicationRule::Fixed { ratio } => *ratio,
            ReplicationRule::StepOnAbsZ { cutoffs, ratios } => {
                let k = cutoffs.iter().position(|&c| z.abs() < c).unwrap_or(cutoffs.len());
                ratios[k]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimTarget {
    Published(u64),
    Latent(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mu: EffectDistribution,
    pub p: SelectionFunction,
    pub sigma_dist: SigmaDist,
    #[serde(default)]
    pub replication: Option<ReplicationRule>,
    pub target: SimTarget,
    pub seed: u64,
    #[serde(default)]
    pub emit_latent: bool,
    /// Maximum number of latent draws before giving up on a published target.
    #[serde(default = "default_budget")]
    pub latent_budget: u64,
}

fn default_budget() -> u64 {
    1_000_000_000
}

impl SimConfig {
    pub fn new(mu: EffectDistribution, p: SelectionFunction, sigma_dist: SigmaDist, target: SimTarget, seed: u64) -> Self {
        SimConfig { mu, p, sigma_dist, replication: None, target, seed, emit_latent: false, latent_budget: default_budget() }
    }

    pub fn with_replication(mut self, rule: ReplicationRule) -> Self {
        self.replication = Some(rule);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.mu.validate()?;
        self.sigma_dist.validate()?;
        if let Some(r) = &self.replication {
            r.validate()?;
        }
        if !(self.p.max_coefficient() > 0.0) {
            return Err(Error::input("selection function is zero everywhere"));
        }
        Ok(())
    }
}

/// One latent draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub latent_index: u64,
    pub theta: f64,
    pub x: f64,
    pub sigma: f64,
    pub z: f64,
    pub xr: Option<f64>,
    pub sigmar: Option<f64>,
    pub published: bool,
    pub published_index: Option<u64>,
}

impl SimRecord {
    /// Published view in the ingestion schema.
    pub fn to_study(&self) -> StudyRecord {
        let id = format!("sim{}", self.latent_index);
        let mut r = StudyRecord::new(id, self.x, self.sigma);
        r.xr = self.xr;
        r.sigmar = self.sigmar;
        r
    }
}

fn chunk(config: &SimConfig, c: u64) -> Vec<SimRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(c);
    let pmax = config.p.max_coefficient();
    (0..CHUNK)
        .map(|i| {
            let theta = config.mu.sample(&mut rng);
            let sigma = config.sigma_dist.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let er: f64 = StandardNormal.sample(&mut rng);
            let u: f64 = rng.random();
            let x = theta + sigma * e;
            let z = x / sigma;
            let (xr, sigmar) = match &config.replication {
                Some(rule) => {
                    let sr = rule.ratio(z) * sigma;
                    (Some(theta + sr * er), Some(sr))
                }
                None => (None, None),
            };
            SimRecord {
                latent_index: c * CHUNK + i,
                theta,
                x,
                sigma,
                z,
                xr,
                sigmar,
                published: u < config.p.value(z) / pmax,
                published_index: None,
            }
        })
        .collect()
}

/// Draws latent studies and publication decisions.
///
/// Output is identical for a given configuration regardless of thread count:
/// chunk `c` always uses stream `c` of a generator seeded with `config.seed`.
/// Without `emit_latent` only published records are returned.
pub fn simulate(config: &SimConfig) -> Result<Vec<SimRecord>> {
    config.validate()?;
    let mut out = Vec::new();
    let mut published = 0u64;
    let mut next_chunk = 0u64;
    let (want_pub, want_latent) = match config.target {
        SimTarget::Published(n) => (Some(n), None),
        SimTarget::Latent(n) => (None, Some(n)),
    };
    loop {
        let batch: Vec<Vec<SimRecord>> = (next_chunk..next_chunk + CHUNKS_PER_BATCH)
            .into_par_iter()
            .map(|c| chunk(config, c))
            .collect();
        next_chunk += CHUNKS_PER_BATCH;
        for mut rec in batch.into_iter().flatten() {
            if want_latent.is_some_and(|n| rec.latent_index >= n) || want_pub.is_some_and(|n| published >= n) {
                return Ok(out);
            }
            if rec.published {
                rec.published_index = Some(published);
                published += 1;
            }
            if rec.published || config.emit_latent {
                out.push(rec);
            }
        }
        let drawn = next_chunk * CHUNK;
        if want_pub.is_some() && drawn >= config.latent_budget {
            return Err(Error::Budget { latent: drawn, published });
        }
    }
}

/// Probability that a significant original result is significant with the
/// same sign in an exact replication (unit standard errors).
pub fn replication_probability(mu: &EffectDistribution, zc: f64) -> Result<f64> {
    if !(zc.is_finite() && zc >= 0.0) {
        return Err(Error::input("critical value must be finite and non-negative"));
    }
    let lo = |t: f64| normal::cdf(-zc - t);
    let hi = |t: f64| normal::cdf(-zc + t);
    let num_f = |t: f64| lo(t).powi(2) + hi(t).powi(2);
    let den_f = |t: f64| lo(t) + hi(t);
    let ratio = |n: usize| {
        let q = mu.quadrature_rule(n);
        q.integrate(num_f) / q.integrate(den_f)
    };
    if mu.is_discrete() {
        return Ok(ratio(1));
    }
    integrate_until_stable(ratio)
}
