//! Maximum-likelihood fitting, sandwich covariance, score test and
//! meta-regression.

mod metareg;
mod params;
mod score;
mod vcov;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use metareg::{meta_regression, MetaRegression, MetaRegressionKind};
pub use params::{BetaTransform, ParamLayout, EMPTY_CELL_BETA, MIN_DF};
pub use score::{score_test_selection_on_theta, ScoreTest};
pub use vcov::{sandwich_vcov, Clustering};
pub(crate) use vcov::{checked_inverse, cluster_index};

use crate::error::{Error, Result};
use crate::likelihood::{calibrate_nodes, ModelKind, ModelSpec, PreparedData};
use crate::model::{EffectDistribution, StudyRecord};
use crate::optim;

/// Convergence threshold on the gradient of the average log-likelihood.
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
/// Two restarts agreeing within this many log-likelihood units end the search.
pub const RESTART_AGREEMENT: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    /// Maximum number of starting points.
    pub n_starts: usize,
    pub seed: u64,
    /// Node count per quadrature piece; calibrated from the data when `None`.
    pub quadrature_nodes: Option<usize>,
    pub beta_transform: BetaTransform,
    pub clustering: Clustering,
    pub max_iters: u64,
    /// First starting point on the reported scale; method of moments when `None`.
    pub start: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_starts: 10,
            seed: 20_200_101,
            quadrature_nodes: None,
            beta_transform: BetaTransform::Log,
            clustering: Clustering::Robust,
            max_iters: 3000,
            start: None,
        }
    }
}

/// Result of a maximum-likelihood fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFit {
    pub spec: ModelSpec,
    pub layout: ParamLayout,
    pub param_names: Vec<String>,
    pub theta_hat: Vec<f64>,
    /// Covariance of `theta_hat` (reported scale).
    #[serde(deserialize_with = "null_as_nan")]
    pub vcov: Vec<Vec<f64>>,
    pub clustering: Clustering,
    pub loglik: f64,
    pub converged: bool,
    pub n_restarts_used: usize,
    pub gradient_norm: f64,
    pub n_obs: usize,
    pub sign_normalized: bool,
    pub warnings: Vec<String>,
}

// JSON has no NaN; serde_json writes it as null.
fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<Vec<f64>>, D::Error> {
    let v: Vec<Vec<Option<f64>>> = Deserialize::deserialize(d)?;
    Ok(v.into_iter().map(|r| r.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect()).collect())
}

impl ModelFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.theta_hat.len()).map(|i| self.vcov[i][i].max(0.0).sqrt()).collect()
    }

    pub fn parameter(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.param_names.iter().position(|n| n == name)?;
        Some((self.theta_hat[i], self.vcov[i][i].max(0.0).sqrt()))
    }

    /// Indices of the non-reference selection coefficients in `theta_hat`.
    pub fn beta_indices(&self) -> Vec<usize> {
        let ne = self.layout.n_effect();
        (ne..ne + self.layout.beta_cells.len()).collect()
    }
}

/// Negative average log-likelihood on the free transformed coordinates.
pub(crate) struct Objective<'a> {
    pub data: &'a PreparedData,
    pub template: &'a ModelSpec,
    pub layout: &'a ParamLayout,
    pub free: Vec<usize>,
    pub base_eta: Vec<f64>,
}

impl Objective<'_> {
    pub fn full_eta(&self, free_eta: &[f64]) -> Vec<f64> {
        let mut eta = self.base_eta.clone();
        for (&i, &v) in self.free.iter().zip(free_eta) {
            eta[i] = v;
        }
        eta
    }

    pub fn free_part(&self, eta: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| eta[i]).collect()
    }

    pub fn spec_at(&self, free_eta: &[f64]) -> Result<ModelSpec> {
        self.layout.spec(self.template, &self.layout.theta(&self.full_eta(free_eta)))
    }

    pub fn per_record(&self, free_eta: &[f64]) -> Result<Vec<f64>> {
        self.data.per_record(&self.spec_at(free_eta)?)
    }

    /// Average log-likelihood; `-inf` where the model cannot be evaluated.
    pub fn average(&self, free_eta: &[f64]) -> f64 {
        if free_eta.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        match self.spec_at(free_eta).and_then(|s| self.data.loglik(&s)) {
            Ok(v) if v.is_finite() => v / self.data.len() as f64,
            _ => f64::NEG_INFINITY,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Method-of-moments effect parameters ignoring selection.
fn moment_start(data: &[StudyRecord], kind: ModelKind, effect: &EffectDistribution) -> Vec<f64> {
    let (vals, noise): (Vec<f64>, f64) = match kind {
        ModelKind::Replication => (data.iter().map(|r| r.x / r.sigma).collect(), 1.0),
        ModelKind::MetaStudy => (data.iter().map(|r| r.x).collect(), mean(&data.iter().map(|r| r.sigma * r.sigma).collect::<Vec<_>>())),
    };
    let m1 = mean(&vals);
    let m2 = mean(&vals.iter().map(|v| v * v).collect::<Vec<_>>());
    let spread = (m2 - m1 * m1).max(1e-12).sqrt();
    let signal_var = (m2 - m1 * m1 - noise).max(0.01 * spread * spread).max(1e-8);
    match effect {
        EffectDistribution::GammaAbs { .. } => {
            let a1 = mean(&vals.iter().map(|v| v.abs()).collect::<Vec<_>>()).max(1e-6);
            let second = (m2 - noise).max(1.5 * a1 * a1);
            let kappa = (a1 * a1 / (second - a1 * a1)).clamp(0.05, 20.0);
            vec![kappa, (a1 / kappa).max(1e-4)]
        }
        EffectDistribution::TLocationScale { .. } => vec![median(&vals), 0.8 * signal_var.sqrt(), 3.0],
        EffectDistribution::Normal { .. } => vec![m1, signal_var.sqrt()],
        _ => vec![m1],
    }
}

/// Fits `template`'s family and free coefficients by maximum likelihood.
pub fn fit_mle(data: &[StudyRecord], template: &ModelSpec, options: &FitOptions) -> Result<ModelFit> {
    template.validate()?;
    let prepared = PreparedData::new(data, template.kind, &template.selection)?;
    let n = prepared.len();
    let mut warnings = Vec::new();

    let mut counts = vec![0usize; template.selection.n_cells()];
    for z in prepared.z_values() {
        counts[template.selection.cell(z)] += 1;
    }
    let empty: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] == 0).collect();
    if counts.iter().filter(|&&c| c > 0).count() <= 1 {
        warnings.push("all z-statistics fall in a single selection cell".to_string());
    }
    let layout = ParamLayout::new(template, &empty, options.beta_transform)?;
    for &k in &layout.fixed_cells {
        warnings.push(format!("cell {} has no observations; beta_{} fixed at {EMPTY_CELL_BETA}", k + 1, k + 1));
    }
    let free: Vec<usize> = layout.free().iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect();
    if n < 2 * free.len() {
        return Err(Error::input(format!(
            "{n} records cannot identify {} free parameters (need at least {})",
            free.len(),
            2 * free.len()
        )));
    }

    let start_theta = match &options.start {
        Some(s) => {
            if s.len() != layout.len() {
                return Err(Error::input(format!("start vector needs {} entries", layout.len())));
            }
            s.clone()
        }
        None => {
            let mut s = moment_start(data, template.kind, &template.effect);
            s.extend(std::iter::repeat_n(1.0, layout.beta_cells.len()));
            s.extend(std::iter::repeat_n(0.0, layout.n_offsets + layout.gamma_cells.len()));
            s
        }
    };
    let mut start_theta = start_theta;
    let ne = layout.n_effect();
    for (i, k) in layout.beta_cells.iter().enumerate() {
        if layout.fixed_cells.contains(k) {
            start_theta[ne + i] = EMPTY_CELL_BETA;
        }
    }
    let base_eta = layout.eta(&start_theta);
    if base_eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("starting values outside the parameter space"));
    }

    let mut spec0 = layout.spec(template, &start_theta)?;
    spec0.quadrature_nodes = match options.quadrature_nodes {
        Some(k) => k,
        None => calibrate_nodes(&prepared, &spec0)?,
    };
    let template = ModelSpec { quadrature_nodes: spec0.quadrature_nodes, ..template.clone() };

    let obj = Objective { data: &prepared, template: &template, layout: &layout, free, base_eta };
    let cost = |x: &[f64]| -obj.average(x);
    let x0 = obj.free_part(&obj.base_eta);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut results: Vec<optim::Minimum> = Vec::new();
    let mut agreed = false;
    for r in 0..options.n_starts.max(1) {
        let start: Vec<f64> = if r == 0 {
            x0.clone()
        } else {
            x0.iter()
                .map(|v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v + 0.5 * e
                })
                .collect()
        };
        if !cost(&start).is_finite() {
            continue;
        }
        let m = optim::minimize(&cost, &start, 0.5, options.max_iters);
        if m.value.is_finite() {
            results.push(m);
        }
        let mut lls: Vec<f64> = results.iter().map(|m| -m.value * n as f64).collect();
        lls.sort_by(|a, b| b.total_cmp(a));
        if lls.len() >= 2 && (lls[0] - lls[1]).abs() < RESTART_AGREEMENT {
            agreed = true;
            break;
        }
    }
    let n_restarts_used = results.len();
    let best = results
        .into_iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .ok_or_else(|| Error::Numerical("no starting point gave a finite likelihood".into()))?;

    let grad = optim::gradient(&|x: &[f64]| obj.average(x), &best.x);
    let gradient_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let converged = agreed && gradient_norm < GRADIENT_TOLERANCE;
    if !converged {
        warnings.push(format!(
            "optimizer did not converge (gradient norm {gradient_norm:.3e}, restarts agreed: {agreed})"
        ));
    }
    let eta_hat = obj.full_eta(&best.x);
    let theta_hat = layout.theta(&eta_hat);
    let spec = layout.spec(&template, &theta_hat)?;
    let loglik = prepared.loglik(&spec)?;
    let clusters = vcov::cluster_index(data, options.clustering);
    let p = layout.len();
    let vcov = match vcov::sandwich(&obj, &best.x, &clusters) {
        Ok(v) => v,
        Err(e) => {
            warnings.push(format!("covariance unavailable: {e}"));
            vec![vec![f64::NAN; p]; p]
        }
    };
    Ok(ModelFit {
        param_names: layout.names(&template),
        spec,
        layout,
        theta_hat,
        vcov,
        clustering: options.clustering,
        loglik,
        converged,
        n_restarts_used,
        gradient_norm,
        n_obs: n,
        sign_normalized: data.iter().any(|r| r.sign_normalized),
        warnings,
    })
}
