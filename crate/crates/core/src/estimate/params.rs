use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::ModelSpec;
use crate::model::EffectDistribution;

/// Lower bound reported for the coefficient of a cell without observations.
pub const EMPTY_CELL_BETA: f64 = 1e-6;
/// Lower bound of the t degrees of freedom.
pub const MIN_DF: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaTransform {
    #[default]
    Log,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Transform {
    Identity,
    Log,
    ShiftedLog(u8),
}

impl Transform {
    fn forward(self, eta: f64) -> f64 {
        match self {
            Transform::Identity => eta,
            Transform::Log => eta.exp(),
            Transform::ShiftedLog(_) => MIN_DF + eta.exp(),
        }
    }

    fn inverse(self, theta: f64) -> f64 {
        match self {
            Transform::Identity => theta,
            Transform::Log => theta.ln(),
            Transform::ShiftedLog(_) => (theta - MIN_DF).ln(),
        }
    }

    fn derivative(self, eta: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Log | Transform::ShiftedLog(_) => eta.exp(),
        }
    }
}

/// Maps between the reported parameter vector and the unconstrained
/// optimization scale.
///
/// Order: effect parameters, coefficients of non-reference cells, covariate
/// offsets, latent coefficients of non-reference cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub family: String,
    pub beta_cells: Vec<usize>,
    pub fixed_cells: Vec<usize>,
    pub n_offsets: usize,
    pub gamma_cells: Vec<usize>,
    pub beta_transform: BetaTransform,
}

impl ParamLayout {
    pub fn new(template: &ModelSpec, empty_cells: &[usize], beta_transform: BetaTransform) -> Result<Self> {
        let family = template.effect.family().to_string();
        if family == "mixture" {
            return Err(Error::input("finite mixtures cannot be fitted by maximum likelihood"));
        }
        let reference = template
            .selection
            .reference_cell()
            .ok_or_else(|| Error::input("selection template needs a reference cell"))?;
        let beta_cells: Vec<usize> = (0..template.selection.n_cells()).filter(|&k| k != reference).collect();
        let fixed_cells = beta_cells.iter().copied().filter(|k| empty_cells.contains(k)).collect();
        let gamma_cells = if template.latent_gamma.is_some() { beta_cells.clone() } else { Vec::new() };
        Ok(ParamLayout {
            family,
            beta_cells,
            fixed_cells,
            n_offsets: template.selection.offsets().len(),
            gamma_cells,
            beta_transform,
        })
    }

    pub fn n_effect(&self) -> usize {
        match self.family.as_str() {
            "gamma" => 2,
            "t" => 3,
            "normal" => 2,
            _ => 1,
        }
    }

    pub fn len(&self) -> usize {
        self.n_effect() + self.beta_cells.len() + self.n_offsets + self.gamma_cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn transforms(&self) -> Vec<Transform> {
        let mut t = match self.family.as_str() {
            "gamma" => vec![Transform::Log, Transform::Log],
            "t" => vec![Transform::Identity, Transform::Log, Transform::ShiftedLog(0)],
            "normal" => vec![Transform::Identity, Transform::Log],
            _ => vec![Transform::Identity],
        };
        let bt = match self.beta_transform {
            BetaTransform::Log => Transform::Log,
            BetaTransform::Identity => Transform::Identity,
        };
        t.extend(std::iter::repeat_n(bt, self.beta_cells.len()));
        t.extend(std::iter::repeat_n(Transform::Identity, self.n_offsets + self.gamma_cells.len()));
        t
    }

    /// Which entries are optimized (the rest are held at their start value).
    pub fn free(&self) -> Vec<bool> {
        let mut f = vec![true; self.len()];
        for (i, k) in self.beta_cells.iter().enumerate() {
            if self.fixed_cells.contains(k) {
                f[self.n_effect() + i] = false;
            }
        }
        f
    }

    pub fn names(&self, template: &ModelSpec) -> Vec<String> {
        let mut n: Vec<String> = match self.family.as_str() {
            "gamma" => vec!["kappa".into(), "lambda".into()],
            "t" => vec!["theta_bar".into(), "tau".into(), "nu".into()],
            "normal" => vec!["theta_bar".into(), "tau".into()],
            _ => vec!["theta_bar".into()],
        };
        n.extend(self.beta_cells.iter().map(|k| format!("beta_{}", k + 1)));
        n.extend(template.selection.offsets().iter().map(|o| format!("offset_{}_{}", o.covariate, o.cell + 1)));
        n.extend(self.gamma_cells.iter().map(|k| format!("gamma_{}", k + 1)));
        n
    }

    pub fn theta(&self, eta: &[f64]) -> Vec<f64> {
        self.transforms().iter().zip(eta).map(|(t, &e)| t.forward(e)).collect()
    }

    pub fn eta(&self, theta: &[f64]) -> Vec<f64> {
        self.transforms().iter().zip(theta).map(|(t, &v)| t.inverse(v)).collect()
    }

    /// d theta / d eta, elementwise.
    pub fn jacobian(&self, eta: &[f64]) -> Vec<f64> {
        self.transforms().iter().zip(eta).map(|(t, &e)| t.derivative(e)).collect()
    }

    /// Model spec with the parameters in `theta` (reported scale).
    pub fn spec(&self, template: &ModelSpec, theta: &[f64]) -> Result<ModelSpec> {
        if theta.len() != self.len() {
            return Err(Error::input("parameter vector length mismatch"));
        }
        let ne = self.n_effect();
        let effect = match self.family.as_str() {
            "gamma" => EffectDistribution::gamma_abs(theta[0], theta[1])?,
            "t" => EffectDistribution::t_location_scale(theta[0], theta[1], theta[2])?,
            "normal" => EffectDistribution::normal(theta[0], theta[1])?,
            _ => EffectDistribution::point_mass(theta[0])?,
        };
        let mut coefs = template.selection.coefficients().to_vec();
        let nb = self.beta_cells.len();
        for (i, &k) in self.beta_cells.iter().enumerate() {
            coefs[k] = theta[ne + i];
        }
        let mut selection = template.selection.with_coefficients(coefs)?;
        if self.n_offsets > 0 {
            selection = selection.with_offset_values(&theta[ne + nb..ne + nb + self.n_offsets])?;
        }
        let latent_gamma = if self.gamma_cells.is_empty() {
            template.latent_gamma.clone()
        } else {
            let mut g = vec![0.0; selection.n_cells()];
            let off = ne + nb + self.n_offsets;
            for (i, &k) in self.gamma_cells.iter().enumerate() {
                g[k] = theta[off + i];
            }
            Some(g)
        };
        Ok(ModelSpec { effect, selection, latent_gamma, ..template.clone() })
    }

    /// Reported-scale parameters read back from a spec.
    pub fn theta_of(&self, spec: &ModelSpec) -> Vec<f64> {
        let mut v = match &spec.effect {
            EffectDistribution::GammaAbs { shape, scale } => vec![*shape, *scale],
            EffectDistribution::TLocationScale { location, scale, df } => vec![*location, *scale, *df],
            EffectDistribution::Normal { mean, sd } => vec![*mean, *sd],
            EffectDistribution::PointMass { value } => vec![*value],
            EffectDistribution::FiniteMixture { .. } => Vec::new(),
        };
        v.extend(self.beta_cells.iter().map(|&k| spec.selection.coefficients()[k]));
        v.extend(spec.selection.offsets().iter().map(|o| o.value));
        if let Some(g) = &spec.latent_gamma {
            v.extend(self.gamma_cells.iter().map(|&k| g[k]));
        }
        v
    }
}
