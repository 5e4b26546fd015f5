//! Log-likelihoods of published results under a step selection model.
//!
//! Replication data are evaluated in z-units: `z = x / sigma`,
//! `z_r = xr / sigma` and the replication noise has relative standard
//! deviation `sigmar / sigma`. Meta-study data stay in outcome units.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CellPartition, EffectDistribution, SelectionFunction, StudyRecord};
use crate::normal;
use crate::quadrature::{QuadratureRule, DEFAULT_NODES, DEFAULT_TOLERANCE, MAX_NODES};

/// Default critical value entering the latent-selection index.
pub const DEFAULT_LATENT_CUTOFF: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Replication,
    MetaStudy,
}

/// Everything needed to evaluate a likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub selection: SelectionFunction,
    pub effect: EffectDistribution,
    /// Coefficients on the latent index; the reference cell entry must be 0.
    #[serde(default)]
    pub latent_gamma: Option<Vec<f64>>,
    #[serde(default = "default_latent_cutoff")]
    pub latent_cutoff: f64,
    /// Gauss–Legendre nodes per piece of the effect quadrature.
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
}

fn default_latent_cutoff() -> f64 {
    DEFAULT_LATENT_CUTOFF
}

fn default_nodes() -> usize {
    DEFAULT_NODES
}

impl ModelSpec {
    pub fn new(kind: ModelKind, selection: SelectionFunction, effect: EffectDistribution) -> Self {
        ModelSpec {
            kind,
            selection,
            effect,
            latent_gamma: None,
            latent_cutoff: DEFAULT_LATENT_CUTOFF,
            quadrature_nodes: DEFAULT_NODES,
        }
    }

    pub fn with_latent_gamma(mut self, gamma: Vec<f64>) -> Self {
        self.latent_gamma = Some(gamma);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.effect.validate()?;
        if self.quadrature_nodes == 0 {
            return Err(Error::input("quadrature node count must be positive"));
        }
        if let Some(g) = &self.latent_gamma {
            if self.kind != ModelKind::Replication {
                return Err(Error::input("latent selection is only defined for replication data"));
            }
            if g.len() != self.selection.n_cells() {
                return Err(Error::input(format!(
                    "latent gamma needs {} entries, got {}",
                    self.selection.n_cells(),
                    g.len()
                )));
            }
            if let Some(k) = self.selection.reference_cell() {
                if g[k] != 0.0 {
                    return Err(Error::input("latent gamma of the reference cell must be 0"));
                }
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::input("latent gamma must be finite"));
            }
        }
        Ok(())
    }
}

/// Latent index Psi(theta): 0 at theta = 0, tending to 1 as |theta| grows.
pub fn latent_psi(theta: f64, zeta: f64) -> f64 {
    let tilde = |t: f64| normal::mass(-zeta - t, zeta - t);
    let base = tilde(0.0);
    (tilde(theta) - base) / (-base)
}

#[derive(Debug, Clone)]
struct RepRow {
    id: String,
    z: f64,
    zr: f64,
    s: f64,
    folded: bool,
    coefs: usize,
}

#[derive(Debug, Clone)]
struct MetaRow {
    id: String,
    x: f64,
    sigma: f64,
    folded: bool,
    coefs: usize,
    sigma_slot: usize,
}

/// Distinct coefficient vectors after covariate offsets.
#[derive(Debug, Clone, Default)]
struct CoefGroups {
    keys: Vec<BTreeMap<String, f64>>,
}

impl CoefGroups {
    fn key_for(&mut self, record: &StudyRecord, selection: &SelectionFunction) -> Result<usize> {
        let mut key = BTreeMap::new();
        for o in selection.offsets() {
            let v = record.covariates.get(&o.covariate).ok_or_else(|| {
                Error::input(format!("study {}: missing covariate '{}'", record.study_id, o.covariate))
            })?;
            key.insert(o.covariate.clone(), *v);
        }
        if let Some(i) = self.keys.iter().position(|k| *k == key) {
            return Ok(i);
        }
        self.keys.push(key);
        Ok(self.keys.len() - 1)
    }

    fn resolve(&self, selection: &SelectionFunction) -> Result<Vec<Vec<f64>>> {
        self.keys.iter().map(|k| selection.effective_coefficients(k)).collect()
    }
}

/// Published records preprocessed for repeated likelihood evaluation.
///
/// Covariate keys are bound to the selection template used at construction;
/// later evaluations may change coefficient and offset values but not which
/// covariates carry offsets.
#[derive(Debug, Clone)]
pub struct PreparedData {
    kind: ModelKind,
    rep: Vec<RepRow>,
    meta: Vec<MetaRow>,
    sigmas: Vec<f64>,
    groups: CoefGroups,
}

impl PreparedData {
    pub fn new(data: &[StudyRecord], kind: ModelKind, selection: &SelectionFunction) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::input("no records"));
        }
        let mut groups = CoefGroups::default();
        let mut rep = Vec::new();
        let mut meta = Vec::new();
        let mut sigmas: Vec<f64> = Vec::new();
        let mut slot_of: BTreeMap<u64, usize> = BTreeMap::new();
        for r in data {
            r.validate()?;
            let coefs = groups.key_for(r, selection)?;
            match kind {
                ModelKind::Replication => {
                    let (xr, sr) = match (r.xr, r.sigmar) {
                        (Some(a), Some(b)) => (a, b),
                        _ => {
                            return Err(Error::input(format!(
                                "study {}: replication estimate and standard error required",
                                r.study_id
                            )))
                        }
                    };
                    rep.push(RepRow {
                        id: r.study_id.clone(),
                        z: r.x / r.sigma,
                        zr: xr / r.sigma,
                        s: sr / r.sigma,
                        folded: r.sign_normalized,
                        coefs,
                    });
                }
                ModelKind::MetaStudy => {
                    let slot = *slot_of.entry(r.sigma.to_bits()).or_insert_with(|| {
                        sigmas.push(r.sigma);
                        sigmas.len() - 1
                    });
                    meta.push(MetaRow {
                        id: r.study_id.clone(),
                        x: r.x,
                        sigma: r.sigma,
                        folded: r.sign_normalized,
                        coefs,
                        sigma_slot: slot,
                    });
                }
            }
        }
        Ok(PreparedData { kind, rep, meta, sigmas, groups })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        match self.kind {
            ModelKind::Replication => self.rep.len(),
            ModelKind::MetaStudy => self.meta.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// z-statistics of the published estimates.
    pub fn z_values(&self) -> Vec<f64> {
        match self.kind {
            ModelKind::Replication => self.rep.iter().map(|r| r.z).collect(),
            ModelKind::MetaStudy => self.meta.iter().map(|r| r.x / r.sigma).collect(),
        }
    }

    pub fn any_folded(&self) -> bool {
        self.rep.iter().any(|r| r.folded) || self.meta.iter().any(|r| r.folded)
    }

    pub fn loglik(&self, spec: &ModelSpec) -> Result<f64> {
        Ok(self.per_record(spec)?.iter().sum())
    }

    /// Log-density of each record, in record order.
    pub fn per_record(&self, spec: &ModelSpec) -> Result<Vec<f64>> {
        spec.validate()?;
        if spec.kind != self.kind {
            return Err(Error::input("model kind does not match the prepared data"));
        }
        if self.any_folded() && !spec.selection.symmetric() {
            return Err(Error::input("sign-normalized data require a symmetric selection function"));
        }
        let coefs = self.groups.resolve(&spec.selection)?;
        match self.kind {
            ModelKind::Replication => self.replication_terms(spec, &coefs),
            ModelKind::MetaStudy => self.meta_terms(spec, &coefs),
        }
    }

    fn replication_terms(&self, spec: &ModelSpec, coefs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let ev = RepEval::new(spec)?;
        let denoms: Vec<f64> = coefs.iter().map(|c| ev.denominator(c)).collect();
        self.rep
            .par_iter()
            .map(|row| {
                let c = &coefs[row.coefs];
                let mut ln = ev.branch(row.z, row.zr, row.s, c);
                if row.folded {
                    ln = normal::log_add_exp(ln, ev.branch(-row.z, -row.zr, row.s, c));
                }
                finish(ln, denoms[row.coefs], &row.id)
            })
            .collect()
    }

    fn meta_terms(&self, spec: &ModelSpec, coefs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let ev = MetaEval::new(spec);
        let partition = spec.selection.partition();
        // one denominator per (distinct sigma, coefficient group)
        let masses: Vec<Vec<f64>> = self.sigmas.par_iter().map(|&s| ev.cell_masses(partition, s)).collect();
        self.meta
            .par_iter()
            .map(|row| {
                let c = &coefs[row.coefs];
                let d: f64 = masses[row.sigma_slot].iter().zip(c).map(|(m, b)| m * b).sum();
                let mut ln = ev.branch(row.x, row.sigma, partition, c);
                if row.folded {
                    ln = normal::log_add_exp(ln, ev.branch(-row.x, row.sigma, partition, c));
                }
                finish(ln, d, &row.id)
            })
            .collect()
    }

    /// Scores of the latent coefficients, one vector per record (all cells,
    /// including the reference cell whose entry is always 0).
    pub fn latent_gamma_scores(&self, spec: &ModelSpec) -> Result<Vec<Vec<f64>>> {
        if self.kind != ModelKind::Replication || spec.kind != ModelKind::Replication {
            return Err(Error::input("latent scores need replication data"));
        }
        spec.validate()?;
        let coefs = self.groups.resolve(&spec.selection)?;
        let ev = RepEval::new(spec)?;
        let k = spec.selection.n_cells();
        let reference = spec.selection.reference_cell();
        let denoms: Vec<f64> = coefs.iter().map(|c| ev.denominator(c)).collect();
        self.rep
            .par_iter()
            .map(|row| {
                let c = &coefs[row.coefs];
                let mut num = 0.0;
                let mut dpsi = vec![0.0; k];
                let signs: &[f64] = if row.folded { &[1.0, -1.0] } else { &[1.0] };
                for &sg in signs {
                    let (z, zr) = (sg * row.z, sg * row.zr);
                    let cell = spec.selection.cell(z);
                    let (a, p) = ev.kernel_sums(z, zr, row.s);
                    let g = ev.gamma.as_ref().map_or(0.0, |g| g[cell]);
                    num += c[cell] * a + g * p;
                    dpsi[cell] += p;
                }
                if !(num > 0.0) {
                    return Err(Error::ZeroDensity { record: row.id.clone() });
                }
                let d = denoms[row.coefs];
                Ok((0..k)
                    .map(|j| {
                        if Some(j) == reference {
                            0.0
                        } else {
                            dpsi[j] / num - ev.psi_mass[j] / d
                        }
                    })
                    .collect())
            })
            .collect()
    }
}

fn finish(ln_num: f64, denom: f64, id: &str) -> Result<f64> {
    let v = ln_num - denom.ln();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::ZeroDensity { record: id.to_string() })
    }
}

/// Quadrature-dependent pieces shared by all replication records.
struct RepEval<'a> {
    rule: QuadratureRule,
    psi: Vec<f64>,
    gamma: Option<Vec<f64>>,
    partition: &'a CellPartition,
    /// sum_i w_i P(cell k | theta_i)
    mass: Vec<f64>,
    /// sum_i w_i Psi(theta_i) P(cell k | theta_i)
    psi_mass: Vec<f64>,
}

impl<'a> RepEval<'a> {
    fn new(spec: &'a ModelSpec) -> Result<Self> {
        let rule = spec.effect.quadrature_rule(spec.quadrature_nodes);
        let partition = spec.selection.partition();
        let k = partition.n_cells();
        let gamma = spec.latent_gamma.clone();
        let psi: Vec<f64> = if gamma.is_some() {
            rule.nodes.iter().map(|&t| latent_psi(t, spec.latent_cutoff)).collect()
        } else {
            Vec::new()
        };
        if let Some(g) = &gamma {
            let (lo, hi) = psi.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            for (cell, (&b, &gk)) in spec.selection.coefficients().iter().zip(g).enumerate() {
                if b + gk * lo < 0.0 || b + gk * hi < 0.0 {
                    return Err(Error::ModelEvaluation {
                        cell,
                        message: "latent publication probability negative on the quadrature grid".into(),
                    });
                }
            }
        }
        let mut mass = vec![0.0; k];
        let mut psi_mass = vec![0.0; k];
        let mut m = vec![0.0; k];
        for (i, (t, w)) in rule.iter().enumerate() {
            m.iter_mut().for_each(|v| *v = 0.0);
            partition.add_masses(t, 1.0, 1.0, &mut m);
            for j in 0..k {
                mass[j] += w * m[j];
                if gamma.is_some() {
                    psi_mass[j] += w * psi[i] * m[j];
                }
            }
        }
        Ok(RepEval { rule, psi, gamma, partition, mass, psi_mass })
    }

    fn denominator(&self, c: &[f64]) -> f64 {
        let mut d: f64 = c.iter().zip(&self.mass).map(|(b, m)| b * m).sum();
        if let Some(g) = &self.gamma {
            d += g.iter().zip(&self.psi_mass).map(|(g, m)| g * m).sum::<f64>();
        }
        d
    }

    /// (sum_i w_i K_i, sum_i w_i Psi_i K_i) scaled by exp(-peak) with K the
    /// joint normal kernel; returns values relative to `kernel_peak`.
    fn kernel_sums(&self, z: f64, zr: f64, s: f64) -> (f64, f64) {
        let (peak, a, p) = self.kernel_sums_scaled(z, zr, s);
        let scale = (peak).exp() / (2.0 * std::f64::consts::PI * s);
        (a * scale, p * scale)
    }

    fn kernel_sums_scaled(&self, z: f64, zr: f64, s: f64) -> (f64, f64, f64) {
        let inv_s2 = 1.0 / (s * s);
        let exponent = |t: f64| -0.5 * (z - t) * (z - t) - 0.5 * (zr - t) * (zr - t) * inv_s2;
        let t_star = (z + zr * inv_s2) / (1.0 + inv_s2);
        let mut peak = exponent(t_star);
        let with_psi = self.gamma.is_some();
        let sum = |peak: f64| {
            let mut a = 0.0;
            let mut p = 0.0;
            for (i, (t, w)) in self.rule.iter().enumerate() {
                let e = w * (exponent(t) - peak).exp();
                a += e;
                if with_psi {
                    p += e * self.psi[i];
                }
            }
            (a, p)
        };
        let (mut a, mut p) = sum(peak);
        if a == 0.0 {
            peak = self.rule.nodes.iter().map(|&t| exponent(t)).fold(f64::NEG_INFINITY, f64::max);
            (a, p) = sum(peak);
        }
        (peak, a, p)
    }

    /// log of p(z) times the numerator integral for one sign branch.
    fn branch(&self, z: f64, zr: f64, s: f64, c: &[f64]) -> f64 {
        let cell = self.partition.cell(z);
        let g = self.gamma.as_ref().map_or(0.0, |g| g[cell]);
        let (peak, a, p) = self.kernel_sums_scaled(z, zr, s);
        let mix = if g == 0.0 { c[cell] * a } else { c[cell] * a + g * p };
        mix.ln() + peak - (2.0 * std::f64::consts::PI * s).ln()
    }
}

/// Meta-study evaluation: closed forms for normal and point-mass effects.
enum MetaEval {
    Normal { mean: f64, sd: f64 },
    Rule(QuadratureRule),
}

impl MetaEval {
    fn new(spec: &ModelSpec) -> Self {
        match &spec.effect {
            EffectDistribution::Normal { mean, sd } => MetaEval::Normal { mean: *mean, sd: *sd },
            EffectDistribution::PointMass { value } => MetaEval::Normal { mean: *value, sd: 0.0 },
            other => MetaEval::Rule(other.quadrature_rule(spec.quadrature_nodes)),
        }
    }

    fn cell_masses(&self, partition: &CellPartition, sigma: f64) -> Vec<f64> {
        let mut acc = vec![0.0; partition.n_cells()];
        match self {
            MetaEval::Normal { mean, sd } => {
                let v = (sd * sd + sigma * sigma).sqrt();
                partition.add_masses(mean / sigma, v / sigma, 1.0, &mut acc);
            }
            MetaEval::Rule(rule) => {
                for (t, w) in rule.iter() {
                    partition.add_masses(t / sigma, 1.0, w, &mut acc);
                }
            }
        }
        acc
    }

    fn branch(&self, x: f64, sigma: f64, partition: &CellPartition, c: &[f64]) -> f64 {
        let pz = c[partition.cell(x / sigma)];
        match self {
            MetaEval::Normal { mean, sd } => {
                let v = (sd * sd + sigma * sigma).sqrt();
                pz.ln() + normal::ln_pdf((x - mean) / v) - v.ln()
            }
            MetaEval::Rule(rule) => {
                let inv = 1.0 / sigma;
                let expo = |t: f64| -0.5 * ((x - t) * inv).powi(2);
                let mut peak = 0.0;
                let mut a: f64 = rule.iter().map(|(t, w)| w * (expo(t) - peak).exp()).sum();
                if a == 0.0 {
                    peak = rule.nodes.iter().map(|&t| expo(t)).fold(f64::NEG_INFINITY, f64::max);
                    a = rule.iter().map(|(t, w)| w * (expo(t) - peak).exp()).sum();
                }
                pz.ln() + a.ln() + peak + normal::ln_pdf(0.0) - sigma.ln()
            }
        }
    }
}

fn prepare(data: &[StudyRecord], spec: &ModelSpec) -> Result<PreparedData> {
    PreparedData::new(data, spec.kind, &spec.selection)
}

/// Replication log-likelihood (no latent selection).
pub fn replication_loglik(data: &[StudyRecord], spec: &ModelSpec) -> Result<f64> {
    if spec.kind != ModelKind::Replication {
        return Err(Error::input("spec kind must be replication"));
    }
    let mut s = spec.clone();
    s.latent_gamma = None;
    prepare(data, &s)?.loglik(&s)
}

/// Meta-study log-likelihood.
pub fn metastudy_loglik(data: &[StudyRecord], spec: &ModelSpec) -> Result<f64> {
    if spec.kind != ModelKind::MetaStudy {
        return Err(Error::input("spec kind must be meta-study"));
    }
    prepare(data, spec)?.loglik(spec)
}

/// Replication log-likelihood with publication depending on the latent index.
pub fn latent_replication_loglik(data: &[StudyRecord], spec: &ModelSpec) -> Result<f64> {
    if spec.latent_gamma.is_none() {
        return Err(Error::input("latent gamma coefficients required"));
    }
    if spec.kind != ModelKind::Replication {
        return Err(Error::input("spec kind must be replication"));
    }
    prepare(data, spec)?.loglik(spec)
}

/// Dispatches on `spec.kind`.
pub fn loglik(data: &[StudyRecord], spec: &ModelSpec) -> Result<f64> {
    prepare(data, spec)?.loglik(spec)
}

/// Smallest node count (201, 402, ...) at which the log-likelihood is stable.
pub fn calibrate_nodes(data: &PreparedData, spec: &ModelSpec) -> Result<usize> {
    if spec.effect.is_discrete() || matches!(spec.effect, EffectDistribution::Normal { .. }) && data.kind() == ModelKind::MetaStudy
    {
        return Ok(DEFAULT_NODES);
    }
    let mut s = spec.clone();
    s.quadrature_nodes = DEFAULT_NODES;
    let mut prev = data.loglik(&s)?;
    while s.quadrature_nodes < MAX_NODES {
        let n = s.quadrature_nodes;
        s.quadrature_nodes *= 2;
        let next = data.loglik(&s)?;
        if (next - prev).abs() <= DEFAULT_TOLERANCE * next.abs().max(1.0) {
            return Ok(n);
        }
        prev = next;
    }
    Ok(s.quadrature_nodes)
}
