//! Moment-based estimation of the selection function that leaves the
//! distribution of true effects unrestricted.
//!
//! Every moment is a sum of kernels weighted by inverse publication
//! probabilities. Writing `u_k = 1/beta_k`, the per-record contributions are
//! linear (replication) or quadratic (pairwise meta-study) in `u`, so the
//! sample moments and their variance reduce to small precomputed tensors.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::estimate::{checked_inverse, cluster_index, Clustering};
use crate::model::{SelectionFunction, StudyRecord};
use crate::normal;

/// Default upper end of the confidence-set grid.
pub const DEFAULT_BETA_MAX: f64 = 5.0;
/// Default grid step.
pub const DEFAULT_GRID_STEP: f64 = 1e-3;
/// Stand-in for a zero coefficient, where inverse weights are undefined.
pub const BETA_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentKind {
    ReplicationBaseline,
    ReplicationSimple,
    MetaStudyPairwise,
}

/// Lower limit of the replication factor in the baseline kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicationBound {
    /// `Phi((c2 - zr)/d) - Phi((-c1 - zr)/d)`.
    #[default]
    MinusC1,
    /// `Phi((c2 - zr)/d) - Phi((-c2 - zr)/d)`.
    MinusC2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSystem {
    pub kind: MomentKind,
    /// `(c1, c2)` per baseline replication moment.
    pub cutoff_pairs: Vec<(f64, f64)>,
    /// `c` per pairwise meta-study moment.
    pub thresholds: Vec<f64>,
    /// Noise level of the baseline replication kernel; sample maximum when `None`.
    pub sigma_max: Option<f64>,
    pub bound: ReplicationBound,
    pub selection_template: SelectionFunction,
    pub clustering: Clustering,
}

impl MomentSystem {
    fn with_kind(kind: MomentKind, template: SelectionFunction) -> Self {
        let cut = template.cutoffs().to_vec();
        MomentSystem {
            kind,
            cutoff_pairs: if kind == MomentKind::ReplicationBaseline { cut.iter().map(|&c| (c, c)).collect() } else { Vec::new() },
            thresholds: if kind == MomentKind::MetaStudyPairwise { cut } else { Vec::new() },
            sigma_max: None,
            bound: ReplicationBound::default(),
            selection_template: template,
            clustering: Clustering::Robust,
        }
    }

    /// One moment `(c, c)` per cutoff of the template.
    pub fn replication_baseline(template: SelectionFunction) -> Self {
        Self::with_kind(MomentKind::ReplicationBaseline, template)
    }

    pub fn replication_simple(template: SelectionFunction) -> Self {
        Self::with_kind(MomentKind::ReplicationSimple, template)
    }

    /// One moment per cutoff of the template.
    pub fn metastudy_pairwise(template: SelectionFunction) -> Self {
        Self::with_kind(MomentKind::MetaStudyPairwise, template)
    }

    pub fn with_cutoff_pairs(mut self, pairs: Vec<(f64, f64)>) -> Self {
        self.cutoff_pairs = pairs;
        self
    }

    pub fn with_thresholds(mut self, thresholds: Vec<f64>) -> Self {
        self.thresholds = thresholds;
        self
    }

    pub fn with_sigma_max(mut self, sigma_max: f64) -> Self {
        self.sigma_max = Some(sigma_max);
        self
    }

    pub fn with_bound(mut self, bound: ReplicationBound) -> Self {
        self.bound = bound;
        self
    }

    pub fn with_clustering(mut self, clustering: Clustering) -> Self {
        self.clustering = clustering;
        self
    }

    pub fn n_moments(&self) -> usize {
        match self.kind {
            MomentKind::ReplicationBaseline => self.cutoff_pairs.len(),
            MomentKind::ReplicationSimple => 1,
            MomentKind::MetaStudyPairwise => self.thresholds.len(),
        }
    }

    /// Non-reference cells, in order.
    pub fn free_cells(&self) -> Vec<usize> {
        let r = self.selection_template.reference_cell();
        (0..self.selection_template.n_cells()).filter(|&k| Some(k) != r).collect()
    }

    fn validate(&self) -> Result<()> {
        let t = &self.selection_template;
        if t.reference_cell().is_none() {
            return Err(Error::input("moment systems need a selection function with a reference cell"));
        }
        if !t.offsets().is_empty() {
            return Err(Error::input("covariate offsets are not supported by moment estimators"));
        }
        if self.kind != MomentKind::MetaStudyPairwise && !t.symmetric() {
            return Err(Error::input("replication moments use |z| and need a symmetric selection function"));
        }
        if self.n_moments() < self.free_cells().len() {
            return Err(Error::input(format!(
                "{} moments cannot identify {} coefficients",
                self.n_moments(),
                self.free_cells().len()
            )));
        }
        if self.cutoff_pairs.iter().any(|&(a, b)| !(a > 0.0 && b > 0.0)) || self.thresholds.iter().any(|c| !c.is_finite()) {
            return Err(Error::input("moment cutoffs must be finite and replication cutoffs positive"));
        }
        Ok(())
    }
}

fn replication_z(r: &StudyRecord) -> Result<(f64, f64, f64)> {
    match (r.xr, r.sigmar) {
        (Some(xr), Some(sr)) => Ok((r.x / r.sigma, xr / r.sigma, sr / r.sigma)),
        _ => Err(Error::input(format!("study {}: replication estimate required", r.study_id))),
    }
}

/// `h(z, s, zr, sr)` of the noised-up replication kernel.
fn h(z: f64, s: f64, zr: f64, sr: f64, c1: f64, c2: f64, sigma_max: f64, bound: ReplicationBound) -> f64 {
    let d1 = (sigma_max * sigma_max - s * s).max(0.0).sqrt();
    let d2 = (sigma_max * sigma_max - sr * sr).max(0.0).sqrt();
    let first = 1.0 - normal::cdf_scaled(c1 - z, d1) + normal::cdf_scaled(-c1 - z, d1);
    let lower = match bound {
        ReplicationBound::MinusC1 => -c1,
        ReplicationBound::MinusC2 => -c2,
    };
    let second = normal::cdf_scaled(c2 - zr, d2) - normal::cdf_scaled(lower - zr, d2);
    first * second
}

/// Bracket of the baseline replication moment before inverse weighting.
pub fn replication_kernel(z: f64, zr: f64, sr: f64, c1: f64, c2: f64, sigma_max: f64, bound: ReplicationBound) -> f64 {
    h(z, 1.0, zr, sr, c1, c2, sigma_max, bound) - h(zr, sr, z, 1.0, c1, c2, sigma_max, bound)
}

fn check_sigma_max(sr: f64, sigma_max: f64, id: &str) -> Result<()> {
    if !(sigma_max >= 1.0) {
        return Err(Error::input("sigma_max must be at least 1"));
    }
    if sr > sigma_max {
        return Err(Error::input(format!("study {id}: relative replication standard error {sr} exceeds sigma_max {sigma_max}")));
    }
    Ok(())
}

/// Baseline replication moment for one record.
pub fn replication_moment(
    record: &StudyRecord,
    p: &SelectionFunction,
    c1: f64,
    c2: f64,
    sigma_max: f64,
    bound: ReplicationBound,
) -> Result<f64> {
    let (z, zr, sr) = replication_z(record)?;
    check_sigma_max(sr, sigma_max, &record.study_id)?;
    Ok(replication_kernel(z, zr, sr, c1, c2, sigma_max, bound) / p.value(z))
}

fn simple_kernel(z: f64, zr: f64, sr: f64) -> f64 {
    (z * z - 1.0) - (zr * zr - sr * sr)
}

/// Variance-difference replication moment for one record.
pub fn simple_replication_moment(record: &StudyRecord, p: &SelectionFunction) -> Result<f64> {
    let (z, zr, sr) = replication_z(record)?;
    Ok(simple_kernel(z, zr, sr) / p.value(z))
}

/// Bracket of the pairwise moment for `(x1, s1)` the noisier study.
fn pair_kernel(x1: f64, s1: f64, x2: f64, s2: f64, c: f64, folded: bool) -> f64 {
    let d = ((s1 - s2) * (s1 + s2)).max(0.0).sqrt();
    if folded {
        let ind = if x1.abs() < c * s1 { 1.0 } else { 0.0 };
        ind - (normal::cdf_scaled(c * s1 - x2, d) - normal::cdf_scaled(-c * s1 - x2, d))
    } else {
        let ind = if x1 < c * s1 { 1.0 } else { 0.0 };
        ind - normal::cdf_scaled(c * s1 - x2, d)
    }
}

/// Pairwise meta-study moment; `rj` must have the larger standard error.
pub fn metastudy_pair_moment(rj: &StudyRecord, rk: &StudyRecord, p: &SelectionFunction, c: f64) -> Result<f64> {
    if !(rj.sigma > rk.sigma) {
        return Err(Error::input("the first study of a pair must have the larger standard error"));
    }
    let w = p.value(rj.x / rj.sigma) * p.value(rk.x / rk.sigma);
    Ok(pair_kernel(rj.x, rj.sigma, rk.x, rk.sigma, c, rj.sign_normalized) / w)
}

/// Per-cluster contributions as `F_c phi(u)`, with `phi` the monomials in
/// the inverse coefficients.
#[derive(Debug, Clone)]
struct Precomputed {
    n: usize,
    m: usize,
    k: usize,
    quadratic: bool,
    /// Multiplier of the contribution covariance.
    factor: f64,
    mean: DMatrix<f64>,
    /// sum_c vec(F_c) vec(F_c)'
    outer: DMatrix<f64>,
    /// sum_c n_c F_c
    weighted: DMatrix<f64>,
    nn: f64,
}

impl Precomputed {
    fn new(data: &[StudyRecord], system: &MomentSystem) -> Result<Self> {
        system.validate()?;
        if data.len() < 2 {
            return Err(Error::input("moment estimation needs at least 2 records"));
        }
        for r in data {
            r.validate()?;
        }
        let p = &system.selection_template;
        let k = p.n_cells();
        let m = system.n_moments();
        let (quadratic, rows): (bool, Vec<(usize, DMatrix<f64>)>) = match system.kind {
            MomentKind::ReplicationBaseline | MomentKind::ReplicationSimple => {
                let zs = data.iter().map(replication_z).collect::<Result<Vec<_>>>()?;
                let sigma_max = system.sigma_max.unwrap_or_else(|| zs.iter().map(|v| v.2).fold(1.0, f64::max));
                let mut rows = Vec::with_capacity(data.len());
                for (r, &(z, zr, sr)) in data.iter().zip(&zs) {
                    let mut f = DMatrix::zeros(m, k);
                    let cell = p.cell(z);
                    if system.kind == MomentKind::ReplicationSimple {
                        f[(0, cell)] = simple_kernel(z, zr, sr);
                    } else {
                        check_sigma_max(sr, sigma_max, &r.study_id)?;
                        for (i, &(c1, c2)) in system.cutoff_pairs.iter().enumerate() {
                            f[(i, cell)] = replication_kernel(z, zr, sr, c1, c2, sigma_max, system.bound);
                        }
                    }
                    rows.push((0, f));
                }
                (false, rows)
            }
            MomentKind::MetaStudyPairwise => (true, pairwise_rows(data, system)?),
        };
        let clusters = cluster_index(data, system.clustering);
        let g = clusters.iter().copied().max().map_or(0, |v| v + 1);
        let nf = if quadratic { k * k } else { k };
        let mut per = vec![DMatrix::<f64>::zeros(m, nf); g];
        let mut counts = vec![0.0; g];
        for ((_, f), &c) in rows.iter().zip(&clusters) {
            per[c] += f;
            counts[c] += 1.0;
        }
        let n = data.len();
        let mut mean = DMatrix::zeros(m, nf);
        let mut outer = DMatrix::zeros(m * nf, m * nf);
        let mut weighted = DMatrix::zeros(m, nf);
        for (f, &nc) in per.iter().zip(&counts) {
            mean += f;
            weighted += f * nc;
            let v = DVector::from_column_slice(f.as_slice());
            outer += &v * v.transpose();
        }
        mean /= n as f64;
        Ok(Precomputed {
            n,
            m,
            k,
            quadratic,
            factor: if quadratic { 4.0 } else { 1.0 },
            mean,
            outer,
            weighted,
            nn: counts.iter().map(|c| c * c).sum(),
        })
    }

    fn phi(&self, u: &[f64]) -> DVector<f64> {
        if self.quadratic {
            // column-major F: feature index = k + K * l
            DVector::from_fn(self.k * self.k, |i, _| u[i % self.k] * u[i / self.k])
        } else {
            DVector::from_column_slice(u)
        }
    }

    fn moments(&self, u: &[f64]) -> DVector<f64> {
        &self.mean * self.phi(u)
    }

    /// Asymptotic variance of `sqrt(n) * moments`.
    fn omega(&self, u: &[f64]) -> DMatrix<f64> {
        let phi = self.phi(u);
        let nf = phi.len();
        let mut s1 = DMatrix::zeros(self.m, self.m);
        for a in 0..self.m {
            for b in 0..self.m {
                let mut v = 0.0;
                for f in 0..nf {
                    for g in 0..nf {
                        v += self.outer[(a + self.m * f, b + self.m * g)] * phi[f] * phi[g];
                    }
                }
                s1[(a, b)] = v;
            }
        }
        let gbar = &self.mean * &phi;
        let s2 = &self.weighted * &phi;
        let cov = s1 - &gbar * s2.transpose() - &s2 * gbar.transpose() + &gbar * gbar.transpose() * self.nn;
        cov * (self.factor / self.n as f64)
    }
}

/// Per-record Hajek pseudo-observations: for record j in cell k and partner
/// cell l, the mean bracket over partners lands in feature `k + K l`.
fn pairwise_rows(data: &[StudyRecord], system: &MomentSystem) -> Result<Vec<(usize, DMatrix<f64>)>> {
    let p = &system.selection_template;
    let k = p.n_cells();
    let m = system.thresholds.len();
    let n = data.len();
    // canonical partner order makes the sums independent of input order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&data[a], &data[b]);
        ra.sigma
            .total_cmp(&rb.sigma)
            .then(ra.x.total_cmp(&rb.x))
            .then_with(|| ra.study_id.cmp(&rb.study_id))
    });
    let cells: Vec<usize> = data.iter().map(|r| p.cell(r.x / r.sigma)).collect();
    let denom = (n - 1) as f64;
    let rows = (0..n)
        .into_par_iter()
        .map(|j| {
            let rj = &data[j];
            let mut f = DMatrix::zeros(m, k * k);
            for &i in &order {
                if i == j {
                    continue;
                }
                let ri = &data[i];
                let l = cells[i];
                for (t, &c) in system.thresholds.iter().enumerate() {
                    let v = if rj.sigma > ri.sigma {
                        pair_kernel(rj.x, rj.sigma, ri.x, ri.sigma, c, rj.sign_normalized)
                    } else if ri.sigma > rj.sigma {
                        pair_kernel(ri.x, ri.sigma, rj.x, rj.sigma, c, ri.sign_normalized)
                    } else {
                        0.0
                    };
                    f[(t, cells[j] + k * l)] += v;
                }
            }
            (j, f / denom)
        })
        .collect();
    Ok(rows)
}

fn full_u(system: &MomentSystem, free: &[usize], beta: &[f64]) -> Result<Vec<f64>> {
    if beta.len() != free.len() {
        return Err(Error::input(format!("expected {} coefficients, got {}", free.len(), beta.len())));
    }
    let mut u = vec![1.0; system.selection_template.n_cells()];
    for (&c, &b) in free.iter().zip(beta) {
        let b = if b == 0.0 { BETA_FLOOR } else { b };
        if !b.is_finite() {
            return Err(Error::input("coefficients must be finite"));
        }
        u[c] = 1.0 / b;
    }
    Ok(u)
}

/// Sample moments at the free coefficients `beta`.
pub fn sample_moments(data: &[StudyRecord], system: &MomentSystem, beta: &[f64]) -> Result<Vec<f64>> {
    let pre = Precomputed::new(data, system)?;
    let u = full_u(system, &system.free_cells(), beta)?;
    Ok(pre.moments(&u).iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmEstimate {
    pub kind: MomentKind,
    pub cells: Vec<usize>,
    pub beta_hat: Vec<f64>,
    pub vcov: Vec<Vec<f64>>,
    /// Some coefficient solving the sample moments is negative.
    pub negative: bool,
    pub n_obs: usize,
}

impl GmmEstimate {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.beta_hat.len()).map(|i| self.vcov[i][i].max(0.0).sqrt()).collect()
    }
}

fn jacobian_u(pre: &Precomputed, u: &[f64], free: &[usize]) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(pre.m, free.len());
    let mut up = u.to_vec();
    for (c, &k) in free.iter().enumerate() {
        let h = 1e-6 * u[k].abs().max(1.0);
        up[k] = u[k] + h;
        let a = pre.moments(&up);
        up[k] = u[k] - h;
        let b = pre.moments(&up);
        up[k] = u[k];
        j.set_column(c, &((a - b) / (2.0 * h)));
    }
    j
}

fn newton(pre: &Precomputed, free: &[usize], start: f64) -> Option<Vec<f64>> {
    let mut u = vec![1.0; pre.k];
    for &k in free {
        u[k] = start;
    }
    let scale = pre.mean.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut g = pre.moments(&u);
    for _ in 0..200 {
        let j = jacobian_u(pre, &u, free);
        let step = j.lu().solve(&(-&g))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = u.clone();
            for (c, &k) in free.iter().enumerate() {
                trial[k] = u[k] + t * step[c];
            }
            let gt = pre.moments(&trial);
            if gt.norm() < g.norm() || gt.norm() == 0.0 {
                u = trial;
                g = gt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let size = free.iter().map(|&k| u[k].abs()).fold(1.0, f64::max);
        if g.norm() <= 1e-12 * scale * size * size {
            return Some(u);
        }
        if !accepted {
            return None;
        }
    }
    None
}

/// Solves the just-identified sample moments for the free coefficients,
/// with a sandwich covariance at the root.
pub fn gmm_point_estimate(data: &[StudyRecord], system: &MomentSystem) -> Result<GmmEstimate> {
    let pre = Precomputed::new(data, system)?;
    let free = system.free_cells();
    if pre.m != free.len() {
        return Err(Error::input("point estimates need as many moments as free coefficients"));
    }
    let mut roots = Vec::new();
    for start in [1.0, 2.0, 5.0, 10.0, 30.0, 100.0, 0.5, -1.0] {
        if let Some(u) = newton(&pre, &free, start) {
            roots.push(u);
        }
    }
    let u = roots
        .iter()
        .find(|u| free.iter().all(|&k| u[k] > 0.0))
        .or_else(|| roots.first())
        .cloned()
        .ok_or_else(|| Error::NoSolution("no root of the sample moments found from any start".into()))?;
    if free.iter().any(|&k| u[k] == 0.0) {
        return Err(Error::NoSolution("sample moments vanish only at an infinite coefficient".into()));
    }
    let beta: Vec<f64> = free.iter().map(|&k| 1.0 / u[k]).collect();
    // d moments / d beta = d moments / d u * (-u^2)
    let mut jb = jacobian_u(&pre, &u, &free);
    for (c, &k) in free.iter().enumerate() {
        let s = -u[k] * u[k];
        jb.column_mut(c).scale_mut(s);
    }
    let names: Vec<String> = free.iter().map(|k| format!("beta_{}", k + 1)).collect();
    let jt = jb.transpose();
    let jinv = checked_inverse(&(&jt * &jb), &names)? * jt;
    let omega = pre.omega(&u) / pre.n as f64;
    let v = &jinv * omega * jinv.transpose();
    Ok(GmmEstimate {
        kind: system.kind,
        cells: free,
        negative: beta.iter().any(|&b| b < 0.0),
        beta_hat: beta,
        vcov: (0..v.nrows()).map(|i| (0..v.ncols()).map(|j| 0.5 * (v[(i, j)] + v[(j, i)])).collect()).collect(),
        n_obs: pre.n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub beta_max: f64,
    pub step: f64,
    pub level: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { beta_max: DEFAULT_BETA_MAX, step: DEFAULT_GRID_STEP, level: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateSet {
    pub cell: usize,
    /// Maximal runs of consecutive included grid values.
    pub intervals: Vec<(f64, f64)>,
    pub unbounded_above: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StockWrightSet {
    pub critical_value: f64,
    pub coordinates: Vec<CoordinateSet>,
    pub n_grid: usize,
    pub n_included: usize,
    /// Grid points skipped because the moment variance was singular.
    pub n_skipped: usize,
}

fn s_stat(pre: &Precomputed, u: &[f64], names: &[String]) -> Option<f64> {
    let g = pre.moments(u);
    let omega = pre.omega(u);
    let inv = checked_inverse(&omega, names).ok()?;
    Some(pre.n as f64 * (g.transpose() * inv * &g)[(0, 0)])
}

/// `n g' Omega^-1 g` at the free coefficients `beta`.
pub fn s_statistic(data: &[StudyRecord], system: &MomentSystem, beta: &[f64]) -> Result<f64> {
    let pre = Precomputed::new(data, system)?;
    let u = full_u(system, &system.free_cells(), beta)?;
    let names: Vec<String> = (0..pre.m).map(|i| format!("moment_{}", i + 1)).collect();
    s_stat(&pre, &u, &names).ok_or_else(|| Error::Singular("moment variance is singular".into()))
}

/// Identification-robust confidence set by inverting the S statistic over a grid.
pub fn stock_wright_cs(data: &[StudyRecord], system: &MomentSystem, options: &GridOptions) -> Result<StockWrightSet> {
    if !(options.step > 0.0 && options.beta_max > 0.0 && options.level > 0.0 && options.level < 1.0) {
        return Err(Error::input("grid step, upper bound and level must be positive, level below 1"));
    }
    let pre = Precomputed::new(data, system)?;
    let free = system.free_cells();
    let d = free.len();
    let crit = ChiSquared::new(pre.m as f64)
        .map_err(|e| Error::Numerical(e.to_string()))?
        .inverse_cdf(options.level);
    let steps = (options.beta_max / options.step).round() as usize;
    let values: Vec<f64> = (0..=steps).map(|i| (i as f64 * options.step).min(options.beta_max)).collect();
    let n_grid = values.len().pow(d as u32);
    let names: Vec<String> = (0..pre.m).map(|i| format!("moment_{}", i + 1)).collect();
    let flags: Vec<Option<bool>> = (0..n_grid)
        .into_par_iter()
        .map(|mut idx| {
            let mut u = vec![1.0; pre.k];
            for &k in &free {
                let b = values[idx % values.len()].max(BETA_FLOOR);
                idx /= values.len();
                u[k] = 1.0 / b;
            }
            s_stat(&pre, &u, &names).map(|s| s <= crit)
        })
        .collect();
    let n_skipped = flags.iter().filter(|f| f.is_none()).count();
    let n_included = flags.iter().filter(|f| **f == Some(true)).count();
    let coordinates = free
        .iter()
        .enumerate()
        .map(|(c, &cell)| {
            let stride = values.len().pow(c as u32);
            let mut hit = vec![false; values.len()];
            for (idx, f) in flags.iter().enumerate() {
                if *f == Some(true) {
                    hit[(idx / stride) % values.len()] = true;
                }
            }
            let mut intervals = Vec::new();
            let mut start = None;
            for (i, &h) in hit.iter().enumerate() {
                match (h, start) {
                    (true, None) => start = Some(i),
                    (false, Some(s)) => {
                        intervals.push((values[s], values[i - 1]));
                        start = None;
                    }
                    _ => {}
                }
            }
            if let Some(s) = start {
                intervals.push((values[s], values[values.len() - 1]));
            }
            CoordinateSet { cell, intervals, unbounded_above: *hit.last().unwrap_or(&false) }
        })
        .collect();
    Ok(StockWrightSet { critical_value: crit, coordinates, n_grid, n_included, n_skipped })
}
