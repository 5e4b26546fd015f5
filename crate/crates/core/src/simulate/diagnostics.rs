use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SelectionFunction, StudyRecord};
use crate::normal;

/// log f(b, a) - log f(a, b) for one pair of bins, a < b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRatio {
    pub a: usize,
    pub b: usize,
    pub n_ab: u64,
    pub n_ba: u64,
    pub h: f64,
    pub se: f64,
}

/// h(a,b) + h(b,c) + h(c,a) for a triple of bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleResidual {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub residual: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryDiagnostic {
    pub edges: Vec<f64>,
    pub pairs: Vec<PairRatio>,
    /// Bin pairs with an empty orientation cell.
    pub excluded_pairs: Vec<(usize, usize)>,
    pub residuals: Vec<TriangleResidual>,
    pub max_abs_residual: f64,
    /// Bootstrap standard error of the residual attaining the maximum.
    pub max_residual_se: f64,
    pub n_bootstrap: usize,
}

fn bin_of(edges: &[f64], v: f64) -> Option<usize> {
    if !(v >= edges[0]) || v >= edges[edges.len() - 1] {
        return None;
    }
    Some(edges.partition_point(|&e| e <= v) - 1)
}

fn joint_counts(points: &[(usize, usize)], idx: impl Iterator<Item = usize>, m: usize) -> Vec<Vec<u64>> {
    let mut n = vec![vec![0u64; m]; m];
    for i in idx {
        let (a, b) = points[i];
        n[a][b] += 1;
    }
    n
}

fn log_ratio(n: &[Vec<u64>], a: usize, b: usize) -> Option<f64> {
    if n[a][b] > 0 && n[b][a] > 0 {
        Some((n[b][a] as f64).ln() - (n[a][b] as f64).ln())
    } else {
        None
    }
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// Binned test of the exchangeability of (z, z_r) implied by no selection.
pub fn symmetry_diagnostic(data: &[StudyRecord], edges: &[f64], seed: u64, n_bootstrap: usize) -> Result<SymmetryDiagnostic> {
    if edges.len() < 4 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::input("need at least 3 bins with strictly increasing edges"));
    }
    let m = edges.len() - 1;
    let mut points = Vec::new();
    for r in data {
        let xr = r.xr.ok_or_else(|| Error::input(format!("study {}: replication estimate required", r.study_id)))?;
        if let (Some(a), Some(b)) = (bin_of(edges, r.x / r.sigma), bin_of(edges, xr / r.sigma)) {
            points.push((a, b));
        }
    }
    let n = joint_counts(&points, 0..points.len(), m);
    let occupied = (0..m)
        .filter(|&a| (0..m).map(|b| n[a][b] + n[b][a]).sum::<u64>() >= 5)
        .count();
    if occupied < 3 {
        return Err(Error::input("fewer than 3 bins contain at least 5 observations"));
    }
    let mut pairs = Vec::new();
    let mut excluded_pairs = Vec::new();
    let mut h = vec![vec![None; m]; m];
    for a in 0..m {
        for b in a + 1..m {
            match log_ratio(&n, a, b) {
                Some(v) => h[a][b] = Some(v),
                None => excluded_pairs.push((a, b)),
            }
        }
    }
    let mut triangles = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            for c in b + 1..m {
                if let (Some(x), Some(y), Some(z)) = (h[a][b], h[b][c], h[a][c]) {
                    triangles.push((a, b, c, x + y - z));
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let np = points.len();
    let mut boot_h: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); m]; m];
    let mut boot_r: Vec<Vec<f64>> = vec![Vec::new(); triangles.len()];
    for _ in 0..n_bootstrap {
        let draws: Vec<usize> = (0..np).map(|_| rng.random_range(0..np)).collect();
        let nb = joint_counts(&points, draws.into_iter(), m);
        for a in 0..m {
            for b in a + 1..m {
                if h[a][b].is_some() {
                    if let Some(v) = log_ratio(&nb, a, b) {
                        boot_h[a][b].push(v);
                    }
                }
            }
        }
        for (t, &(a, b, c, _)) in triangles.iter().enumerate() {
            if let (Some(x), Some(y), Some(z)) = (log_ratio(&nb, a, b), log_ratio(&nb, b, c), log_ratio(&nb, a, c)) {
                boot_r[t].push(x + y - z);
            }
        }
    }
    for a in 0..m {
        for b in a + 1..m {
            if let Some(v) = h[a][b] {
                pairs.push(PairRatio { a, b, n_ab: n[a][b], n_ba: n[b][a], h: v, se: sd(&boot_h[a][b]) });
            }
        }
    }
    let residuals: Vec<TriangleResidual> = triangles
        .iter()
        .zip(&boot_r)
        .map(|(&(a, b, c, r), br)| TriangleResidual { a, b, c, residual: r, se: sd(br) })
        .collect();
    let worst = residuals.iter().max_by(|x, y| x.residual.abs().total_cmp(&y.residual.abs()));
    Ok(SymmetryDiagnostic {
        edges: edges.to_vec(),
        pairs,
        excluded_pairs,
        max_abs_residual: worst.map_or(0.0, |t| t.residual.abs()),
        max_residual_se: worst.map_or(f64::NAN, |t| t.se),
        residuals,
        n_bootstrap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub density: f64,
    pub exceeds_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffJump {
    pub cutoff: f64,
    pub left_count: u64,
    pub right_count: u64,
    /// Density just right of the cutoff over density just left of it.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZDensity {
    pub bin_width: f64,
    pub bins: Vec<DensityBin>,
    pub jumps: Vec<CutoffJump>,
    pub bunching_bound: f64,
    pub bunching: bool,
}

/// Histogram of published z-statistics, density jumps at cutoffs and a
/// bunching check against the normal-mixture bound.
pub fn z_density_diagnostics(
    data: &[StudyRecord],
    cutoffs: &[f64],
    selection: Option<&SelectionFunction>,
    bin_width: f64,
) -> Result<ZDensity> {
    if data.len() < 50 {
        return Err(Error::input(format!("density diagnostics need at least 50 records, got {}", data.len())));
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::input("bin width must be positive"));
    }
    let z: Vec<f64> = data.iter().map(|r| r.x / r.sigma).collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite z-statistic"));
    }
    let n = z.len() as f64;
    let lo_k = z.iter().map(|v| (v / bin_width).floor() as i64).min().unwrap_or(0);
    let hi_k = z.iter().map(|v| (v / bin_width).floor() as i64).max().unwrap_or(0);
    let mut counts = vec![0u64; (hi_k - lo_k + 1) as usize];
    for v in &z {
        counts[((v / bin_width).floor() as i64 - lo_k) as usize] += 1;
    }
    let ratio = selection.map_or(1.0, |p| p.max_coefficient() / p.min_coefficient());
    let folded = if data.iter().all(|r| r.sign_normalized) { 2.0 } else { 1.0 };
    let bound = folded * ratio * normal::pdf(0.0);
    let bins: Vec<DensityBin> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let lo = (lo_k + i as i64) as f64 * bin_width;
            let density = c as f64 / (n * bin_width);
            DensityBin { lo, hi: lo + bin_width, count: c, density, exceeds_bound: density > bound }
        })
        .collect();
    let jumps = cutoffs
        .iter()
        .map(|&c| {
            let left = z.iter().filter(|&&v| v >= c - bin_width && v < c).count() as u64;
            let right = z.iter().filter(|&&v| v >= c && v < c + bin_width).count() as u64;
            let ratio = if left > 0 { right as f64 / left as f64 } else { f64::INFINITY };
            CutoffJump { cutoff: c, left_count: left, right_count: right, ratio }
        })
        .collect();
    let bunching = bins.iter().any(|b| b.exceeds_bound);
    Ok(ZDensity { bin_width, bins, jumps, bunching_bound: bound, bunching })
}
