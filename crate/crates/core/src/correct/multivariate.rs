use serde::{Deserialize, Serialize};

use super::Segments;
use crate::error::{Error, Result};
use crate::model::CellPartition;

/// Step publication probability over two z-statistics: the coefficient is
/// `coefficients[i][j]` when `x1/s1` lies in cell `i` of `first` and `x2/s2`
/// in cell `j` of `second`, with `s` the marginal standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSignalSelection {
    pub first: CellPartition,
    pub second: CellPartition,
    pub coefficients: Vec<Vec<f64>>,
}

impl TwoSignalSelection {
    pub fn new(first: CellPartition, second: CellPartition, coefficients: Vec<Vec<f64>>) -> Result<Self> {
        if coefficients.len() != first.n_cells() || coefficients.iter().any(|r| r.len() != second.n_cells()) {
            return Err(Error::input("coefficient table does not match the two partitions"));
        }
        if coefficients.iter().flatten().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::input("conditional inversion needs strictly positive coefficients"));
        }
        Ok(TwoSignalSelection { first, second, coefficients })
    }

    /// Constant probability.
    pub fn constant() -> Self {
        let p = CellPartition::new(Vec::new(), false).expect("empty partition");
        TwoSignalSelection { first: p.clone(), second: p, coefficients: vec![vec![1.0]] }
    }

    pub fn eval(&self, x: [f64; 2], sd: [f64; 2]) -> f64 {
        self.coefficients[self.first.cell(x[0] / sd[0])][self.second.cell(x[1] / sd[1])]
    }
}

fn check_cov(sigma: &[[f64; 2]; 2], v: [f64; 2]) -> Result<()> {
    let det = sigma[0][0] * sigma[1][1] - sigma[0][1] * sigma[1][0];
    if !(sigma[0][0] > 0.0 && det > 0.0) || sigma[0][1] != sigma[1][0] {
        return Err(Error::input("covariance matrix must be symmetric positive definite"));
    }
    if v == [0.0, 0.0] || v.iter().any(|c| !c.is_finite()) {
        return Err(Error::input("direction vector must be finite and non-zero"));
    }
    Ok(())
}

/// Segments of `g~` along `x(g~) = r + c g~`, the set of outcomes sharing
/// the observed nuisance statistic, with the publication weight on each.
fn line_segments(x: [f64; 2], sigma: &[[f64; 2]; 2], v: [f64; 2], p2: &TwoSignalSelection) -> (Segments, f64, f64) {
    let sv = [sigma[0][0] * v[0] + sigma[0][1] * v[1], sigma[1][0] * v[0] + sigma[1][1] * v[1]];
    let var_g = v[0] * sv[0] + v[1] * sv[1];
    let g = v[0] * x[0] + v[1] * x[1];
    let c = [sv[0] / var_g, sv[1] / var_g];
    let r = [x[0] - c[0] * g, x[1] - c[1] * g];
    let sd = [sigma[0][0].sqrt(), sigma[1][1].sqrt()];

    let mut cuts = Vec::new();
    for (i, part) in [&p2.first, &p2.second].into_iter().enumerate() {
        if c[i] == 0.0 {
            continue;
        }
        for (lo, hi, _) in part.pieces() {
            for t in [lo, hi] {
                if t.is_finite() {
                    cuts.push((t * sd[i] - r[i]) / c[i]);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let at = |gt: f64| p2.eval([r[0] + c[0] * gt, r[1] + c[1] * gt], sd);
    let mut segs = Vec::with_capacity(cuts.len() + 1);
    let mut lo = f64::NEG_INFINITY;
    for &b in &cuts {
        let mid = if lo.is_finite() { 0.5 * (lo + b) } else { b - 1.0 };
        segs.push((lo, b, at(mid)));
        lo = b;
    }
    let mid = if lo.is_finite() { lo + 1.0 } else { 0.0 };
    segs.push((lo, f64::INFINITY, at(mid)));
    (Segments(segs), g, var_g.sqrt())
}

/// CDF of the published `G = v'X` at its observed value, conditional on the
/// nuisance statistic, when the mean of `G` is `gamma`.
pub fn conditional_cdf(x: [f64; 2], gamma: f64, sigma: [[f64; 2]; 2], v: [f64; 2], p2: &TwoSignalSelection) -> Result<f64> {
    check_cov(&sigma, v)?;
    let (seg, g, sg) = line_segments(x, &sigma, v, p2);
    Ok(seg.cdf(g, gamma, sg))
}

/// gamma at which the observed `G = v'x` is the `alpha` quantile of its
/// conditional published law, for `X ~ N(theta, sigma)`.
pub fn conditional_quantile_unbiased(
    x: [f64; 2],
    sigma: [[f64; 2]; 2],
    v: [f64; 2],
    p2: &TwoSignalSelection,
    alpha: f64,
) -> Result<f64> {
    check_cov(&sigma, v)?;
    let (seg, g, sg) = line_segments(x, &sigma, v, p2);
    seg.invert_theta(g, sg, alpha)
}
