use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::vcov::{cluster_index, meat, Clustering};
use crate::error::{Error, Result};
use crate::model::StudyRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaRegressionKind {
    /// x on (1, sigma).
    XOnSigma,
    /// z on (1, 1/sigma).
    ZOnInvSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaRegression {
    pub kind: MetaRegressionKind,
    pub intercept: f64,
    pub slope: f64,
    pub se_intercept: f64,
    pub se_slope: f64,
    pub n: usize,
    pub n_clusters: usize,
}

/// OLS meta-regression with heteroskedasticity-robust (HC1) or
/// cluster-robust (CR1) standard errors.
pub fn meta_regression(data: &[StudyRecord], kind: MetaRegressionKind, clustering: Clustering) -> Result<MetaRegression> {
    if data.iter().any(|r| r.sign_normalized) {
        return Err(Error::input("meta-regression is not valid on sign-normalized estimates"));
    }
    if data.len() < 3 {
        return Err(Error::input(format!("meta-regression needs at least 3 records, got {}", data.len())));
    }
    for r in data {
        r.validate()?;
    }
    let n = data.len();
    let (y, w): (Vec<f64>, Vec<f64>) = match kind {
        MetaRegressionKind::XOnSigma => data.iter().map(|r| (r.x, r.sigma)).unzip(),
        MetaRegressionKind::ZOnInvSigma => data.iter().map(|r| (r.x / r.sigma, 1.0 / r.sigma)).unzip(),
    };
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { w[i] });
    let yv = DVector::from_vec(y);
    let xtx = x.transpose() * &x;
    let xtx_inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::Singular("regressor has no variation".into()))?;
    let beta = &xtx_inv * x.transpose() * &yv;
    let resid = &yv - &x * &beta;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![resid[i], resid[i] * w[i]]).collect();
    let clusters = cluster_index(data, clustering);
    let g = clusters.iter().copied().max().unwrap_or(0) + 1;
    let m = meat(&rows, &clusters, 1.0);
    let nf = n as f64;
    let factor = match clustering {
        Clustering::Robust => nf / (nf - 2.0),
        Clustering::Cluster if g > 1 => (g as f64 / (g as f64 - 1.0)) * ((nf - 1.0) / (nf - 2.0)),
        Clustering::Cluster => f64::NAN,
    };
    let v = &xtx_inv * m * &xtx_inv * factor;
    Ok(MetaRegression {
        kind,
        intercept: beta[0],
        slope: beta[1],
        se_intercept: v[(0, 0)].max(0.0).sqrt(),
        se_slope: v[(1, 1)].max(0.0).sqrt(),
        n,
        n_clusters: g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn collinear_points() {
        let d: Vec<_> = [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]
            .iter()
            .enumerate()
            .map(|(i, &(x, s))| StudyRecord::new(i.to_string(), x, s))
            .collect();
        let m = meta_regression(&d, MetaRegressionKind::XOnSigma, Clustering::Robust).unwrap();
        assert_relative_eq!(m.slope, 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.intercept, 0.0, epsilon = 1e-12);
        assert!(meta_regression(&d[..2], MetaRegressionKind::XOnSigma, Clustering::Robust).is_err());
    }

    #[test]
    fn rejects_sign_normalized() {
        let d: Vec<_> = (0..4).map(|i| StudyRecord::new(i.to_string(), 1.0, 1.0 + i as f64).sign_normalized(true)).collect();
        assert!(meta_regression(&d, MetaRegressionKind::XOnSigma, Clustering::Robust).is_err());
    }

    #[test]
    fn hc1_matches_hand_computation() {
        // y = x, regressor w; reference values from a direct formula
        let pts = [(0.5, 1.0), (1.7, 2.0), (1.2, 3.0), (3.1, 4.0)];
        let d: Vec<_> = pts.iter().enumerate().map(|(i, &(x, s))| StudyRecord::new(i.to_string(), x, s)).collect();
        let m = meta_regression(&d, MetaRegressionKind::XOnSigma, Clustering::Robust).unwrap();
        let wbar = 2.5;
        let ybar = (0.5 + 1.7 + 1.2 + 3.1) / 4.0;
        let sxx: f64 = pts.iter().map(|p| (p.1 - wbar).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.1 - wbar) * (p.0 - ybar)).sum();
        let b = sxy / sxx;
        assert_relative_eq!(m.slope, b, epsilon = 1e-12);
        let a = ybar - b * wbar;
        let hc0: f64 = pts.iter().map(|p| ((p.1 - wbar) * (p.0 - a - b * p.1)).powi(2)).sum::<f64>() / (sxx * sxx);
        assert_relative_eq!(m.se_slope, (hc0 * 4.0 / 2.0).sqrt(), epsilon = 1e-12);
    }
}
