use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{ModelFit, Objective};
use crate::error::{Error, Result};
use crate::likelihood::PreparedData;
use crate::model::StudyRecord;
use crate::optim;

/// Grouping of score contributions in the middle of the sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clustering {
    /// Each record is its own cluster.
    #[default]
    Robust,
    /// Records sharing `cluster_id` are summed before the outer product.
    Cluster,
}

/// Cluster label per record, numbered by first appearance.
pub(crate) fn cluster_index(data: &[StudyRecord], clustering: Clustering) -> Vec<usize> {
    match clustering {
        Clustering::Robust => (0..data.len()).collect(),
        Clustering::Cluster => {
            let mut seen: HashMap<&str, usize> = HashMap::new();
            data.iter()
                .map(|r| {
                    let next = seen.len();
                    *seen.entry(r.cluster_id.as_str()).or_insert(next)
                })
                .collect()
        }
    }
}

/// Per-record scores on the free transformed coordinates (n x p).
pub(crate) fn record_scores(obj: &Objective, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = obj.data.len();
    let p = x.len();
    let mut scores = vec![vec![0.0; p]; n];
    let mut xp = x.to_vec();
    for i in 0..p {
        let h = optim::fd_step(x[i]);
        xp[i] = x[i] + h;
        let up = obj.per_record(&xp)?;
        xp[i] = x[i] - h;
        let dn = obj.per_record(&xp)?;
        xp[i] = x[i];
        for j in 0..n {
            scores[j][i] = (up[j] - dn[j]) / (2.0 * h);
        }
    }
    Ok(scores)
}

/// Sum of outer products of cluster-summed rows, divided by `divisor`.
pub(crate) fn meat(rows: &[Vec<f64>], clusters: &[usize], divisor: f64) -> DMatrix<f64> {
    let p = rows.first().map_or(0, |r| r.len());
    let g = clusters.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; p]; g];
    for (row, &c) in rows.iter().zip(clusters) {
        for (s, v) in sums[c].iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut b = DMatrix::zeros(p, p);
    for u in &sums {
        for i in 0..p {
            for j in 0..p {
                b[(i, j)] += u[i] * u[j];
            }
        }
    }
    b / divisor
}

/// Inverse of a symmetric matrix, or an error naming its weakest direction.
pub(crate) fn checked_inverse(m: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(m.clone());
    let (imin, vmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, v)| (i, v.abs()))
        .unwrap_or((0, 0.0));
    let vmax = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(vmin > 1e-12 * vmax) {
        let dir = eig.eigenvectors.column(imin);
        let desc: Vec<String> = dir
            .iter()
            .zip(names)
            .filter(|(v, _)| v.abs() > 1e-3)
            .map(|(v, n)| format!("{v:+.3}*{n}"))
            .collect();
        return Err(Error::Singular(format!("null direction {}", desc.join(" "))));
    }
    m.clone().try_inverse().ok_or_else(|| Error::Singular("inversion failed".into()))
}

/// Sandwich covariance on the reported scale for the full layout.
pub(crate) fn sandwich(obj: &Objective, x: &[f64], clusters: &[usize]) -> Result<Vec<Vec<f64>>> {
    let n = obj.data.len() as f64;
    let p = x.len();
    let all_names = obj.layout.names(obj.template);
    let names: Vec<String> = obj.free.iter().map(|&i| all_names[i].clone()).collect();
    let h = optim::hessian(&|v: &[f64]| obj.average(v), x);
    let a = DMatrix::from_fn(p, p, |i, j| h[i][j]);
    let a_inv = checked_inverse(&a, &names)?;
    let scores = record_scores(obj, x)?;
    let b = meat(&scores, clusters, n);
    let v_eta = &a_inv * b * &a_inv / n;
    let eta = obj.full_eta(x);
    let jac = obj.layout.jacobian(&eta);
    let full = obj.layout.len();
    let mut out = vec![vec![0.0; full]; full];
    for (fi, &i) in obj.free.iter().enumerate() {
        for (fj, &j) in obj.free.iter().enumerate() {
            out[i][j] = jac[i] * v_eta[(fi, fj)] * jac[j];
        }
    }
    // exact symmetry
    for i in 0..full {
        for j in 0..i {
            let m = 0.5 * (out[i][j] + out[j][i]);
            out[i][j] = m;
            out[j][i] = m;
        }
    }
    Ok(out)
}

/// Robust or clustered sandwich covariance of a converged fit.
pub fn sandwich_vcov(fit: &ModelFit, data: &[StudyRecord], clustering: Clustering) -> Result<Vec<Vec<f64>>> {
    if !fit.converged {
        return Err(Error::Numerical("covariance requested for a fit that did not converge".into()));
    }
    let prepared = PreparedData::new(data, fit.spec.kind, &fit.spec.selection)?;
    let eta = fit.layout.eta(&fit.theta_hat);
    let free: Vec<usize> = fit.layout.free().iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect();
    let obj = Objective { data: &prepared, template: &fit.spec, layout: &fit.layout, free, base_eta: eta.clone() };
    let x = obj.free_part(&eta);
    sandwich(&obj, &x, &cluster_index(data, clustering))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clusters_by_first_appearance() {
        let d: Vec<StudyRecord> = ["b", "a", "b", "c"]
            .iter()
            .enumerate()
            .map(|(i, c)| StudyRecord::new(i.to_string(), 1.0, 1.0).with_cluster(*c))
            .collect();
        assert_eq!(cluster_index(&d, Clustering::Cluster), [0, 1, 0, 2]);
        assert_eq!(cluster_index(&d, Clustering::Robust), [0, 1, 2, 3]);
    }

    #[test]
    fn singular_matrix_names_direction() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = checked_inverse(&m, &["kappa".into(), "lambda".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("kappa") && msg.contains("lambda"), "{msg}");
    }
}
