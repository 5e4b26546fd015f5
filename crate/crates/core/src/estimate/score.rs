use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::vcov::{checked_inverse, record_scores};
use super::{ModelFit, Objective};
use crate::error::{Error, Result};
use crate::likelihood::{ModelKind, PreparedData};
use crate::model::StudyRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Lagrange-multiplier test of publication depending on the latent index,
/// evaluated at the baseline fit with outer-product information.
pub fn score_test_selection_on_theta(data: &[StudyRecord], baseline: &ModelFit) -> Result<ScoreTest> {
    if baseline.spec.kind != ModelKind::Replication {
        return Err(Error::input("the score test needs a replication fit"));
    }
    if baseline.spec.latent_gamma.is_some() {
        return Err(Error::input("baseline fit must not include latent coefficients"));
    }
    let prepared = PreparedData::new(data, ModelKind::Replication, &baseline.spec.selection)?;
    let layout = &baseline.layout;
    let eta = layout.eta(&baseline.theta_hat);
    let free: Vec<usize> = layout.free().iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect();
    let obj = Objective { data: &prepared, template: &baseline.spec, layout, free, base_eta: eta.clone() };
    let x = obj.free_part(&eta);
    let nuisance = record_scores(&obj, &x)?;

    let k = baseline.spec.selection.n_cells();
    let latent = baseline.spec.clone().with_latent_gamma(vec![0.0; k]);
    let gamma_scores = prepared.latent_gamma_scores(&latent)?;
    let reference = baseline.spec.selection.reference_cell();
    let gamma_cols: Vec<usize> = (0..k).filter(|&j| Some(j) != reference).collect();
    let df = gamma_cols.len();
    if df == 0 {
        return Err(Error::input("the score test needs at least two selection cells"));
    }

    let rows: Vec<Vec<f64>> = nuisance
        .iter()
        .zip(&gamma_scores)
        .map(|(a, g)| a.iter().copied().chain(gamma_cols.iter().map(|&j| g[j])).collect())
        .collect();
    let p = rows[0].len();
    let mut total = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for r in &rows {
        let v = DVector::from_column_slice(r);
        total += &v;
        info += &v * v.transpose();
    }
    let mut names: Vec<String> = obj.free.iter().map(|&i| baseline.param_names[i].clone()).collect();
    names.extend(gamma_cols.iter().map(|j| format!("gamma_{}", j + 1)));
    let inv = checked_inverse(&info, &names)?;
    let statistic = (total.transpose() * inv * &total)[(0, 0)];
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(ScoreTest { statistic, df, p_value: chi.sf(statistic) })
}
