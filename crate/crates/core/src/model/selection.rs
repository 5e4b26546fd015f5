use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

/// Partition of the z-axis into cells `cutoff[k-1] <= z < cutoff[k]`.
///
/// Symmetric partitions classify `|z|` and are stored internally as mirrored
/// asymmetric intervals, so every mass computation shares one code path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr", into = "PartitionRepr")]
pub struct CellPartition {
    cutoffs: Vec<f64>,
    symmetric: bool,
    intervals: Vec<Interval>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Interval {
    lo: f64,
    hi: f64,
    cell: usize,
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    cutoffs: Vec<f64>,
    symmetric: bool,
}

impl TryFrom<PartitionRepr> for CellPartition {
    type Error = Error;
    fn try_from(r: PartitionRepr) -> Result<Self> {
        CellPartition::new(r.cutoffs, r.symmetric)
    }
}

impl From<CellPartition> for PartitionRepr {
    fn from(p: CellPartition) -> Self {
        PartitionRepr { cutoffs: p.cutoffs, symmetric: p.symmetric }
    }
}

impl CellPartition {
    pub fn new(cutoffs: Vec<f64>, symmetric: bool) -> Result<Self> {
        if cutoffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::input("cutoffs must be finite"));
        }
        if cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("cutoffs must be strictly increasing"));
        }
        if symmetric && cutoffs.first().is_some_and(|&c| c <= 0.0) {
            return Err(Error::input("symmetric cutoffs must be positive"));
        }
        let k = cutoffs.len() + 1;
        let mut intervals = Vec::new();
        if symmetric {
            // mirrored pieces, ordered along the real line
            for cell in (1..k).rev() {
                let hi = -cutoffs[cell - 1];
                let lo = if cell + 1 < k { -cutoffs[cell] } else { f64::NEG_INFINITY };
                intervals.push(Interval { lo, hi, cell });
            }
            let inner = cutoffs.first().copied().unwrap_or(f64::INFINITY);
            intervals.push(Interval { lo: -inner, hi: inner, cell: 0 });
            for cell in 1..k {
                let lo = cutoffs[cell - 1];
                let hi = if cell + 1 < k { cutoffs[cell] } else { f64::INFINITY };
                intervals.push(Interval { lo, hi, cell });
            }
        } else {
            for cell in 0..k {
                let lo = if cell == 0 { f64::NEG_INFINITY } else { cutoffs[cell - 1] };
                let hi = if cell + 1 < k { cutoffs[cell] } else { f64::INFINITY };
                intervals.push(Interval { lo, hi, cell });
            }
        }
        Ok(CellPartition { cutoffs, symmetric, intervals })
    }

    pub fn cutoffs(&self) -> &[f64] {
        &self.cutoffs
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn n_cells(&self) -> usize {
        self.cutoffs.len() + 1
    }

    /// Cell index of `z`; a point on a cutoff belongs to the upper cell.
    pub fn cell(&self, z: f64) -> usize {
        let a = if self.symmetric { z.abs() } else { z };
        self.cutoffs.iter().position(|&c| a < c).unwrap_or(self.cutoffs.len())
    }

    /// Real-line pieces `(lo, hi, cell)` in ascending order.
    pub fn pieces(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        self.intervals.iter().map(|i| (i.lo, i.hi, i.cell))
    }

    /// Probability of each cell for `Z ~ N(mean, 1)`.
    pub fn masses(&self, mean: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cells()];
        self.add_masses(mean, 1.0, 1.0, &mut out);
        out
    }

    /// Adds `weight * P(Z in cell)` for `Z ~ N(mean, sd^2)` into `acc`.
    pub fn add_masses(&self, mean: f64, sd: f64, weight: f64, acc: &mut [f64]) {
        for i in &self.intervals {
            acc[i.cell] += weight * normal::mass((i.lo - mean) / sd, (i.hi - mean) / sd);
        }
    }
}

/// Additive offset applied to one cell's coefficient, scaled by a covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateOffset {
    pub covariate: String,
    pub cell: usize,
    pub value: f64,
}

/// Step publication probability p(z) with a normalization cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SelectionRepr", into = "SelectionRepr")]
pub struct SelectionFunction {
    partition: CellPartition,
    coefficients: Vec<f64>,
    reference_cell: Option<usize>,
    offsets: Vec<CovariateOffset>,
}

#[derive(Serialize, Deserialize)]
struct SelectionRepr {
    cutoffs: Vec<f64>,
    symmetric: bool,
    coefficients: Vec<f64>,
    reference_cell: Option<usize>,
    #[serde(default)]
    covariate_offsets: Vec<CovariateOffset>,
}

impl TryFrom<SelectionRepr> for SelectionFunction {
    type Error = Error;
    fn try_from(r: SelectionRepr) -> Result<Self> {
        let mut p = match r.reference_cell {
            Some(k) => SelectionFunction::new(r.cutoffs, r.coefficients, k, r.symmetric)?,
            None => SelectionFunction::unnormalized(r.cutoffs, r.coefficients, r.symmetric)?,
        };
        for o in r.covariate_offsets {
            p = p.with_offset(o.covariate, o.cell, o.value)?;
        }
        Ok(p)
    }
}

impl From<SelectionFunction> for SelectionRepr {
    fn from(p: SelectionFunction) -> Self {
        SelectionRepr {
            cutoffs: p.partition.cutoffs,
            symmetric: p.partition.symmetric,
            coefficients: p.coefficients,
            reference_cell: p.reference_cell,
            covariate_offsets: p.offsets,
        }
    }
}

impl SelectionFunction {
    /// Normalized selection function; `coefficients[reference_cell]` must equal 1.
    pub fn new(
        cutoffs: Vec<f64>,
        coefficients: Vec<f64>,
        reference_cell: usize,
        symmetric: bool,
    ) -> Result<Self> {
        let p = Self::unnormalized(cutoffs, coefficients, symmetric)?;
        if reference_cell >= p.n_cells() {
            return Err(Error::input(format!("reference cell {reference_cell} out of range")));
        }
        if p.coefficients[reference_cell] != 1.0 {
            return Err(Error::input(format!(
                "coefficient of reference cell {reference_cell} must be 1, got {}",
                p.coefficients[reference_cell]
            )));
        }
        Ok(SelectionFunction { reference_cell: Some(reference_cell), ..p })
    }

    /// Selection function without a normalization cell (p is identified only up to scale).
    pub fn unnormalized(cutoffs: Vec<f64>, coefficients: Vec<f64>, symmetric: bool) -> Result<Self> {
        let partition = CellPartition::new(cutoffs, symmetric)?;
        if coefficients.len() != partition.n_cells() {
            return Err(Error::input(format!(
                "{} cells need {} coefficients, got {}",
                partition.n_cells(),
                partition.n_cells(),
                coefficients.len()
            )));
        }
        if let Some(k) = coefficients.iter().position(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::input(format!("coefficient of cell {k} must be finite and >= 0")));
        }
        Ok(SelectionFunction { partition, coefficients, reference_cell: None, offsets: Vec::new() })
    }

    /// p(z) = 1 everywhere.
    pub fn constant() -> Self {
        Self::new(Vec::new(), vec![1.0], 0, false).expect("constant selection")
    }

    /// Symmetric two-cell rule: `inner` below `|z| = cutoff`, 1 above.
    pub fn two_sided(cutoff: f64, inner: f64) -> Result<Self> {
        Self::new(vec![cutoff], vec![inner, 1.0], 1, true)
    }

    pub fn with_offset(mut self, covariate: impl Into<String>, cell: usize, value: f64) -> Result<Self> {
        if cell >= self.n_cells() {
            return Err(Error::input(format!("offset cell {cell} out of range")));
        }
        if Some(cell) == self.reference_cell {
            return Err(Error::input("the reference cell cannot carry covariate offsets"));
        }
        if !value.is_finite() {
            return Err(Error::input("offset must be finite"));
        }
        self.offsets.push(CovariateOffset { covariate: covariate.into(), cell, value });
        Ok(self)
    }

    /// Same cells and offsets structure with new coefficients.
    pub fn with_coefficients(&self, coefficients: Vec<f64>) -> Result<Self> {
        let base = match self.reference_cell {
            Some(k) => Self::new(self.cutoffs().to_vec(), coefficients, k, self.symmetric())?,
            None => Self::unnormalized(self.cutoffs().to_vec(), coefficients, self.symmetric())?,
        };
        Ok(SelectionFunction { offsets: self.offsets.clone(), ..base })
    }

    /// Same template with new offset values (in the order they were added).
    pub fn with_offset_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.offsets.len() {
            return Err(Error::input("offset value count mismatch"));
        }
        let mut p = self.clone();
        for (o, &v) in p.offsets.iter_mut().zip(values) {
            o.value = v;
        }
        Ok(p)
    }

    /// All coefficients multiplied by `c`; the result has no normalization cell.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let coefs = self.coefficients.iter().map(|b| b * c).collect();
        let base = Self::unnormalized(self.cutoffs().to_vec(), coefs, self.symmetric())?;
        let offsets = self
            .offsets
            .iter()
            .map(|o| CovariateOffset { value: o.value * c, ..o.clone() })
            .collect();
        Ok(SelectionFunction { offsets, ..base })
    }

    pub fn partition(&self) -> &CellPartition {
        &self.partition
    }

    pub fn cutoffs(&self) -> &[f64] {
        self.partition.cutoffs()
    }

    pub fn symmetric(&self) -> bool {
        self.partition.symmetric()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn reference_cell(&self) -> Option<usize> {
        self.reference_cell
    }

    pub fn offsets(&self) -> &[CovariateOffset] {
        &self.offsets
    }

    pub fn n_cells(&self) -> usize {
        self.partition.n_cells()
    }

    pub fn cell(&self, z: f64) -> usize {
        self.partition.cell(z)
    }

    /// Base coefficient of the cell containing `z` (offsets ignored).
    pub fn value(&self, z: f64) -> f64 {
        self.coefficients[self.cell(z)]
    }

    /// Coefficients after adding the offsets that apply to `covariates`.
    pub fn effective_coefficients(&self, covariates: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        let mut b = self.coefficients.clone();
        for o in &self.offsets {
            let v = covariates
                .get(&o.covariate)
                .ok_or_else(|| Error::input(format!("missing covariate '{}'", o.covariate)))?;
            b[o.cell] += o.value * v;
        }
        if let Some(cell) = b.iter().position(|&v| v < 0.0 || v.is_nan()) {
            return Err(Error::ModelEvaluation {
                cell,
                message: format!("effective publication probability {} is negative", b[cell]),
            });
        }
        Ok(b)
    }

    /// p(z) for a study with the given covariates.
    pub fn eval(&self, z: f64, covariates: &BTreeMap<String, f64>) -> Result<f64> {
        let k = self.cell(z);
        if self.offsets.is_empty() {
            return Ok(self.coefficients[k]);
        }
        let b = self.effective_coefficients(covariates)?;
        Ok(b[k])
    }

    /// E[p(X*/sigma) | theta] with base coefficients.
    pub fn expected_pub_prob(&self, theta: f64, sigma: f64) -> f64 {
        expected_with(&self.partition, &self.coefficients, theta / sigma)
    }

    pub fn max_coefficient(&self) -> f64 {
        self.coefficients.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_coefficient(&self) -> f64 {
        self.coefficients.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// sum_k b_k P(N(mean, 1) in cell k).
pub fn expected_with(partition: &CellPartition, coefficients: &[f64], mean: f64) -> f64 {
    partition
        .masses(mean)
        .iter()
        .zip(coefficients)
        .map(|(m, b)| m * b)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fig_rule() -> SelectionFunction {
        SelectionFunction::two_sided(1.96, 0.1).unwrap()
    }

    #[test]
    fn cell_reads() {
        let p = fig_rule();
        let none = BTreeMap::new();
        assert_eq!(p.eval(2.5, &none).unwrap(), 1.0);
        assert_eq!(p.eval(-1.0, &none).unwrap(), 0.1);
        assert_eq!(p.eval(1.96, &none).unwrap(), 1.0);
        assert_eq!(p.eval(-1.96, &none).unwrap(), 1.0);
    }

    #[test]
    fn asymmetric_boundaries_go_up() {
        let p = SelectionFunction::new(vec![-1.96, 0.0, 1.96], vec![0.5, 0.2, 0.3, 1.0], 3, false).unwrap();
        assert_eq!(p.cell(-1.96), 1);
        assert_eq!(p.cell(0.0), 2);
        assert_eq!(p.cell(-3.0), 0);
        assert_eq!(p.cell(5.0), 3);
    }

    #[test]
    fn expected_prob_closed_form() {
        assert_eq!(SelectionFunction::constant().expected_pub_prob(3.0, 2.0), 1.0);
        let p = fig_rule();
        let inside = normal::mass(-1.96, 1.96);
        assert_relative_eq!(p.expected_pub_prob(0.0, 1.0), 0.1 * inside + (1.0 - inside), epsilon = 1e-15);
        assert_relative_eq!(p.expected_pub_prob(0.0, 1.0), 0.145, epsilon = 1e-4);
        assert!((p.expected_pub_prob(10.0, 1.0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn validation() {
        assert!(SelectionFunction::new(vec![1.0, 1.0], vec![1.0; 3], 0, false).is_err());
        assert!(SelectionFunction::new(vec![1.0], vec![0.5, 0.9], 1, false).is_err());
        assert!(SelectionFunction::new(vec![1.0], vec![-0.5, 1.0], 1, false).is_err());
        assert!(SelectionFunction::new(vec![-1.0], vec![0.5, 1.0], 1, true).is_err());
        assert!(fig_rule().with_offset("aer", 1, 0.2).is_err());
    }

    #[test]
    fn offsets_are_additive_and_checked() {
        let p = fig_rule().with_offset("top5", 0, -0.05).unwrap();
        let mut cov = BTreeMap::new();
        cov.insert("top5".to_string(), 1.0);
        assert_relative_eq!(p.eval(0.5, &cov).unwrap(), 0.05, epsilon = 1e-15);
        cov.insert("top5".to_string(), 0.0);
        assert_eq!(p.eval(0.5, &cov).unwrap(), 0.1);
        assert!(p.eval(0.5, &BTreeMap::new()).is_err());
        let bad = fig_rule().with_offset("top5", 0, -0.3).unwrap();
        cov.insert("top5".to_string(), 1.0);
        match bad.eval(0.5, &cov) {
            Err(Error::ModelEvaluation { cell, .. }) => assert_eq!(cell, 0),
            other => panic!("expected model evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn serde_round_trip() {
        let p = fig_rule().with_offset("j", 0, 0.01).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let q: SelectionFunction = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
        let bad = r#"{"cutoffs":[1.0],"symmetric":false,"coefficients":[0.3,0.5],"reference_cell":1}"#;
        assert!(serde_json::from_str::<SelectionFunction>(bad).is_err());
    }
}
