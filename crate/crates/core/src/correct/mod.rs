//! Bias-corrected inference for individual published studies.
//!
//! With a known selection function the published estimate has a truncated
//! normal law whose CDF is decreasing in the true effect. Inverting that CDF
//! gives quantile-unbiased estimators and equal-tailed intervals.

mod multivariate;
mod posterior;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use multivariate::{conditional_cdf, conditional_quantile_unbiased, TwoSignalSelection};
pub use posterior::{
    optimal_publication_threshold, posterior_density, PosteriorMode, PosteriorTable, PublicationThreshold,
};

use crate::error::{Error, Result};
use crate::estimate::ModelFit;
use crate::model::{SelectionFunction, StudyRecord};
use crate::normal;

/// Relative step for derivatives of interval endpoints in the coefficients.
pub const BONFERRONI_STEP: f64 = 1e-4;
/// Largest bracket half-width, in units of the standard error.
pub const MAX_BRACKET: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedInference {
    pub study_id: String,
    /// Median-unbiased estimate.
    pub theta_median: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub bonf_lower: Option<f64>,
    pub bonf_upper: Option<f64>,
    pub alpha: f64,
    pub delta: Option<f64>,
}

/// Piecewise constant weight on the real line: `(lo, hi, weight)` in
/// ascending order, covering the whole line.
#[derive(Debug, Clone)]
pub(crate) struct Segments(pub Vec<(f64, f64, f64)>);

impl Segments {
    pub fn from_selection(p: &SelectionFunction, sigma: f64) -> Result<Self> {
        let beta = p.coefficients();
        if let Some(k) = beta.iter().position(|&b| !(b > 0.0)) {
            return Err(Error::ModelEvaluation {
                cell: k,
                message: "CDF inversion needs every publication probability to be positive".into(),
            });
        }
        Ok(Segments(p.partition().pieces().map(|(lo, hi, k)| (lo * sigma, hi * sigma, beta[k])).collect()))
    }

    /// Weighted normal mass below and above `x` for `N(theta, s^2)`.
    ///
    /// Both sums run outward from `x`, so mirrored segments give identical
    /// rounding on either side.
    fn split(&self, x: f64, theta: f64, s: f64) -> (f64, f64) {
        let lower: f64 = self
            .0
            .iter()
            .rev()
            .filter(|seg| seg.0 < x)
            .map(|&(a, b, w)| w * normal::mass((a - theta) / s, (b.min(x) - theta) / s))
            .sum();
        let upper: f64 = self
            .0
            .iter()
            .filter(|seg| seg.1 > x)
            .map(|&(a, b, w)| w * normal::mass((a.max(x) - theta) / s, (b - theta) / s))
            .sum();
        (lower, upper)
    }

    pub fn cdf(&self, x: f64, theta: f64, s: f64) -> f64 {
        let (lo, up) = self.split(x, theta, s);
        let total = lo + up;
        if total > 0.0 {
            lo / total
        } else if x > theta {
            1.0
        } else {
            0.0
        }
    }

    /// theta with `cdf(x, theta) = alpha`; the CDF decreases in theta.
    pub fn invert_theta(&self, x: f64, s: f64, alpha: f64) -> Result<f64> {
        check_alpha(alpha)?;
        let f = |t: f64| self.cdf(x, t, s) - alpha;
        bisect_decreasing(f, x, s)
    }

    /// x with `cdf(x, theta) = q`; the CDF increases in x.
    pub fn invert_x(&self, theta: f64, s: f64, q: f64) -> Result<f64> {
        check_alpha(q)?;
        let f = |x: f64| q - self.cdf(x, theta, s);
        bisect_decreasing(f, theta, s)
    }
}

fn check_alpha(a: f64) -> Result<()> {
    if a > 0.0 && a < 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!("probability level must lie in (0, 1), got {a}")))
    }
}

/// Root of a decreasing function, bracketed outward from `center ± 10 s`.
pub(crate) fn bisect_decreasing(mut f: impl FnMut(f64) -> f64, center: f64, s: f64) -> Result<f64> {
    let mut w = 10.0 * s;
    let (mut lo, mut hi) = (center - w, center + w);
    let (mut flo, mut fhi) = (f(lo), f(hi));
    while !(flo >= 0.0 && fhi <= 0.0) {
        w *= 2.0;
        if w > MAX_BRACKET * s {
            return Err(Error::Bracket(format!(
                "no sign change within {MAX_BRACKET:e} standard errors of {center}"
            )));
        }
        if !(flo >= 0.0) {
            lo = center - w;
            flo = f(lo);
        }
        if !(fhi <= 0.0) {
            hi = center + w;
            fhi = f(hi);
        }
    }
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = f(mid);
        if v == 0.0 {
            return Ok(mid);
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::input("sigma must be positive and finite"))
    }
}

/// CDF of a published estimate at `x` given the true effect `theta`.
pub fn truncated_cdf(x: f64, theta: f64, sigma: f64, p: &SelectionFunction) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(Segments::from_selection(p, sigma)?.cdf(x, theta, sigma))
}

/// theta at which the observed `x` is the `alpha` quantile of its published law.
pub fn quantile_unbiased(x: f64, sigma: f64, p: &SelectionFunction, alpha: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Segments::from_selection(p, sigma)?.invert_theta(x, sigma, alpha)
}

fn interval_with(seg: &Segments, x: f64, sigma: f64, alpha: f64) -> Result<(f64, f64)> {
    let a = seg.invert_theta(x, sigma, 1.0 - alpha / 2.0)?;
    let b = seg.invert_theta(x, sigma, alpha / 2.0)?;
    Ok((a.min(b), a.max(b)))
}

/// Median-unbiased estimate and equal-tailed `1 - alpha` interval.
pub fn corrected_interval(x: f64, sigma: f64, p: &SelectionFunction, alpha: f64) -> Result<CorrectedInference> {
    check_sigma(sigma)?;
    check_alpha(alpha)?;
    let seg = Segments::from_selection(p, sigma)?;
    let theta_median = seg.invert_theta(x, sigma, 0.5)?;
    let (ci_lower, ci_upper) = interval_with(&seg, x, sigma, alpha)?;
    Ok(CorrectedInference {
        study_id: String::new(),
        theta_median,
        ci_lower,
        ci_upper,
        bonf_lower: None,
        bonf_upper: None,
        alpha,
        delta: None,
    })
}

/// Selection function at the estimated parameters perturbed by `eps` in
/// coordinate `i` (on the reported scale), with offsets applied.
fn perturbed_selection(fit: &ModelFit, covariates: &std::collections::BTreeMap<String, f64>, i: Option<(usize, f64)>) -> Result<SelectionFunction> {
    let mut theta = fit.theta_hat.clone();
    if let Some((i, eps)) = i {
        theta[i] += eps;
    }
    let spec = fit.layout.spec(&fit.spec, &theta)?;
    let eff = spec.selection.effective_coefficients(covariates)?;
    SelectionFunction::unnormalized(spec.selection.cutoffs().to_vec(), eff, spec.selection.symmetric())
}

/// Plug-in interval at level `1 - (alpha - delta)`, each endpoint widened by
/// the `1 - delta/2` normal quantile times its delta-method standard error.
pub fn bonferroni_interval(x: f64, sigma: f64, fit: &ModelFit, alpha: f64, delta: f64) -> Result<CorrectedInference> {
    bonferroni_interval_for(&StudyRecord::new("", x, sigma), fit, alpha, delta)
}

/// [`bonferroni_interval`] for a study whose covariates shift the coefficients.
pub fn bonferroni_interval_for(record: &StudyRecord, fit: &ModelFit, alpha: f64, delta: f64) -> Result<CorrectedInference> {
    check_alpha(alpha)?;
    if !(delta > 0.0 && delta < alpha) {
        return Err(Error::input("delta must lie in (0, alpha)"));
    }
    let (x, sigma) = (record.x, record.sigma);
    check_sigma(sigma)?;
    let base = perturbed_selection(fit, &record.covariates, None)?;
    let mut out = corrected_interval(x, sigma, &base, alpha)?;
    out.study_id = record.study_id.clone();
    let level = alpha - delta;
    let seg = Segments::from_selection(&base, sigma)?;
    let (lo, hi) = interval_with(&seg, x, sigma, level)?;

    let nb = fit.layout.beta_cells.len() + fit.layout.n_offsets;
    let idx: Vec<usize> = (fit.layout.n_effect()..fit.layout.n_effect() + nb)
        .filter(|&i| fit.vcov[i][i] > 0.0)
        .collect();
    let mut grad_lo = vec![0.0; idx.len()];
    let mut grad_hi = vec![0.0; idx.len()];
    for (g, &i) in idx.iter().enumerate() {
        let h = BONFERRONI_STEP * fit.theta_hat[i].abs().max(1e-2);
        let up = Segments::from_selection(&perturbed_selection(fit, &record.covariates, Some((i, h)))?, sigma)?;
        let dn = Segments::from_selection(&perturbed_selection(fit, &record.covariates, Some((i, -h)))?, sigma)?;
        let (lu, hu) = interval_with(&up, x, sigma, level)?;
        let (ld, hd) = interval_with(&dn, x, sigma, level)?;
        grad_lo[g] = (lu - ld) / (2.0 * h);
        grad_hi[g] = (hu - hd) / (2.0 * h);
    }
    let quad = |g: &[f64]| -> f64 {
        let mut v = 0.0;
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                v += g[a] * fit.vcov[i][j] * g[b];
            }
        }
        v.max(0.0).sqrt()
    };
    let (se_lo, se_hi) = (quad(&grad_lo), quad(&grad_hi));
    if !(se_lo.is_finite() && se_hi.is_finite()) {
        return Err(Error::Numerical("non-finite derivative of an interval endpoint".into()));
    }
    let c = normal::quantile(1.0 - delta / 2.0);
    out.bonf_lower = Some(lo - c * se_lo);
    out.bonf_upper = Some(hi + c * se_hi);
    out.delta = Some(delta);
    Ok(out)
}

/// Corrected inference for every record, in input order.
pub fn correct_studies(data: &[StudyRecord], p: &SelectionFunction, alpha: f64) -> Result<Vec<CorrectedInference>> {
    if !p.symmetric() && data.iter().any(|r| r.sign_normalized) {
        return Err(Error::input("sign-normalized estimates need a symmetric selection function"));
    }
    data.par_iter()
        .map(|r| {
            let eff = p.effective_coefficients(&r.covariates)?;
            let pr = SelectionFunction::unnormalized(p.cutoffs().to_vec(), eff, p.symmetric())?;
            let mut c = corrected_interval(r.x, r.sigma, &pr, alpha)?;
            c.study_id = r.study_id.clone();
            Ok(c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub theta: f64,
    pub median_bias_conventional: f64,
    pub coverage_conventional: f64,
    pub median_bias_corrected: f64,
    pub coverage_corrected: f64,
}

/// Median bias and coverage of the conventional and corrected procedures at
/// nominal level 95% over a grid of true effects.
pub fn bias_coverage_curves(p: &SelectionFunction, sigma: f64, theta_grid: &[f64]) -> Result<Vec<CurveRow>> {
    check_sigma(sigma)?;
    if theta_grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::input("theta grid must be finite"));
    }
    let seg = Segments::from_selection(p, sigma)?;
    let alpha = 0.05;
    let z = normal::quantile(1.0 - alpha / 2.0);
    theta_grid
        .par_iter()
        .map(|&theta| {
            let x_med = seg.invert_x(theta, sigma, 0.5)?;
            let coverage_conventional = seg.cdf(theta + z * sigma, theta, sigma) - seg.cdf(theta - z * sigma, theta, sigma);
            let corrected_med = seg.invert_theta(x_med, sigma, 0.5)?;
            // The interval covers theta exactly when F(X|theta) lies in [alpha/2, 1 - alpha/2].
            let x_lo = seg.invert_x(theta, sigma, alpha / 2.0)?;
            let x_hi = seg.invert_x(theta, sigma, 1.0 - alpha / 2.0)?;
            Ok(CurveRow {
                theta,
                median_bias_conventional: x_med - theta,
                coverage_conventional,
                median_bias_corrected: corrected_med - theta,
                coverage_corrected: seg.cdf(x_hi, theta, sigma) - seg.cdf(x_lo, theta, sigma),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fig1() -> SelectionFunction {
        SelectionFunction::two_sided(1.96, 0.1).unwrap()
    }

    #[test]
    fn no_selection_is_normal() {
        let p = SelectionFunction::constant();
        for &(x, t) in &[(0.0, 0.0), (1.0, -0.5), (3.0, 2.0), (-2.0, 1.0)] {
            assert_relative_eq!(truncated_cdf(x, t, 1.3, &p).unwrap(), normal::cdf((x - t) / 1.3), epsilon = 1e-15);
        }
        assert_relative_eq!(quantile_unbiased(1.0, 1.0, &p, 0.5).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(
            quantile_unbiased(1.0, 1.0, &p, 0.025).unwrap(),
            1.0 + normal::quantile(0.975),
            epsilon = 1e-9
        );
        let c = corrected_interval(0.0, 1.0, &p, 0.05).unwrap();
        assert_relative_eq!(c.ci_lower, -1.959963984540054, epsilon = 1e-9);
        assert_relative_eq!(c.ci_upper, 1.959963984540054, epsilon = 1e-9);
        assert!(c.theta_median.abs() < 1e-12);
    }

    #[test]
    fn truncated_cdf_reference_value() {
        // independent quadrature of the truncated density
        let v = truncated_cdf(2.0, 1.0, 1.0, &fig1()).unwrap();
        assert_relative_eq!(v, 0.37305089132868047, epsilon = 1e-12);
    }

    #[test]
    fn tail_limits() {
        let p = fig1();
        assert!(truncated_cdf(1.0 + 12.0, 1.0, 1.0, &p).unwrap() > 1.0 - 1e-10);
        assert!(truncated_cdf(1.0 - 12.0, 1.0, 1.0, &p).unwrap() < 1e-10);
    }

    #[test]
    fn symmetric_case_is_exactly_half() {
        assert_eq!(truncated_cdf(0.0, 0.0, 1.0, &fig1()).unwrap(), 0.5);
        assert_eq!(quantile_unbiased(0.0, 2.0, &fig1(), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn median_unbiased_reference_value() {
        let v = quantile_unbiased(2.2, 1.0, &fig1(), 0.5).unwrap();
        assert!(v < 2.2);
        assert_relative_eq!(v, 1.1260843260915996, epsilon = 1e-8);
    }

    #[test]
    fn zero_cell_is_rejected() {
        let p = SelectionFunction::two_sided(1.96, 0.0).unwrap();
        assert!(matches!(truncated_cdf(1.0, 0.0, 1.0, &p), Err(Error::ModelEvaluation { .. })));
    }

    #[test]
    fn interval_at_two_contains_zero() {
        let c = corrected_interval(2.0, 1.0, &fig1(), 0.05).unwrap();
        assert!(c.ci_lower < 0.0 && c.ci_upper > 2.0);
        assert!(c.ci_lower <= c.theta_median && c.theta_median <= c.ci_upper);
    }

    #[test]
    fn conventional_curves() {
        let grid = [0.0, 1.0, 2.0, 3.0];
        let rows = bias_coverage_curves(&fig1(), 1.0, &grid).unwrap();
        assert!(rows[0].median_bias_conventional.abs() < 1e-9);
        for r in &rows {
            assert!(r.median_bias_corrected.abs() < 1e-8);
            assert_relative_eq!(r.coverage_corrected, 0.95, epsilon = 1e-9);
        }
        let flat = bias_coverage_curves(&SelectionFunction::constant(), 2.0, &grid).unwrap();
        for r in &flat {
            assert_relative_eq!(r.coverage_conventional, 0.95, epsilon = 1e-12);
        }
    }
}
