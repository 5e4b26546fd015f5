use serde::{Deserialize, Serialize};

use super::{bisect_decreasing, check_sigma};
use crate::error::{Error, Result};
use crate::model::{EffectDistribution, SelectionFunction};
use crate::normal;
use crate::quadrature::{DEFAULT_NODES, MAX_NODES};

/// Default number of posterior grid points.
pub const POSTERIOR_GRID: usize = 2001;
/// Half-width of the default grid in units of the prior spread or of sigma.
pub const POSTERIOR_SPAN: f64 = 12.0;
const NORMALIZATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorMode {
    /// The published study is unrelated to the prior draw: selection drops out.
    UnrelatedParameters,
    /// The prior describes the latent population the study was drawn from.
    CommonParameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub theta: Vec<f64>,
    pub density: Vec<f64>,
    pub mean: f64,
}

fn default_grid(x: f64, sigma: f64, prior: &EffectDistribution) -> Vec<f64> {
    let (loc, scale) = prior.location_scale();
    let lo = (loc - POSTERIOR_SPAN * scale).min(x - POSTERIOR_SPAN * sigma);
    let hi = (loc + POSTERIOR_SPAN * scale).max(x + POSTERIOR_SPAN * sigma);
    let step = (hi - lo) / (POSTERIOR_GRID - 1) as f64;
    (0..POSTERIOR_GRID).map(|i| lo + step * i as f64).collect()
}

/// Posterior density of the true effect of one published study on an evenly
/// spaced grid, normalized so that `sum(density) * step = 1`.
pub fn posterior_density(
    x: f64,
    sigma: f64,
    p: &SelectionFunction,
    prior: &EffectDistribution,
    mode: PosteriorMode,
    theta_grid: Option<&[f64]>,
) -> Result<PosteriorTable> {
    check_sigma(sigma)?;
    prior.validate()?;
    if prior.is_discrete() {
        return Err(Error::input("posterior densities need a continuous prior"));
    }
    let grid = match theta_grid {
        Some(g) => g.to_vec(),
        None => default_grid(x, sigma, prior),
    };
    if grid.len() < 3 {
        return Err(Error::input("posterior grid needs at least 3 points"));
    }
    let step = grid[1] - grid[0];
    if !(step > 0.0) || grid.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-9 * step.max(w[1].abs())) {
        return Err(Error::input("posterior grid must be increasing and evenly spaced"));
    }
    let mut dens = Vec::with_capacity(grid.len());
    for &t in &grid {
        let prior_d = prior.density(t).unwrap_or(0.0);
        let mut d = normal::pdf((x - t) / sigma) * prior_d;
        if mode == PosteriorMode::CommonParameters && d > 0.0 {
            d /= p.expected_pub_prob(t, sigma);
        }
        if !d.is_finite() {
            return Err(Error::Numerical(format!("unbounded posterior density at theta = {t}")));
        }
        dens.push(d);
    }
    let total: f64 = dens.iter().sum::<f64>() * step;
    // every other point: a coarse grid should agree with the full one
    let half: f64 = dens.iter().step_by(2).sum::<f64>() * 2.0 * step;
    let edge = (dens[0] + dens[dens.len() - 1]) * step;
    if !(total > 0.0) || (half / total - 1.0).abs() > NORMALIZATION_TOLERANCE || edge / total > NORMALIZATION_TOLERANCE {
        return Err(Error::Numerical("grid too coarse or too narrow to normalize the posterior".into()));
    }
    for d in &mut dens {
        *d /= total;
    }
    let mean = grid.iter().zip(&dens).map(|(t, d)| t * d).sum::<f64>() * step;
    Ok(PosteriorTable { theta: grid, density: dens, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicationThreshold {
    pub x_c: f64,
    pub rule: String,
}

/// E[theta | X* = x] under prior `mu`, with quadrature refined until stable.
fn posterior_mean(mu: &EffectDistribution, x: f64, sigma: f64) -> Result<f64> {
    if let EffectDistribution::Normal { mean, sd } = *mu {
        let w = sd * sd / (sd * sd + sigma * sigma);
        return Ok(mean + w * (x - mean));
    }
    let at = |n: usize| {
        let rule = mu.quadrature_rule(n);
        let lw: Vec<f64> = rule.iter().map(|(t, w)| w.ln() + normal::ln_pdf((x - t) / sigma)).collect();
        let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for ((t, _), l) in rule.iter().zip(&lw) {
            let e = (l - m).exp();
            num += t * e;
            den += e;
        }
        num / den
    };
    if mu.is_discrete() {
        return Ok(at(1));
    }
    let mut n = DEFAULT_NODES;
    let mut prev = at(n);
    while n < MAX_NODES {
        n *= 2;
        let next = at(n);
        if (next - prev).abs() <= 1e-12 * next.abs().max(1.0) {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Integration { achieved: (prev - at(n / 2)).abs() })
}

/// Cutoff `x_c` of the journal rule that publishes a result when the
/// posterior mean of the effect exceeds the cost `c`.
pub fn optimal_publication_threshold(mu: &EffectDistribution, sigma: f64, c: f64) -> Result<PublicationThreshold> {
    check_sigma(sigma)?;
    mu.validate()?;
    let (loc, scale) = mu.location_scale();
    let span = POSTERIOR_SPAN * (scale + sigma);
    let n = 401;
    let mut means = Vec::with_capacity(n);
    for i in 0..n {
        let x = loc - span + 2.0 * span * i as f64 / (n - 1) as f64;
        means.push(posterior_mean(mu, x, sigma)?);
    }
    if means.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::NoSolution("posterior mean is not strictly increasing in the estimate".into()));
    }
    if !(c > means[0] && c < means[n - 1]) {
        return Err(Error::NoSolution(format!(
            "cost {c} outside the range [{}, {}] of the posterior mean",
            means[0],
            means[n - 1]
        )));
    }
    let mut failed = None;
    let x_c = bisect_decreasing(
        |x| match posterior_mean(mu, x, sigma) {
            Ok(m) => c - m,
            Err(e) => {
                failed.get_or_insert(e.to_string());
                f64::NAN
            }
        },
        loc,
        scale + sigma,
    )?;
    if let Some(msg) = failed {
        return Err(Error::Numerical(msg));
    }
    Ok(PublicationThreshold { x_c, rule: format!("publish if and only if X > {x_c}") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn conjugate_normal() {
        let prior = EffectDistribution::normal(0.0, 1.0).unwrap();
        let t = posterior_density(1.0, 1.0, &SelectionFunction::constant(), &prior, PosteriorMode::CommonParameters, None)
            .unwrap();
        let step = t.theta[1] - t.theta[0];
        for (th, d) in t.theta.iter().zip(&t.density) {
            let exact = normal::pdf((th - 0.5) / 0.5f64.sqrt()) / 0.5f64.sqrt();
            assert!((d - exact).abs() < 1e-10, "{th}");
        }
        assert_relative_eq!(t.mean, 0.5, epsilon = 1e-10);
        assert_relative_eq!(t.density.iter().sum::<f64>() * step, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_selection_modes_agree() {
        let prior = EffectDistribution::t_location_scale(0.3, 1.2, 4.0).unwrap();
        let p = SelectionFunction::constant().scaled(0.4).unwrap();
        let a = posterior_density(1.5, 0.8, &p, &prior, PosteriorMode::CommonParameters, None).unwrap();
        let b = posterior_density(1.5, 0.8, &p, &prior, PosteriorMode::UnrelatedParameters, None).unwrap();
        for (x, y) in a.density.iter().zip(&b.density) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_lowers_common_mean() {
        let prior = EffectDistribution::normal(1.0, 1.0).unwrap();
        let p = SelectionFunction::two_sided(1.96, 0.1).unwrap();
        let a = posterior_density(2.2, 1.0, &p, &prior, PosteriorMode::CommonParameters, None).unwrap();
        let b = posterior_density(2.2, 1.0, &p, &prior, PosteriorMode::UnrelatedParameters, None).unwrap();
        assert!(a.mean < b.mean);
        assert_relative_eq!(b.mean, 1.6, epsilon = 1e-9);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let prior = EffectDistribution::normal(0.0, 0.01).unwrap();
        let grid: Vec<f64> = (0..21).map(|i| -5.0 + 0.5 * i as f64).collect();
        let r = posterior_density(0.0, 1.0, &SelectionFunction::constant(), &prior, PosteriorMode::CommonParameters, Some(&grid));
        assert!(r.is_err());
    }

    #[test]
    fn normal_threshold() {
        let mu = EffectDistribution::normal(0.0, 1.0).unwrap();
        assert_relative_eq!(optimal_publication_threshold(&mu, 1.0, 0.5).unwrap().x_c, 1.0, epsilon = 1e-9);
        assert!(optimal_publication_threshold(&mu, 1.0, 0.0).unwrap().x_c.abs() < 1e-9);
        assert!(optimal_publication_threshold(&EffectDistribution::point_mass(0.0).unwrap(), 1.0, 0.0).is_err());
    }

    #[test]
    fn gamma_threshold_reference() {
        let mu = EffectDistribution::gamma_abs(1.0, 1.0).unwrap();
        let t = optimal_publication_threshold(&mu, 1.0, 0.2).unwrap();
        assert_relative_eq!(t.x_c, REF_GAMMA_XC, epsilon = 1e-6);
    }

    const REF_GAMMA_XC: f64 = 0.41679369896849117;
}
