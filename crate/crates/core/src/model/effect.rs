use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::normal;
use crate::quadrature::{gauss_legendre, QuadratureRule, DEFAULT_TOLERANCE};

/// Upper-tail probability discarded when truncating the gamma support.
const GAMMA_TAIL: f64 = 1e-10;
/// Half-width, in standard deviations, of the normal quadrature window.
const NORMAL_WINDOW: f64 = 12.0;

/// Distribution of the true effect across latent studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EffectDistribution {
    /// |theta| ~ Gamma(shape, scale) with an independent fair sign.
    GammaAbs { shape: f64, scale: f64 },
    /// location + scale * t(df).
    TLocationScale { location: f64, scale: f64, df: f64 },
    Normal { mean: f64, sd: f64 },
    PointMass { value: f64 },
    FiniteMixture { weights: Vec<f64>, atoms: Vec<f64> },
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::input(format!("{name} must be finite and positive, got {v}")))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::input(format!("{name} must be finite, got {v}")))
    }
}

impl EffectDistribution {
    pub fn gamma_abs(shape: f64, scale: f64) -> Result<Self> {
        let d = EffectDistribution::GammaAbs { shape, scale };
        d.validate()?;
        Ok(d)
    }

    pub fn t_location_scale(location: f64, scale: f64, df: f64) -> Result<Self> {
        let d = EffectDistribution::TLocationScale { location, scale, df };
        d.validate()?;
        Ok(d)
    }

    /// Normal effect; `sd = 0` yields a point mass.
    pub fn normal(mean: f64, sd: f64) -> Result<Self> {
        if sd == 0.0 {
            return Self::point_mass(mean);
        }
        let d = EffectDistribution::Normal { mean, sd };
        d.validate()?;
        Ok(d)
    }

    pub fn point_mass(value: f64) -> Result<Self> {
        finite("point mass location", value)?;
        Ok(EffectDistribution::PointMass { value })
    }

    pub fn finite_mixture(weights: Vec<f64>, atoms: Vec<f64>) -> Result<Self> {
        let d = EffectDistribution::FiniteMixture { weights, atoms };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::GammaAbs { shape, scale } => {
                positive("gamma shape", *shape)?;
                positive("gamma scale", *scale)
            }
            Self::TLocationScale { location, scale, df } => {
                finite("t location", *location)?;
                positive("t scale", *scale)?;
                positive("t degrees of freedom", *df)
            }
            Self::Normal { mean, sd } => {
                finite("normal mean", *mean)?;
                if sd.is_finite() && *sd >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::input(format!("normal sd must be >= 0, got {sd}")))
                }
            }
            Self::PointMass { value } => finite("point mass location", *value),
            Self::FiniteMixture { weights, atoms } => {
                if weights.is_empty() || weights.len() != atoms.len() {
                    return Err(Error::input("mixture needs matching non-empty weights and atoms"));
                }
                if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || atoms.iter().any(|a| !a.is_finite()) {
                    return Err(Error::input("mixture weights must be >= 0 and atoms finite"));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::input(format!("mixture weights sum to {total}, not 1")));
                }
                Ok(())
            }
        }
    }

    /// Short family label used in parameter names and CLI flags.
    pub fn family(&self) -> &'static str {
        match self {
            Self::GammaAbs { .. } => "gamma",
            Self::TLocationScale { .. } => "t",
            Self::Normal { .. } => "normal",
            Self::PointMass { .. } => "point",
            Self::FiniteMixture { .. } => "mixture",
        }
    }

    /// True when the distribution is symmetric about zero.
    pub fn is_symmetric_about_zero(&self) -> bool {
        match self {
            Self::GammaAbs { .. } => true,
            Self::TLocationScale { location, .. } => *location == 0.0,
            Self::Normal { mean, .. } => *mean == 0.0,
            Self::PointMass { value } => *value == 0.0,
            Self::FiniteMixture { weights, atoms } => {
                let mut pos: Vec<(f64, f64)> = Vec::new();
                let mut neg: Vec<(f64, f64)> = Vec::new();
                for (&w, &a) in weights.iter().zip(atoms) {
                    if a > 0.0 {
                        pos.push((a, w));
                    } else if a < 0.0 {
                        neg.push((-a, w));
                    }
                }
                pos.sort_by(|x, y| x.partial_cmp(y).unwrap());
                neg.sort_by(|x, y| x.partial_cmp(y).unwrap());
                pos == neg
            }
        }
    }

    /// Lebesgue density, or `None` for discrete distributions.
    pub fn density(&self, theta: f64) -> Option<f64> {
        match *self {
            Self::GammaAbs { shape, scale } => {
                let a = theta.abs();
                if a == 0.0 {
                    return Some(if shape < 1.0 {
                        f64::INFINITY
                    } else if shape == 1.0 {
                        0.5 / scale
                    } else {
                        0.0
                    });
                }
                Some(0.5 * gamma_ln_density(a, shape, scale).exp())
            }
            Self::TLocationScale { location, scale, df } => {
                Some(t_ln_density((theta - location) / scale, df).exp() / scale)
            }
            Self::Normal { mean, sd } if sd > 0.0 => Some(normal::pdf((theta - mean) / sd) / sd),
            _ => None,
        }
    }

    /// Centre and spread used to lay out default grids.
    pub fn location_scale(&self) -> (f64, f64) {
        match self {
            Self::GammaAbs { shape, scale } => (0.0, scale * (shape * (shape + 1.0)).sqrt()),
            Self::TLocationScale { location, scale, df } => {
                let s = if *df > 2.0 { scale * (df / (df - 2.0)).sqrt() } else { scale * 3.0 };
                (*location, s)
            }
            Self::Normal { mean, sd } => (*mean, *sd),
            Self::PointMass { value } => (*value, 0.0),
            Self::FiniteMixture { weights, atoms } => {
                let m: f64 = weights.iter().zip(atoms).map(|(w, a)| w * a).sum();
                let v: f64 = weights.iter().zip(atoms).map(|(w, a)| w * (a - m).powi(2)).sum();
                (m, v.sqrt())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::GammaAbs { shape, scale } => {
                let g = Gamma::new(*shape, *scale).expect("validated gamma").sample(rng);
                let u: f64 = rng.random();
                if u < 0.5 {
                    -g
                } else {
                    g
                }
            }
            Self::TLocationScale { location, scale, df } => {
                location + scale * StudentT::new(*df).expect("validated t").sample(rng)
            }
            Self::Normal { mean, sd } => {
                let e: f64 = StandardNormal.sample(rng);
                mean + sd * e
            }
            Self::PointMass { value } => *value,
            Self::FiniteMixture { weights, atoms } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (w, a) in weights.iter().zip(atoms) {
                    acc += w;
                    if u < acc {
                        return *a;
                    }
                }
                *atoms.last().expect("non-empty mixture")
            }
        }
    }

    /// True when integrals against this distribution need no quadrature.
    pub fn is_discrete(&self) -> bool {
        matches!(self, Self::PointMass { .. } | Self::FiniteMixture { .. })
    }

    /// Discretization of the distribution with `n` Gauss–Legendre nodes per piece.
    pub fn quadrature_rule(&self, n: usize) -> QuadratureRule {
        match self {
            Self::PointMass { value } => QuadratureRule::point(*value),
            Self::FiniteMixture { weights, atoms } => {
                QuadratureRule::normalized(atoms.clone(), weights.clone(), 0.0)
            }
            Self::Normal { mean, sd } => {
                if *sd == 0.0 {
                    return QuadratureRule::point(*mean);
                }
                let rule = gauss_legendre(n);
                let (nodes, weights) = rule
                    .0
                    .iter()
                    .zip(&rule.1)
                    .map(|(&x, &w)| (mean + sd * NORMAL_WINDOW * x, w * normal::pdf(NORMAL_WINDOW * x)))
                    .unzip();
                QuadratureRule::normalized(nodes, weights, DEFAULT_TOLERANCE)
            }
            Self::TLocationScale { location, scale, df } => {
                let rule = gauss_legendre(n);
                let half_pi = std::f64::consts::FRAC_PI_2;
                let (nodes, weights) = rule
                    .0
                    .iter()
                    .zip(&rule.1)
                    .map(|(&x, &w)| {
                        let u = half_pi * x;
                        let t = u.tan();
                        let c = u.cos();
                        (location + scale * t, w * (t_ln_density(t, *df).exp() / (c * c)))
                    })
                    .unzip();
                QuadratureRule::normalized(nodes, weights, DEFAULT_TOLERANCE)
            }
            Self::GammaAbs { shape, scale } => gamma_abs_rule(*shape, *scale, n),
        }
    }
}

fn gamma_ln_density(x: f64, shape: f64, scale: f64) -> f64 {
    (shape - 1.0) * x.ln() - x / scale - ln_gamma(shape) - shape * scale.ln()
}

fn t_ln_density(t: f64, df: f64) -> f64 {
    ln_gamma(0.5 * (df + 1.0))
        - ln_gamma(0.5 * df)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - 0.5 * (df + 1.0) * (t * t / df).ln_1p()
}

/// Upper quantile q with P(Gamma(shape, 1) > q) = tail.
fn gamma_upper_quantile(shape: f64, tail: f64) -> f64 {
    let mut hi = shape.max(1.0);
    while gamma_ur(shape, hi) > tail {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_ur(shape, mid) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    hi
}

/// Gauss–Legendre in t = theta^a on the truncated support, then mirrored.
///
/// With a = shape / ceil(shape) the density factor becomes the polynomial
/// t^(ceil(shape) - 1), so non-integer shapes keep geometric convergence.
fn gamma_abs_rule(shape: f64, scale: f64, n: usize) -> QuadratureRule {
    let a = shape / shape.ceil();
    let upper = scale * gamma_upper_quantile(shape, GAMMA_TAIL);
    let t_max = upper.powf(a);
    let rule = gauss_legendre(n);
    let half = 0.5 * t_max;
    let mut pos = Vec::with_capacity(n);
    for (&x, &w) in rule.0.iter().zip(&rule.1) {
        let t = half * (1.0 + x);
        let theta = t.powf(1.0 / a);
        // f(theta) dtheta/dt, with the t^(shape/a - 1) factor kept in logs
        let ln_w = (shape / a - 1.0) * t.ln() - theta / scale - ln_gamma(shape) - shape * scale.ln() - a.ln();
        pos.push((theta, w * half * ln_w.exp()));
    }
    let mut nodes = Vec::with_capacity(2 * n);
    let mut weights = Vec::with_capacity(2 * n);
    for &(theta, w) in pos.iter().rev() {
        nodes.push(-theta);
        weights.push(0.5 * w);
    }
    for &(theta, w) in &pos {
        nodes.push(theta);
        weights.push(0.5 * w);
    }
    QuadratureRule::normalized(nodes, weights, DEFAULT_TOLERANCE)
}
