//! Gauss–Legendre rules and the discretized measures used for dmu(theta) integrals.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Default number of nodes for a first pass.
pub const DEFAULT_NODES: usize = 201;
/// Relative change between successive doublings regarded as converged.
pub const DEFAULT_TOLERANCE: f64 = 1e-8;
/// Largest rule tried by the doubling loop.
pub const MAX_NODES: usize = DEFAULT_NODES << 5;

type Rule = Arc<(Vec<f64>, Vec<f64>)>;

fn cache() -> &'static Mutex<HashMap<usize, Rule>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Rule>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1], ascending.
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n > 0, "quadrature rule needs at least one node");
    if let Some(rule) = cache().lock().expect("quadrature cache").get(&n) {
        return rule.clone();
    }
    let rule = Arc::new(compute_gauss_legendre(n));
    cache().lock().expect("quadrature cache").insert(n, rule.clone());
    rule
}

fn compute_gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 0..m {
        // Tricomi initial guess for the i-th largest root
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// P_n(x) and its derivative by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// A discrete measure approximating dmu(theta): positive weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub target_tolerance: f64,
}

impl QuadratureRule {
    /// Builds a rule, dropping zero-weight nodes and rescaling the rest to unit mass.
    pub fn normalized(nodes: Vec<f64>, weights: Vec<f64>, target_tolerance: f64) -> Self {
        let total: f64 = weights.iter().sum();
        let (nodes, weights): (Vec<f64>, Vec<f64>) = nodes
            .into_iter()
            .zip(weights)
            .filter(|(t, w)| *w > 0.0 && t.is_finite())
            .map(|(t, w)| (t, w / total))
            .unzip();
        QuadratureRule { nodes, weights, target_tolerance }
    }

    pub fn point(value: f64) -> Self {
        QuadratureRule { nodes: vec![value], weights: vec![1.0], target_tolerance: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&t, &w)| w * f(t)).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Integrates f over [a, b] with an n-point Gauss–Legendre rule.
pub fn integrate_interval(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let rule = gauss_legendre(n);
    let (h, c) = (0.5 * (b - a), 0.5 * (b + a));
    rule.0.iter().zip(&rule.1).map(|(&x, &w)| w * f(c + h * x)).sum::<f64>() * h
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn weights_sum_to_two_and_nodes_sorted() {
        for n in [1, 2, 5, 201, 402] {
            let r = gauss_legendre(n);
            assert_relative_eq!(r.1.iter().sum::<f64>(), 2.0, epsilon = 1e-12);
            assert!(r.0.windows(2).all(|w| w[0] < w[1]));
            assert!(r.1.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn exact_for_polynomials() {
        // n-point rule integrates degree 2n-1 exactly
        let v = integrate_interval(|x| x.powi(9) - 3.0 * x.powi(4) + 1.0, -1.0, 2.0, 5);
        let exact = (2f64.powi(10) - 1.0) / 10.0 - 3.0 * (32.0 + 1.0) / 5.0 + 3.0;
        assert_relative_eq!(v, exact, epsilon = 1e-11);
    }

    #[test]
    fn two_point_nodes() {
        let r = gauss_legendre(2);
        assert_relative_eq!(r.0[1], 1.0 / 3f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(r.1[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn normalized_rule_has_unit_mass() {
        let q = QuadratureRule::normalized(vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 0.0], 1e-8);
        assert_eq!(q.len(), 2);
        assert_relative_eq!(q.integrate(|_| 1.0), 1.0);
    }
}
