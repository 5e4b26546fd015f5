//! Minimization helpers: simplex search followed by a quasi-Newton polish,
//! plus central-difference derivatives.

use argmin::core::{CostFunction, Error as ArgminError, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::neldermead::NelderMead;
use argmin::solver::quasinewton::BFGS;

/// Relative step used by every central difference.
pub const FD_STEP: f64 = 1e-5;

pub fn fd_step(x: f64) -> f64 {
    FD_STEP * x.abs().max(1.0)
}

struct Problem<'a, F: Fn(&[f64]) -> f64> {
    f: &'a F,
}

impl<F: Fn(&[f64]) -> f64> CostFunction for Problem<'_, F> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Vec<f64>) -> Result<f64, ArgminError> {
        let v = (self.f)(p);
        Ok(if v.is_nan() { f64::INFINITY } else { v })
    }
}

impl<F: Fn(&[f64]) -> f64> Gradient for Problem<'_, F> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, p: &Vec<f64>) -> Result<Vec<f64>, ArgminError> {
        let g = gradient(self.f, p);
        if g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(argmin::core::ArgminError::NotImplemented { text: "non-finite gradient".into() }.into())
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: u64,
}

/// Central-difference gradient.
pub fn gradient(f: &impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i]);
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Second differences amplify roundoff by h^-2, so they use a wider step
/// than first differences (about eps^(1/4)).
pub const HESSIAN_STEP: f64 = 1e-4;

/// Central-difference Hessian (symmetric by construction).
pub fn hessian(f: &impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<Vec<f64>> {
    let n = x.len();
    let f0 = f(x);
    let h: Vec<f64> = x.iter().map(|&v| HESSIAN_STEP * v.abs().max(1.0)).collect();
    let mut out = vec![vec![0.0; n]; n];
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let up = f(&xp);
        xp[i] = x[i] - h[i];
        let dn = f(&xp);
        xp[i] = x[i];
        out[i][i] = (up - 2.0 * f0 + dn) / (h[i] * h[i]);
        for j in 0..i {
            let mut at = |si: f64, sj: f64| {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h[i] * h[j]);
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    out
}

/// Nelder–Mead from `x0` with initial edge `step`, then BFGS from the simplex optimum.
pub fn minimize(f: &impl Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_iters: u64) -> Minimum {
    let n = x0.len();
    let mut best = Minimum { x: x0.to_vec(), value: f(x0), evaluations: 1 };
    if n == 0 {
        return best;
    }
    let mut simplex = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let nm = NelderMead::new(simplex).with_sd_tolerance(1e-12).expect("valid tolerance");
    if let Ok(res) = Executor::new(Problem { f }, nm).configure(|s| s.max_iters(max_iters)).run() {
        let st = res.state();
        best.evaluations += st.get_func_counts().values().sum::<u64>();
        if let Some(p) = st.get_best_param() {
            if st.get_best_cost() < best.value {
                best.x = p.clone();
                best.value = st.get_best_cost();
            }
        }
    }
    polish(f, &mut best, max_iters);
    best
}

fn polish(f: &impl Fn(&[f64]) -> f64, best: &mut Minimum, max_iters: u64) {
    let n = best.x.len();
    let ident: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let solver = BFGS::new(MoreThuenteLineSearch::new())
        .with_tolerance_grad(1e-9)
        .expect("valid tolerance")
        .with_tolerance_cost(1e-15)
        .expect("valid tolerance");
    let x0 = best.x.clone();
    let run = Executor::new(Problem { f }, solver)
        .configure(|s| s.param(x0).inv_hessian(ident).max_iters(max_iters.min(500)))
        .run();
    if let Ok(res) = run {
        let st = res.state();
        best.evaluations += st.get_func_counts().values().sum::<u64>();
        if let Some(p) = st.get_best_param() {
            let v = f(p);
            if v.is_finite() && v <= best.value {
                best.x = p.clone();
                best.value = v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = minimize(&f, &[-1.2, 1.0], 0.5, 2000);
        assert_relative_eq!(m.x[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(m.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn infinite_region_is_avoided() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::INFINITY } else { (x[0] - 2.0).powi(2) + x[1] * x[1] };
        let m = minimize(&f, &[0.5, 0.5], 0.5, 2000);
        assert_relative_eq!(m.x[0], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn derivatives_of_quadratic() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] + 2.0 * x[0] * x[1] + x[1] * x[1];
        let g = gradient(&f, &[1.0, 2.0]);
        assert_relative_eq!(g[0], 10.0, epsilon = 1e-6);
        assert_relative_eq!(g[1], 6.0, epsilon = 1e-6);
        let h = hessian(&f, &[1.0, 2.0]);
        assert_relative_eq!(h[0][0], 6.0, epsilon = 1e-4);
        assert_relative_eq!(h[0][1], 2.0, epsilon = 1e-4);
        assert_relative_eq!(h[1][1], 2.0, epsilon = 1e-4);
    }
}
