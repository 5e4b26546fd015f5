use proptest::prelude::*;

use pubsel::correct::{
    conditional_quantile_unbiased, corrected_interval, quantile_unbiased, truncated_cdf, TwoSignalSelection,
};
use pubsel::gmm::{replication_kernel, sample_moments, MomentSystem, ReplicationBound};
use pubsel::likelihood::{loglik, PreparedData};
use pubsel::normal;
use pubsel::{marginal_latent_density, CellPartition, EffectDistribution, ModelKind, ModelSpec, SelectionFunction, StudyRecord};

fn fig1() -> SelectionFunction {
    SelectionFunction::new(vec![1.96], vec![0.1, 1.0], 1, true).unwrap()
}

fn effect() -> impl Strategy<Value = EffectDistribution> {
    prop_oneof![
        (0.2..3.0f64, 0.2..3.0f64).prop_map(|(k, l)| EffectDistribution::gamma_abs(k, l).unwrap()),
        (-2.0..2.0f64, 0.1..2.0f64, 1.0..30.0f64).prop_map(|(m, s, df)| EffectDistribution::t_location_scale(m, s, df).unwrap()),
        (-2.0..2.0f64, 0.05..2.0f64).prop_map(|(m, s)| EffectDistribution::normal(m, s).unwrap()),
        (-3.0..3.0f64).prop_map(|v| EffectDistribution::point_mass(v).unwrap()),
        (0.1..0.9f64, -2.0..2.0f64, -2.0..2.0f64)
            .prop_map(|(w, a, b)| EffectDistribution::finite_mixture(vec![w, 1.0 - w], vec![a, b]).unwrap()),
    ]
}

fn symmetric_effect() -> impl Strategy<Value = EffectDistribution> {
    prop_oneof![
        (0.2..3.0f64, 0.2..3.0f64).prop_map(|(k, l)| EffectDistribution::gamma_abs(k, l).unwrap()),
        (0.1..2.0f64, 1.0..30.0f64).prop_map(|(s, df)| EffectDistribution::t_location_scale(0.0, s, df).unwrap()),
        (0.05..2.0f64).prop_map(|s| EffectDistribution::normal(0.0, s).unwrap()),
    ]
}

/// Symmetric step function with cutoffs at 1.0 and 1.96 and reference cell 2.
fn selection() -> impl Strategy<Value = SelectionFunction> {
    (0.01..1.5f64, 0.01..1.5f64)
        .prop_map(|(a, b)| SelectionFunction::new(vec![1.0, 1.96], vec![a, b, 1.0], 2, true).unwrap())
}

fn meta_records(xs: &[(f64, f64)]) -> Vec<StudyRecord> {
    xs.iter().enumerate().map(|(i, &(x, s))| StudyRecord::new(i.to_string(), x, s)).collect()
}

fn rep_records(xs: &[(f64, f64)], s: f64) -> Vec<StudyRecord> {
    xs.iter()
        .enumerate()
        .map(|(i, &(z, zr))| StudyRecord::new(i.to_string(), z, 1.0).with_replication(zr, s))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn expected_pub_prob_scales_and_is_bounded(p in selection(), theta in -8.0..8.0f64, sigma in 0.1..5.0f64, c in 0.01..50.0f64) {
        let e = p.expected_pub_prob(theta, sigma);
        prop_assert!(e >= p.min_coefficient() - 1e-15 && e <= p.max_coefficient() + 1e-15);
        let scaled = SelectionFunction::unnormalized(p.cutoffs().to_vec(), p.coefficients().iter().map(|b| b * c).collect(), true).unwrap();
        prop_assert!((scaled.expected_pub_prob(theta, sigma) - c * e).abs() <= 1e-13 * c.max(1.0));
    }

    #[test]
    fn likelihoods_are_scale_invariant(
        p in selection(),
        mu in effect(),
        c in 0.05..20.0f64,
        xs in prop::collection::vec((-5.0..5.0f64, 0.2..3.0f64), 5..15),
    ) {
        let q = SelectionFunction::unnormalized(
            p.cutoffs().to_vec(), p.coefficients().iter().map(|b| b * c).collect(), true).unwrap();
        let meta = meta_records(&xs);
        let a = loglik(&meta, &ModelSpec::new(ModelKind::MetaStudy, p.clone(), mu.clone())).unwrap();
        let b = loglik(&meta, &ModelSpec::new(ModelKind::MetaStudy, q.clone(), mu.clone())).unwrap();
        prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        let rep = rep_records(&xs, 1.3);
        let a = loglik(&rep, &ModelSpec::new(ModelKind::Replication, p, mu.clone())).unwrap();
        let b = loglik(&rep, &ModelSpec::new(ModelKind::Replication, q, mu)).unwrap();
        prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn latent_density_is_bounded_by_standard_normal_peak(mu in effect(), z in -10.0..10.0f64, sigma in 0.1..5.0f64) {
        let f = marginal_latent_density(&mu, z, sigma).unwrap();
        prop_assert!(f >= 0.0 && f <= normal::pdf(0.0) + 1e-12);
    }

    #[test]
    fn folding_adds_log_two(
        p in selection(),
        mu in symmetric_effect(),
        xs in prop::collection::vec((-5.0..5.0f64, 0.2..3.0f64), 1..8),
    ) {
        let spec = ModelSpec::new(ModelKind::MetaStudy, p, mu);
        let data = meta_records(&xs);
        let folded: Vec<StudyRecord> = data.iter().map(|r| {
            let mut f = r.clone();
            f.x = f.x.abs();
            f.sign_normalized(true)
        }).collect();
        let a = loglik(&data, &spec).unwrap();
        let b = loglik(&folded, &spec).unwrap();
        prop_assert!((b - a - xs.len() as f64 * 2f64.ln()).abs() < 1e-9, "{a} {b}");
    }

    #[test]
    fn replication_swap_symmetry_without_selection(mu in effect(), z in -5.0..5.0f64, zr in -5.0..5.0f64) {
        let spec = ModelSpec::new(ModelKind::Replication, SelectionFunction::constant(), mu);
        let a = loglik(&rep_records(&[(z, zr)], 1.0), &spec).unwrap();
        let b = loglik(&rep_records(&[(zr, z)], 1.0), &spec).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn truncated_cdf_decreases_in_theta(x in -5.0..5.0f64, t1 in -4.0..4.0f64, gap in 0.01..2.0f64, sigma in 0.5..2.0f64) {
        // beyond ~8 SDs both values round to 0 or 1
        prop_assume!((x - t1).abs() / sigma < 7.0 && (x - t1 - gap).abs() / sigma < 7.0);
        let p = fig1();
        let a = truncated_cdf(x, t1, sigma, &p).unwrap();
        let b = truncated_cdf(x, t1 + gap, sigma, &p).unwrap();
        prop_assert!(a > b, "F({x}|{t1}) = {a}, F({x}|{}) = {b}", t1 + gap);
    }

    #[test]
    fn quantile_orientation(x in -5.0..5.0f64, dx in 0.01..1.0f64, a1 in 0.02..0.9f64, da in 0.01..0.08f64) {
        let p = fig1();
        let q = quantile_unbiased(x, 1.0, &p, a1).unwrap();
        prop_assert!(quantile_unbiased(x, 1.0, &p, a1 + da).unwrap() < q);
        prop_assert!(quantile_unbiased(x + dx, 1.0, &p, a1).unwrap() > q);
    }

    #[test]
    fn conditional_correction_nests_univariate(g in -6.0..6.0f64, l in -6.0..6.0f64, v11 in 0.5..4.0f64, rho in -0.8..0.8f64, inner in 0.02..1.0f64) {
        let v22 = 2.0;
        let cov = rho * (v11 * v22).sqrt();
        let sigma = [[v11, cov], [cov, v22]];
        let flat = CellPartition::new(vec![], false).unwrap();
        let p2 = TwoSignalSelection::new(CellPartition::new(vec![1.96], true).unwrap(), flat, vec![vec![inner], vec![1.0]]).unwrap();
        let a = conditional_quantile_unbiased([g, l], sigma, [1.0, 0.0], &p2, 0.5).unwrap();
        let uni = SelectionFunction::two_sided(1.96, inner).unwrap();
        let b = quantile_unbiased(g, v11.sqrt(), &uni, 0.5).unwrap();
        prop_assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn replication_kernel_is_antisymmetric(z in -6.0..6.0f64, zr in -6.0..6.0f64, c1 in 0.5..3.0f64, c2 in 0.5..3.0f64, smax in 1.0..3.0f64) {
        for bound in [ReplicationBound::MinusC1, ReplicationBound::MinusC2] {
            let a = replication_kernel(z, zr, 1.0, c1, c2, smax, bound);
            let b = replication_kernel(zr, z, 1.0, c1, c2, smax, bound);
            prop_assert_eq!(a, -b);
        }
    }

    #[test]
    fn pairwise_moments_ignore_record_order(
        xs in prop::collection::vec((-4.0..4.0f64, 0.3..3.0f64), 6..20),
        beta in 0.05..3.0f64,
        perm_seed in any::<u64>(),
    ) {
        let data = meta_records(&xs);
        let sys = MomentSystem::metastudy_pairwise(SelectionFunction::new(vec![1.96], vec![1.0, 1.0], 1, true).unwrap());
        let a = sample_moments(&data, &sys, &[beta]).unwrap();
        let mut shuffled = data.clone();
        let mut s = perm_seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let b = sample_moments(&shuffled, &sys, &[beta]).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0), "{u} vs {v}");
        }
    }
}

#[test]
fn latent_density_integrates_to_one() {
    let mus = [
        EffectDistribution::gamma_abs(1.0, 2.0).unwrap(),
        EffectDistribution::gamma_abs(0.4, 0.5).unwrap(),
        EffectDistribution::t_location_scale(0.5, 1.0, 10.0).unwrap(),
        EffectDistribution::normal(-1.0, 0.7).unwrap(),
        EffectDistribution::point_mass(2.0).unwrap(),
        EffectDistribution::finite_mixture(vec![0.3, 0.7], vec![-1.0, 4.0]).unwrap(),
    ];
    let h = 0.01;
    for mu in &mus {
        // every atom of mass stays inside |z| < 40
        for sigma in [1.0, 3.0] {
            let n = (80.0 / h) as usize;
            let f: Vec<f64> = (0..=n).map(|i| marginal_latent_density(mu, -40.0 + h * i as f64, sigma).unwrap()).collect();
            let total = h * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[n]));
            assert!((total - 1.0).abs() < 1e-6, "{} sigma {sigma}: {total}", mu.family());
        }
    }
}

/// Composite Simpson on [a, b] with an even number of panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Integrates a step-discontinuous function cell by cell, nudging endpoints inside.
fn piecewise(f: impl Fn(f64) -> f64, breaks: &[f64], lo: f64, hi: f64, per_unit: usize) -> f64 {
    let mut pts = vec![lo];
    pts.extend(breaks.iter().copied().filter(|b| *b > lo && *b < hi));
    pts.push(hi);
    let eps = 1e-12;
    pts.windows(2)
        .map(|w| {
            let n = (((w[1] - w[0]) * per_unit as f64).ceil() as usize).max(2) * 2;
            simpson(&f, w[0] + eps, w[1] - eps, n)
        })
        .sum()
}

#[test]
fn meta_density_integrates_to_one() {
    let p = SelectionFunction::new(vec![-1.96, 0.0, 1.96], vec![0.3, 0.05, 0.5, 1.0], 3, false).unwrap();
    for mu in [
        EffectDistribution::normal(0.3, 0.8).unwrap(),
        EffectDistribution::gamma_abs(0.7, 1.5).unwrap(),
        EffectDistribution::t_location_scale(0.2, 0.6, 4.0).unwrap(),
    ] {
        let spec = ModelSpec::new(ModelKind::MetaStudy, p.clone(), mu);
        for sigma in [0.4, 1.0, 2.5] {
            let breaks: Vec<f64> = p.cutoffs().iter().map(|c| c * sigma).collect();
            let f = |x: f64| loglik(&[StudyRecord::new("a", x, sigma)], &spec).unwrap().exp();
            let total = piecewise(f, &breaks, -60.0, 60.0, 40);
            assert!((total - 1.0).abs() < 1e-5, "sigma {sigma}: {total}");
        }
    }
}

#[test]
fn replication_density_integrates_to_one() {
    let p = SelectionFunction::new(vec![1.645, 1.96], vec![0.05, 0.4, 1.0], 2, true).unwrap();
    let spec = ModelSpec::new(ModelKind::Replication, p.clone(), EffectDistribution::gamma_abs(0.8, 1.2).unwrap());
    let s = 1.5;
    let m = 800;
    let zr: Vec<f64> = (0..=m).map(|i| -40.0 + 80.0 * i as f64 / m as f64).collect();
    let inner = |z: f64| {
        let data: Vec<StudyRecord> = zr.iter().map(|&v| StudyRecord::new("a", z, 1.0).with_replication(v, s)).collect();
        let prepared = PreparedData::new(&data, ModelKind::Replication, &spec.selection).unwrap();
        let f: Vec<f64> = prepared.per_record(&spec).unwrap().iter().map(|l| l.exp()).collect();
        let h = 80.0 / m as f64;
        h / 3.0 * f.iter().enumerate().map(|(i, v)| v * if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 }).sum::<f64>()
    };
    let breaks = [-1.96, -1.645, 1.645, 1.96];
    let total = piecewise(inner, &breaks, -40.0, 40.0, 10);
    assert!((total - 1.0).abs() < 1e-5, "{total}");
}

#[test]
fn replication_swap_breaks_under_selection() {
    let spec = ModelSpec::new(ModelKind::Replication, fig1(), EffectDistribution::gamma_abs(1.0, 1.0).unwrap());
    let a = loglik(&rep_records(&[(0.5, 2.5)], 1.0), &spec).unwrap();
    let b = loglik(&rep_records(&[(2.5, 0.5)], 1.0), &spec).unwrap();
    assert!((a - b).abs() > 0.1);
}

/// Conservative test of theta = 0 when only |z| > 1.96 is published:
/// reject when P(|Z| >= |z| given |Z| > 1.96) < 0.05.
fn conservative_test_rejects(z: f64) -> bool {
    let tail = 2.0 * normal::sf(z.abs());
    let published = 2.0 * normal::sf(1.96);
    tail / published < 0.05
}

#[test]
fn equal_tailed_interval_agrees_with_conservative_test() {
    let p = SelectionFunction::new(vec![1.96], vec![1e-6, 1.0], 1, true).unwrap();
    let crit = normal::quantile(1.0 - 0.05 * 0.05 / 2.0);
    let mut checked = 0;
    for i in 0..=300 {
        let z = 1.97 + 0.01 * i as f64;
        if (z - crit).abs() < 2e-3 {
            continue;
        }
        for x in [z, -z] {
            let ci = corrected_interval(x, 1.0, &p, 0.05).unwrap();
            let covers = ci.ci_lower <= 0.0 && 0.0 <= ci.ci_upper;
            assert_eq!(covers, !conservative_test_rejects(x), "x = {x}: [{}, {}]", ci.ci_lower, ci.ci_upper);
            checked += 1;
        }
    }
    assert!(checked > 500);
}
