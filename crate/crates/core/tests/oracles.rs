//! Monte-Carlo and simulation oracles. Each test draws directly from the
//! model with its own sampler and compares with the library's closed forms
//! or estimators.

use pubsel::correct::{
    bias_coverage_curves, bonferroni_interval, posterior_density, quantile_unbiased, truncated_cdf, PosteriorMode,
};
use pubsel::estimate::{fit_mle, Clustering, FitOptions};
use pubsel::gmm::{gmm_point_estimate, s_statistic, MomentSystem};
use pubsel::likelihood::PreparedData;
use pubsel::normal;
use pubsel::simulate::{
    replication_probability, simulate, symmetry_diagnostic, z_density_diagnostics, ReplicationRule, SigmaDist,
    SimConfig, SimTarget,
};
use pubsel::{
    marginal_latent_density, EffectDistribution, ModelKind, ModelSpec, SelectionFunction, StudyRecord,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn z(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn mean_se(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for x in v {
        n += 1.0;
        s += x;
        s2 += x * x;
    }
    let m = s / n;
    (m, ((s2 / n - m * m) / (n - 1.0)).max(0.0).sqrt())
}

fn fig1() -> SelectionFunction {
    SelectionFunction::two_sided(1.96, 0.1).unwrap()
}

fn p_fig1(z: f64) -> f64 {
    if z.abs() < 1.96 {
        0.1
    } else {
        1.0
    }
}

fn published(mu: EffectDistribution, p: SelectionFunction, sigma: SigmaDist, rep: Option<f64>, n: u64, seed: u64) -> Vec<StudyRecord> {
    let mut cfg = SimConfig::new(mu, p, sigma, SimTarget::Published(n), seed);
    if let Some(r) = rep {
        cfg = cfg.with_replication(ReplicationRule::Fixed { ratio: r });
    }
    simulate(&cfg).unwrap().iter().map(|r| r.to_study()).collect()
}

#[test]
fn publication_probability_matches_bernoulli_frequency() {
    let p = fig1();
    let mut r = rng(1);
    let n = 10_000_000;
    let (m, se) = mean_se((0..n).map(|_| {
        let zs = z(&mut r);
        (r.random::<f64>() < p_fig1(zs)) as u8 as f64
    }));
    let e = p.expected_pub_prob(0.0, 1.0);
    assert!((e - m).abs() < 3.0 * se, "{e} vs {m} +/- {se}");
    assert!((e - 0.145).abs() < 5e-4);
    assert!((p.expected_pub_prob(10.0, 1.0) - 1.0).abs() < 1e-6);
}

#[test]
fn latent_density_matches_kernel_average() {
    let mu = EffectDistribution::gamma_abs(1.0, 2.0).unwrap();
    let g = Gamma::new(1.0, 2.0).unwrap();
    let mut r = rng(2);
    let (m, se) = mean_se((0..10_000_000).map(|_| {
        let t: f64 = g.sample(&mut r);
        let t = if r.random::<bool>() { t } else { -t };
        normal::pdf(1.0 - t)
    }));
    let d = marginal_latent_density(&mu, 1.0, 1.0).unwrap();
    assert!((d - m).abs() < 3.0 * se, "{d} vs {m} +/- {se}");
}

#[test]
fn truncated_cdf_matches_rejection_sampling() {
    let p = fig1();
    let mut r = rng(3);
    let (mut kept, mut below) = (0u64, 0u64);
    while kept < 10_000_000 {
        let x = 1.0 + z(&mut r);
        if r.random::<f64>() < p_fig1(x) {
            kept += 1;
            below += (x <= 2.0) as u64;
        }
    }
    let oracle = below as f64 / kept as f64;
    let f = truncated_cdf(2.0, 1.0, 1.0, &p).unwrap();
    assert!((f - oracle).abs() < 1e-3, "{f} vs {oracle}");
}

#[test]
fn median_unbiased_estimate_matches_simulated_median() {
    let p = fig1();
    let est = quantile_unbiased(2.2, 1.0, &p, 0.5).unwrap();
    assert!(est < 2.2);

    // common random numbers: theta is found where the median published draw is 2.2
    let n = 4_000_000;
    let mut r = rng(4);
    let draws: Vec<(f64, f64)> = (0..n).map(|_| (z(&mut r), r.random::<f64>())).collect();
    let median_at = |theta: f64| {
        let mut kept: Vec<f64> =
            draws.iter().map(|&(e, _)| theta + e).zip(&draws).filter(|(x, (_, u))| *u < p_fig1(*x)).map(|(x, _)| x).collect();
        let k = kept.len() / 2;
        *kept.select_nth_unstable_by(k, f64::total_cmp).1
    };
    let (mut lo, mut hi) = (-3.0, 2.2);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if median_at(mid) < 2.2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let oracle = 0.5 * (lo + hi);
    assert!((est - oracle).abs() < 1e-2, "{est} vs {oracle}");
}

#[test]
fn average_log_density_matches_cross_entropy() {
    let mu = EffectDistribution::gamma_abs(1.0, 0.5).unwrap();
    let p = SelectionFunction::two_sided(1.96, 0.2).unwrap();
    let spec = ModelSpec::new(ModelKind::MetaStudy, p.clone(), mu.clone());
    let data = published(mu, p, SigmaDist::Discrete { values: vec![0.5, 1.0], weights: vec![1.0, 1.0] }, None, 1_000_000, 5);
    let ll = PreparedData::new(&data, ModelKind::MetaStudy, &spec.selection).unwrap().per_record(&spec).unwrap();

    for sigma in [0.5, 1.0] {
        let (m, se) = mean_se(data.iter().zip(&ll).filter(|(r, _)| r.sigma == sigma).map(|(_, &l)| l));
        // integral of f log f, piecewise Simpson between the selection jumps
        let c = 1.96 * sigma;
        let pieces = [(-12.0 * sigma - 6.0, -c), (-c, c), (c, 12.0 * sigma + 6.0)];
        let (mut mass, mut ent) = (0.0, 0.0);
        for (a, b) in pieces {
            let k = 20_000;
            let h = (b - a) / k as f64;
            let xs: Vec<f64> = (0..=k).map(|i| (a + h * i as f64).clamp(a + 1e-12, b - 1e-12)).collect();
            let recs: Vec<StudyRecord> = xs.iter().map(|&x| StudyRecord::new("g", x, sigma)).collect();
            let lf = PreparedData::new(&recs, ModelKind::MetaStudy, &spec.selection).unwrap().per_record(&spec).unwrap();
            for (i, l) in lf.iter().enumerate() {
                let w = if i == 0 || i == k { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 } * h / 3.0;
                mass += w * l.exp();
                ent += w * l.exp() * l;
            }
        }
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        assert!((m - ent).abs() < 3.0 * se, "sigma {sigma}: {m} vs {ent} +/- {se}");
    }
}

#[test]
fn duplicated_records_scale_standard_errors() {
    let data = published(
        EffectDistribution::gamma_abs(1.0, 1.0).unwrap(),
        SelectionFunction::two_sided(1.96, 0.2).unwrap(),
        SigmaDist::Fixed { value: 1.0 },
        Some(1.0),
        400,
        6,
    );
    let data: Vec<StudyRecord> = data.into_iter().enumerate().map(|(i, r)| r.with_cluster(format!("c{i}"))).collect();
    let twice: Vec<StudyRecord> = data.iter().chain(&data).cloned().collect();
    let template = ModelSpec::new(
        ModelKind::Replication,
        SelectionFunction::two_sided(1.96, 1.0).unwrap(),
        EffectDistribution::gamma_abs(1.0, 1.0).unwrap(),
    );
    let se = |d: &[StudyRecord], clustering| {
        let options = FitOptions { clustering, start: Some(vec![1.0, 1.0, 0.2]), ..FitOptions::default() };
        fit_mle(d, &template, &options).unwrap().standard_errors()
    };
    let (once, dup) = (se(&data, Clustering::Robust), se(&twice, Clustering::Robust));
    for (a, b) in once.iter().zip(&dup) {
        assert!((a / b - 2f64.sqrt()).abs() < 1e-3, "{a} {b}");
    }
    let (once, dup) = (se(&data, Clustering::Cluster), se(&twice, Clustering::Cluster));
    for (a, b) in once.iter().zip(&dup) {
        assert!((a / b - 1.0).abs() < 1e-3, "{a} {b}");
    }
}

#[test]
fn share_of_insignificant_results_matches_closed_form() {
    let data = published(EffectDistribution::normal(1.0, 1.0).unwrap(), fig1(), SigmaDist::Fixed { value: 1.0 }, None, 1_000_000, 7);
    let (m, se) = mean_se(data.iter().map(|r| ((r.x / r.sigma).abs() <= 1.96) as u8 as f64));
    // latent Z ~ N(1, 2)
    let s = 2f64.sqrt();
    let q = normal::cdf((1.96 - 1.0) / s) - normal::cdf((-1.96 - 1.0) / s);
    let oracle = 0.1 * q / (0.1 * q + 1.0 - q);
    assert!((m - oracle).abs() < 3.0 * se, "{m} +/- {se} vs {oracle}");
}

#[test]
fn replication_probability_matches_simulation() {
    let mu = EffectDistribution::normal(1.0, 1.0).unwrap();
    let v = replication_probability(&mu, 1.96).unwrap();
    let mut r = rng(8);
    let (mut sig, mut rep) = (0u64, 0u64);
    for _ in 0..10_000_000 {
        let t = 1.0 + z(&mut r);
        let (a, b) = (t + z(&mut r), t + z(&mut r));
        if a.abs() > 1.96 {
            sig += 1;
            rep += (b.abs() > 1.96 && a.signum() == b.signum()) as u64;
        }
    }
    let m = rep as f64 / sig as f64;
    let se = (m * (1.0 - m) / sig as f64).sqrt();
    assert!((v - m).abs() < 3.0 * se, "{v} vs {m} +/- {se}");
}

#[test]
fn symmetry_diagnostic_separates_selection_from_none() {
    let edges = [-4.0, -1.96, 0.0, 1.96, 4.0];
    let mu = EffectDistribution::gamma_abs(0.5, 1.5).unwrap();
    let none = published(mu.clone(), SelectionFunction::constant(), SigmaDist::Fixed { value: 1.0 }, Some(1.0), 100_000, 9);
    let d = symmetry_diagnostic(&none, &edges, 1, 500).unwrap();
    assert!(d.max_abs_residual < 3.0 * d.max_residual_se, "{} {}", d.max_abs_residual, d.max_residual_se);

    let strong = published(mu, fig1(), SigmaDist::Fixed { value: 1.0 }, Some(1.0), 100_000, 10);
    let d = symmetry_diagnostic(&strong, &edges, 1, 500).unwrap();
    let across = d.pairs.iter().find(|q| q.a == 2 && q.b == 3).unwrap();
    assert!(across.h > 3.0 * across.se, "{across:?}");
}

#[test]
fn density_jump_at_cutoff_matches_selection_ratio() {
    let data = published(EffectDistribution::normal(1.0, 1.0).unwrap(), fig1(), SigmaDist::Fixed { value: 1.0 }, None, 1_000_000, 11);
    let d = z_density_diagnostics(&data, &[1.96], None, 0.05).unwrap();
    let ratio = d.jumps[0].ratio;
    assert!((ratio / 10.0 - 1.0).abs() < 0.3, "{ratio}");
}

#[test]
fn gmm_recovers_publication_probability() {
    let data = published(
        EffectDistribution::gamma_abs(0.5, 1.5).unwrap(),
        fig1(),
        SigmaDist::Fixed { value: 1.0 },
        Some(1.0),
        100_000,
        12,
    );
    let system = MomentSystem::replication_baseline(SelectionFunction::two_sided(1.96, 1.0).unwrap());
    let est = gmm_point_estimate(&data, &system).unwrap();
    let se = est.standard_errors()[0];
    assert!((est.beta_hat[0] - 0.1).abs() < 3.0 * se, "{} ({se})", est.beta_hat[0]);
}

#[test]
fn robust_set_includes_truth_at_nominal_rate() {
    let system = MomentSystem::replication_baseline(SelectionFunction::two_sided(1.96, 1.0).unwrap());
    let crit = ChiSquared::new(1.0).unwrap().inverse_cdf(0.95);
    let mu = EffectDistribution::gamma_abs(0.5, 1.5).unwrap();
    let hits = (0..1000u64)
        .filter(|&c| {
            let data = published(mu.clone(), fig1(), SigmaDist::Fixed { value: 1.0 }, Some(1.0), 2000, 30_000 + c);
            s_statistic(&data, &system, &[0.1]).unwrap() <= crit
        })
        .count();
    let rate = hits as f64 / 1000.0;
    assert!((0.94..=0.96).contains(&rate), "{rate}");
}

#[test]
fn conventional_curves_match_rejection_sampling() {
    let p = fig1();
    let grid: Vec<f64> = (0..=12).map(|i| 0.5 * i as f64).collect();
    let rows = bias_coverage_curves(&p, 1.0, &grid).unwrap();
    let mut r = rng(13);
    for row in &rows {
        let mut kept = Vec::with_capacity(1_000_000);
        while kept.len() < 1_000_000 {
            let x = row.theta + z(&mut r);
            if r.random::<f64>() < p_fig1(x) {
                kept.push(x);
            }
        }
        let cover = kept.iter().filter(|&&x| (x - row.theta).abs() <= 1.959963984540054).count() as f64 / kept.len() as f64;
        let k = kept.len() / 2;
        let median = *kept.select_nth_unstable_by(k, f64::total_cmp).1;
        assert!((cover - row.coverage_conventional).abs() < 0.005, "{row:?} vs {cover}");
        assert!((median - row.theta - row.median_bias_conventional).abs() < 0.005, "{row:?} vs {median}");
    }
    // undercoverage near zero, overcoverage at moderate effects
    assert!(rows[0].coverage_conventional < 0.95);
    assert!(rows.iter().any(|r| r.coverage_conventional > 0.95));
}

#[test]
fn posterior_means_match_importance_sampling() {
    let p = fig1();
    let prior = EffectDistribution::normal(1.0, 1.0).unwrap();
    let x = 2.2;
    let unrelated = posterior_density(x, 1.0, &p, &prior, PosteriorMode::UnrelatedParameters, None).unwrap().mean;
    let common = posterior_density(x, 1.0, &p, &prior, PosteriorMode::CommonParameters, None).unwrap().mean;
    assert!(common < unrelated);

    let mut r = rng(14);
    let thetas: Vec<f64> = (0..1_000_000).map(|_| 1.0 + z(&mut r)).collect();
    let pub_prob = |t: f64| 0.1 * (normal::cdf(1.96 - t) - normal::cdf(-1.96 - t)) + normal::cdf(-1.96 - t) + normal::cdf(t - 1.96);
    for (target, common_mode) in [(unrelated, false), (common, true)] {
        let w: Vec<f64> =
            thetas.iter().map(|&t| normal::pdf(x - t) / if common_mode { pub_prob(t) } else { 1.0 }).collect();
        let sw: f64 = w.iter().sum();
        let est = thetas.iter().zip(&w).map(|(t, w)| t * w).sum::<f64>() / sw;
        // delta-method SE of the self-normalized estimator
        let var = thetas.iter().zip(&w).map(|(t, w)| (w * (t - est)).powi(2)).sum::<f64>() / (sw * sw);
        assert!((target - est).abs() < 3.0 * var.sqrt(), "{target} vs {est} +/- {}", var.sqrt());
    }
}

#[test]
fn bonferroni_interval_covers_in_two_stage_experiment() {
    // meta-study with normal effects: closed-form likelihood keeps 2,000 fits cheap
    let mu = EffectDistribution::normal(1.0, 1.0).unwrap();
    let p = fig1();
    let sigmas = SigmaDist::Discrete { values: vec![0.5, 1.0, 2.0], weights: vec![1.0, 1.0, 1.0] };
    let template = ModelSpec::new(
        ModelKind::MetaStudy,
        SelectionFunction::two_sided(1.96, 1.0).unwrap(),
        EffectDistribution::normal(0.0, 1.0).unwrap(),
    );
    let options = FitOptions { n_starts: 3, start: Some(vec![1.0, 1.0, 0.1]), ..FitOptions::default() };
    let reps = 2000u64;
    let mut covered = 0;
    for rep in 0..reps {
        let mut cfg = SimConfig::new(mu.clone(), p.clone(), sigmas.clone(), SimTarget::Published(501), 40_000 + rep);
        cfg.emit_latent = true;
        let sims: Vec<_> = simulate(&cfg).unwrap().into_iter().filter(|s| s.published).collect();
        let (fresh, corpus) = sims.split_last().unwrap();
        let data: Vec<StudyRecord> = corpus.iter().map(|s| s.to_study()).collect();
        let fit = fit_mle(&data, &template, &options).unwrap();
        let ci = bonferroni_interval(fresh.x, fresh.sigma, &fit, 0.05, 0.005).unwrap();
        covered += (ci.bonf_lower.unwrap() <= fresh.theta && fresh.theta <= ci.bonf_upper.unwrap()) as u64;
    }
    let rate = covered as f64 / reps as f64;
    assert!(rate >= 0.95, "{rate}");
}
