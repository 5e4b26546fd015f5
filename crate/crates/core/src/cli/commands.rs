use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{self, num, opt_num, read_studies, Table};
use super::*;
use crate::correct::{bias_coverage_curves, bonferroni_interval_for, correct_studies, CorrectedInference};
use crate::estimate::{
    fit_mle, meta_regression, score_test_selection_on_theta, BetaTransform, Clustering, FitOptions, MetaRegressionKind,
    ModelFit, ScoreTest,
};
use crate::gmm::{self, GridOptions, MomentSystem, ReplicationBound};
use crate::likelihood::{ModelKind, ModelSpec};
use crate::model::{CellPartition, EffectDistribution, SelectionFunction, StudyRecord};
use crate::normal;
use crate::simulate::{self, symmetry_diagnostic, z_density_diagnostics, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

/// Output of `pubsel fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub parameters: Vec<ParameterRow>,
    #[serde(default)]
    pub score_test: Option<ScoreTest>,
    pub fit: ModelFit,
}

impl FitDocument {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Input(format!("{}: not a fit document: {e}", path.display())))
    }
}

fn clustering(d: &DataArgs) -> Clustering {
    if d.cluster.is_some() {
        Clustering::Cluster
    } else {
        Clustering::Robust
    }
}

fn load(d: &DataArgs, run: &mut Run) -> Result<Vec<StudyRecord>> {
    run.input(&d.data);
    read_studies(&d.data, &d.options())
}

fn normalized_template(cutoffs: &[f64], symmetric: bool, reference: Option<usize>) -> Result<SelectionFunction> {
    let n = CellPartition::new(cutoffs.to_vec(), symmetric)?.n_cells();
    SelectionFunction::new(cutoffs.to_vec(), vec![1.0; n], reference.unwrap_or(n - 1), symmetric)
}

pub(super) fn fit(a: &FitArgs, run: &mut Run) -> Result<i32> {
    let data = load(&a.data, run)?;
    run.seed = Some(a.seed);
    let mut p = normalized_template(&a.cutoffs, a.symmetric, a.reference)?;
    for o in &a.offset {
        let (name, cell) = o
            .rsplit_once(':')
            .and_then(|(n, c)| Some((n, c.parse::<usize>().ok()?)))
            .ok_or_else(|| Error::Input(format!("offset '{o}' is not of the form name:cell")))?;
        p = p.with_offset(name, cell, 0.0)?;
    }
    let effect = match a.effect {
        EffectFamily::Gamma => EffectDistribution::gamma_abs(1.0, 1.0)?,
        EffectFamily::T => EffectDistribution::t_location_scale(0.0, 1.0, 5.0)?,
        EffectFamily::Normal => EffectDistribution::normal(0.0, 1.0)?,
    };
    let kind = match a.kind {
        Kind::Replication => ModelKind::Replication,
        Kind::Metastudy => ModelKind::MetaStudy,
    };
    let options = FitOptions {
        n_starts: a.starts,
        seed: a.seed,
        quadrature_nodes: a.nodes,
        beta_transform: match a.beta_transform {
            Transform::Log => BetaTransform::Log,
            Transform::Identity => BetaTransform::Identity,
        },
        clustering: clustering(&a.data),
        max_iters: a.max_iters,
        start: None,
    };
    let fit = fit_mle(&data, &ModelSpec::new(kind, p, effect), &options)?;
    let score_test = if a.score_test { Some(score_test_selection_on_theta(&data, &fit)?) } else { None };
    let parameters = fit
        .param_names
        .iter()
        .zip(&fit.theta_hat)
        .zip(fit.standard_errors())
        .map(|((name, &estimate), std_error)| ParameterRow { name: name.clone(), estimate, std_error })
        .collect();
    let converged = fit.converged;
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    let doc = FitDocument { parameters, score_test, fit };
    run.write(&a.out, &serde_json::to_vec_pretty(&doc)?)?;
    if converged {
        Ok(0)
    } else {
        eprintln!("error: optimizer did not converge; estimates written for inspection");
        Ok(2)
    }
}

/// Selection function from a fit document or from explicit coefficients.
fn resolve_selection(s: &SelectionArgs, run: &mut Run) -> Result<(SelectionFunction, Option<ModelFit>)> {
    if let Some(path) = &s.fit {
        run.input(path);
        let doc = FitDocument::read(path)?;
        return Ok((doc.fit.spec.selection.clone(), Some(doc.fit)));
    }
    match &s.coefficients {
        Some(c) => Ok((SelectionFunction::unnormalized(s.cutoffs.clone(), c.clone(), s.symmetric)?, None)),
        None => Err(Error::input("give either --fit or --coefficients")),
    }
}

pub(super) fn correct(a: &CorrectArgs, run: &mut Run) -> Result<i32> {
    let data = load(&a.data, run)?;
    let (p, fit) = resolve_selection(&a.selection, run)?;
    if let Some(f) = &fit {
        if f.sign_normalized != a.data.sign_normalized {
            return Err(Error::Input(format!(
                "fit was estimated with sign_normalized = {} but the data are declared sign_normalized = {}",
                f.sign_normalized, a.data.sign_normalized
            )));
        }
    }
    let rows: Vec<CorrectedInference> = if a.bonferroni {
        let f = fit.as_ref().expect("clap requires --fit with --bonferroni");
        data.par_iter()
            .map(|r| {
                let mut c = bonferroni_interval_for(r, f, a.alpha, a.delta)?;
                c.study_id = r.study_id.clone();
                Ok(c)
            })
            .collect::<Result<_>>()?
    } else {
        correct_studies(&data, &p, a.alpha)?
    };
    let z = normal::quantile(1.0 - a.alpha / 2.0);
    let mut header = vec![
        "study_id", "x", "sigma", "conventional_lower", "conventional_upper", "theta_median", "ci_lower", "ci_upper",
    ];
    if a.bonferroni {
        header.extend(["bonf_lower", "bonf_upper"]);
    }
    let mut t = Table::new(&header);
    for (r, c) in data.iter().zip(&rows) {
        let mut row = vec![
            r.study_id.clone(),
            num(r.x),
            num(r.sigma),
            num(r.x - z * r.sigma),
            num(r.x + z * r.sigma),
            num(c.theta_median),
            num(c.ci_lower),
            num(c.ci_upper),
        ];
        if a.bonferroni {
            row.extend([opt_num(c.bonf_lower), opt_num(c.bonf_upper)]);
        }
        t.push(row);
    }
    run.write(&a.out, &t.to_bytes()?)?;
    Ok(0)
}

pub(super) fn simulate(a: &SimulateArgs, run: &mut Run) -> Result<i32> {
    run.input(&a.config);
    let text = std::fs::read(&a.config).map_err(|e| Error::Input(format!("{}: {e}", a.config.display())))?;
    let mut config: SimConfig = serde_json::from_slice(&text)
        .map_err(|e| Error::Input(format!("{}: invalid simulation config: {e}", a.config.display())))?;
    config.emit_latent |= a.emit_latent;
    run.seed = Some(config.seed);
    let records = simulate::simulate(&config)?;
    let rep = config.replication.is_some();
    let mut header = vec!["study_id", "cluster_id", "x", "sigma"];
    if rep {
        header.extend(["xr", "sigmar"]);
    }
    if config.emit_latent {
        header.extend(["theta_star", "D"]);
    }
    let mut t = Table::new(&header);
    for r in &records {
        let id = format!("sim{}", r.latent_index);
        let mut row = vec![id.clone(), id, num(r.x), num(r.sigma)];
        if rep {
            row.extend([opt_num(r.xr), opt_num(r.sigmar)]);
        }
        if config.emit_latent {
            row.extend([num(r.theta), if r.published { "1" } else { "0" }.to_string()]);
        }
        t.push(row);
    }
    run.write(&a.out, &t.to_bytes()?)?;
    Ok(0)
}

pub(super) fn diagnose(a: &DiagnoseArgs, run: &mut Run) -> Result<i32> {
    let data = load(&a.data, run)?;
    run.seed = Some(a.seed);
    let fit = match &a.fit {
        Some(path) => {
            run.input(path);
            Some(FitDocument::read(path)?.fit)
        }
        None => None,
    };
    let dens = z_density_diagnostics(&data, &a.cutoffs, fit.as_ref().map(|f| &f.spec.selection), a.bin_width)?;
    let mut t = Table::new(&["lo", "hi", "count", "density", "bound", "exceeds_bound"]);
    for b in &dens.bins {
        t.push(vec![
            num(b.lo),
            num(b.hi),
            b.count.to_string(),
            num(b.density),
            num(dens.bunching_bound),
            b.exceeds_bound.to_string(),
        ]);
    }
    run.write(&io::sibling(&a.out, "density.csv"), &t.to_bytes()?)?;

    let mut t = Table::new(&["cutoff", "left_count", "right_count", "ratio"]);
    for j in &dens.jumps {
        t.push(vec![num(j.cutoff), j.left_count.to_string(), j.right_count.to_string(), num(j.ratio)]);
    }
    run.write(&io::sibling(&a.out, "jumps.csv"), &t.to_bytes()?)?;

    if let Some(edges) = &a.edges {
        let s = symmetry_diagnostic(&data, edges, a.seed, a.bootstrap)?;
        let mut t = Table::new(&["kind", "a", "b", "c", "n_ab", "n_ba", "value", "se"]);
        for p in &s.pairs {
            t.push(vec![
                "pair".into(),
                p.a.to_string(),
                p.b.to_string(),
                String::new(),
                p.n_ab.to_string(),
                p.n_ba.to_string(),
                num(p.h),
                num(p.se),
            ]);
        }
        for &(x, y) in &s.excluded_pairs {
            t.push(vec!["excluded".into(), x.to_string(), y.to_string(), String::new(), String::new(), String::new(), String::new(), String::new()]);
        }
        for r in &s.residuals {
            t.push(vec![
                "triangle".into(),
                r.a.to_string(),
                r.b.to_string(),
                r.c.to_string(),
                String::new(),
                String::new(),
                num(r.residual),
                num(r.se),
            ]);
        }
        run.write(&io::sibling(&a.out, "symmetry.csv"), &t.to_bytes()?)?;
    }

    if !a.data.sign_normalized {
        let mut t = Table::new(&["kind", "intercept", "slope", "se_intercept", "se_slope", "n", "n_clusters"]);
        for (kind, label) in [(MetaRegressionKind::XOnSigma, "x_on_sigma"), (MetaRegressionKind::ZOnInvSigma, "z_on_inv_sigma")] {
            let m = match meta_regression(&data, kind, clustering(&a.data)) {
                Ok(m) => m,
                Err(e) if e.is_input() => return Err(e),
                Err(e) => {
                    eprintln!("warning: meta-regression {label} skipped: {e}");
                    continue;
                }
            };
            t.push(vec![
                label.into(),
                num(m.intercept),
                num(m.slope),
                num(m.se_intercept),
                num(m.se_slope),
                m.n.to_string(),
                m.n_clusters.to_string(),
            ]);
        }
        run.write(&io::sibling(&a.out, "metareg.csv"), &t.to_bytes()?)?;
    }
    Ok(0)
}

pub(super) fn curves(a: &CurvesArgs, run: &mut Run) -> Result<i32> {
    let (p, _) = resolve_selection(&a.selection, run)?;
    if !(a.theta_step > 0.0 && a.theta_max >= a.theta_min) {
        return Err(Error::input("need theta_step > 0 and theta_max >= theta_min"));
    }
    let n = ((a.theta_max - a.theta_min) / a.theta_step + 1e-9).floor() as usize + 1;
    let grid: Vec<f64> = (0..n).map(|i| a.theta_min + a.theta_step * i as f64).collect();
    let rows = bias_coverage_curves(&p, a.sigma, &grid)?;
    let mut t = Table::new(&[
        "theta",
        "median_bias_conventional",
        "coverage_conventional",
        "median_bias_corrected",
        "coverage_corrected",
    ]);
    for r in &rows {
        t.push(vec![
            num(r.theta),
            num(r.median_bias_conventional),
            num(r.coverage_conventional),
            num(r.median_bias_corrected),
            num(r.coverage_corrected),
        ]);
    }
    run.write(&a.out, &t.to_bytes()?)?;
    Ok(0)
}

pub(super) fn gmm(a: &GmmArgs, run: &mut Run) -> Result<i32> {
    let data = load(&a.data, run)?;
    let template = normalized_template(&a.cutoffs, a.symmetric, a.reference)?;
    let mut sys = match a.moments {
        Moments::ReplicationBaseline => MomentSystem::replication_baseline(template),
        Moments::ReplicationSimple => MomentSystem::replication_simple(template),
        Moments::Metastudy => MomentSystem::metastudy_pairwise(template),
    }
    .with_bound(match a.bound {
        Bound::MinusC1 => ReplicationBound::MinusC1,
        Bound::MinusC2 => ReplicationBound::MinusC2,
    })
    .with_clustering(clustering(&a.data));
    if let Some(s) = a.sigma_max {
        sys = sys.with_sigma_max(s);
    }
    let mut code = 0;
    let est = match gmm::gmm_point_estimate(&data, &sys) {
        Ok(e) => Some(e),
        Err(e) if e.is_input() => return Err(e),
        Err(e) => {
            eprintln!("error: point estimate unavailable: {e}");
            code = 2;
            None
        }
    };
    let cs = gmm::stock_wright_cs(&data, &sys, &GridOptions { beta_max: a.beta_max, step: a.step, level: a.level })?;
    if cs.n_skipped > 0 {
        eprintln!("warning: {} grid points skipped with a singular weight matrix", cs.n_skipped);
    }
    let mut t = Table::new(&[
        "row", "cell", "beta_hat", "std_error", "negative", "lower", "upper", "unbounded_above", "critical_value",
    ]);
    let blank = String::new;
    for (k, &cell) in sys.free_cells().iter().enumerate() {
        let (b, se, neg) = match &est {
            Some(e) => (num(e.beta_hat[k]), num(e.standard_errors()[k]), e.negative.to_string()),
            None => (blank(), blank(), blank()),
        };
        t.push(vec!["estimate".into(), cell.to_string(), b, se, neg, blank(), blank(), blank(), blank()]);
    }
    for c in &cs.coordinates {
        if c.intervals.is_empty() {
            t.push(vec![
                "confidence_set".into(),
                c.cell.to_string(),
                blank(),
                blank(),
                blank(),
                blank(),
                blank(),
                c.unbounded_above.to_string(),
                num(cs.critical_value),
            ]);
        }
        for (i, &(lo, hi)) in c.intervals.iter().enumerate() {
            let last = i + 1 == c.intervals.len();
            t.push(vec![
                "confidence_set".into(),
                c.cell.to_string(),
                blank(),
                blank(),
                blank(),
                num(lo),
                num(hi),
                (last && c.unbounded_above).to_string(),
                num(cs.critical_value),
            ]);
        }
    }
    run.write(&a.out, &t.to_bytes()?)?;
    Ok(code)
}

fn z_from_p(p: f64, line: u64, col: &str) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Input(format!("line {line}, column '{col}': p-value must lie in (0, 1), got {p}")));
    }
    Ok(normal::quantile(1.0 - p / 2.0))
}

pub(super) fn prepare(a: &PrepareArgs, run: &mut Run) -> Result<i32> {
    run.input(&a.data);
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&a.data)
        .map_err(|e| Error::Input(format!("{}: {e}", a.data.display())))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| {
        col(name).ok_or_else(|| Error::Input(format!("{}: missing required column '{name}'", a.data.display())))
    };
    let (i_id, i_p, i_e) = (need("study_id")?, need(&a.p_column)?, need(&a.effect_column)?);
    let rep = match (col(&a.p_column_r), col(&a.effect_column_r)) {
        (Some(p), Some(e)) => Some((p, e)),
        (None, None) => None,
        _ => {
            return Err(Error::Input(format!(
                "columns '{}' and '{}' must appear together",
                a.p_column_r, a.effect_column_r
            )))
        }
    };
    let i_cluster = col("cluster_id");
    let used: Vec<usize> = [Some(i_id), Some(i_p), Some(i_e), i_cluster, rep.map(|r| r.0), rep.map(|r| r.1)]
        .into_iter()
        .flatten()
        .collect();
    let passthrough: Vec<usize> = (0..headers.len())
        .filter(|i| !used.contains(i) && !io::RESERVED.contains(&&headers[*i]))
        .collect();
    let mut header = vec!["study_id", "cluster_id", "x", "sigma"];
    if rep.is_some() {
        header.extend(["xr", "sigmar"]);
    }
    header.extend(passthrough.iter().map(|&i| &headers[i]));
    let mut t = Table::new(&header);
    let scale = |v: f64| match a.transform {
        EffectScale::Fisher => v.atanh(),
        EffectScale::None => v,
    };
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let value = |i: usize| -> Result<f64> {
            let raw = rec.get(i).unwrap_or("");
            raw.parse::<f64>()
                .map_err(|_| Error::Input(format!("line {line}, column '{}': cannot parse '{raw}' as a number", &headers[i])))
        };
        let pair = |ip: usize, ie: usize| -> Result<(f64, f64)> {
            let z = z_from_p(value(ip)?, line, &headers[ip])?;
            let x = scale(value(ie)?);
            let sigma = x.abs() / z;
            if !(x.is_finite() && sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::Input(format!(
                    "line {line}, column '{}': effect gives no usable standard error",
                    &headers[ie]
                )));
            }
            Ok((x, sigma))
        };
        let id = rec.get(i_id).unwrap_or("").to_string();
        let (x, sigma) = pair(i_p, i_e)?;
        let cluster = i_cluster.and_then(|i| rec.get(i)).filter(|c| !c.is_empty()).unwrap_or(&id).to_string();
        let mut row = vec![id, cluster, num(x), num(sigma)];
        if let Some((ip, ie)) = rep {
            let (xr, sr) = pair(ip, ie)?;
            row.extend([num(xr), num(sr)]);
        }
        row.extend(passthrough.iter().map(|&i| rec.get(i).unwrap_or("").to_string()));
        t.push(row);
    }
    run.write(&a.out, &t.to_bytes()?)?;
    Ok(0)
}
