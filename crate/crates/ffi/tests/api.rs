use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use pubsel::estimate::{fit_mle, FitOptions};
use pubsel::simulate::{simulate, ReplicationRule, SigmaDist, SimConfig, SimTarget};
use pubsel::{ModelKind, ModelSpec};
use pubsel_ffi::*;

fn last_error() -> String {
    let p = pubsel_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn selection(cutoffs: &[f64], coefficients: &[f64], symmetric: bool) -> *mut PubselSelection {
    let mut h = ptr::null_mut();
    let s = unsafe {
        pubsel_selection_new(cutoffs.as_ptr(), cutoffs.len(), coefficients.as_ptr(), coefficients.len(), symmetric, &mut h)
    };
    assert_eq!(s, PubselStatus::Ok);
    h
}

#[test]
fn replication_probability_at_zero() {
    let mut mu = ptr::null_mut();
    let mut r = 0.0;
    unsafe {
        assert_eq!(pubsel_effect_point_mass(0.0, &mut mu), PubselStatus::Ok);
        assert_eq!(pubsel_replication_probability(mu, 1.96, &mut r), PubselStatus::Ok);
        pubsel_effect_free(mu);
    }
    assert!((r - 0.024997895).abs() < 1e-8, "{r}");
}

#[test]
fn corrected_interval_without_selection_is_conventional() {
    let p = selection(&[], &[1.0], false);
    let mut out = PubselInterval::default();
    unsafe {
        assert_eq!(pubsel_corrected_interval(p, 1.5, 2.0, 0.05, &mut out), PubselStatus::Ok);
        pubsel_selection_free(p);
    }
    assert!((out.median - 1.5).abs() < 1e-9);
    assert!((out.lower - (1.5 - 1.959963984540054 * 2.0)).abs() < 1e-6);
    assert!((out.upper - (1.5 + 1.959963984540054 * 2.0)).abs() < 1e-6);
}

#[test]
fn truncated_cdf_and_expected_probability() {
    let p = selection(&[1.96], &[0.1, 1.0], true);
    let (mut f, mut e, mut v) = (0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(pubsel_truncated_cdf(p, 0.0, 0.0, 1.0, &mut f), PubselStatus::Ok);
        assert_eq!(pubsel_expected_pub_prob(p, 0.0, 1.0, &mut e), PubselStatus::Ok);
        assert_eq!(pubsel_selection_value(p, 3.0, &mut v), PubselStatus::Ok);
        pubsel_selection_free(p);
    }
    assert!((f - 0.5).abs() < 1e-12);
    // 0.1 * P(|Z| < 1.96) + P(|Z| > 1.96)
    assert!((e - (0.1 * 0.950004209703559 + 0.049995790296441)).abs() < 1e-9, "{e}");
    assert_eq!(v, 1.0);
}

#[test]
fn errors_set_status_and_message() {
    let mut h = ptr::null_mut();
    let coef = [1.0, 2.0, 3.0];
    let s = unsafe { pubsel_selection_new(ptr::null(), 0, coef.as_ptr(), coef.len(), false, &mut h) };
    assert_eq!(s, PubselStatus::InvalidInput);
    assert!(h.is_null());
    assert!(last_error().contains("coefficients"), "{}", last_error());

    let mut v = 0.0;
    let s = unsafe { pubsel_truncated_cdf(ptr::null(), 0.0, 0.0, 1.0, &mut v) };
    assert_eq!(s, PubselStatus::NullPointer);
    assert!(last_error().contains("selection"));

    let p = selection(&[1.96], &[0.0, 1.0], true);
    let mut out = PubselInterval::default();
    let s = unsafe { pubsel_corrected_interval(p, 1.0, 1.0, 0.05, &mut out) };
    unsafe { pubsel_selection_free(p) };
    assert_eq!(s, PubselStatus::Numerical);

    let bad = CString::new("{not json").unwrap();
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { pubsel_fit_from_json(bad.as_ptr(), &mut fit) }, PubselStatus::InvalidInput);
    assert!(fit.is_null());
}

#[test]
fn freeing_null_is_a_no_op() {
    unsafe {
        pubsel_selection_free(ptr::null_mut());
        pubsel_effect_free(ptr::null_mut());
        pubsel_fit_free(ptr::null_mut());
    }
    assert_eq!(unsafe { pubsel_fit_n_parameters(ptr::null()) }, 0);
    assert!(!unsafe { pubsel_fit_converged(ptr::null()) });
}

#[test]
fn fit_document_round_trip() {
    let p = pubsel::SelectionFunction::two_sided(1.96, 0.2).unwrap();
    let cfg = SimConfig::new(
        pubsel::EffectDistribution::gamma_abs(1.0, 1.0).unwrap(),
        p,
        SigmaDist::Fixed { value: 1.0 },
        SimTarget::Published(800),
        3,
    )
    .with_replication(ReplicationRule::Fixed { ratio: 1.0 });
    let data: Vec<_> = simulate(&cfg).unwrap().iter().map(|r| r.to_study()).collect();
    let template = ModelSpec::new(
        ModelKind::Replication,
        pubsel::SelectionFunction::two_sided(1.96, 1.0).unwrap(),
        pubsel::EffectDistribution::gamma_abs(1.0, 1.0).unwrap(),
    );
    let fitted = fit_mle(&data, &template, &FitOptions { n_starts: 3, ..FitOptions::default() }).unwrap();
    let doc = serde_json::json!({ "parameters": [], "fit": fitted });

    let json = CString::new(doc.to_string()).unwrap();
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { pubsel_fit_from_json(json.as_ptr(), &mut fit) }, PubselStatus::Ok);
    let n = unsafe { pubsel_fit_n_parameters(fit) };
    assert_eq!(n, 3);
    let names: Vec<String> =
        (0..n).map(|i| unsafe { CStr::from_ptr(pubsel_fit_parameter_name(fit, i)) }.to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["kappa", "lambda", "beta_1"]);
    assert!(unsafe { pubsel_fit_parameter_name(fit, n) }.is_null());
    let (mut est, mut se) = (0.0, 0.0);
    assert_eq!(unsafe { pubsel_fit_parameter(fit, 2, &mut est, &mut se) }, PubselStatus::Ok);
    assert!((est - 0.2).abs() < 4.0 * se, "{est} {se}");
    assert_eq!(unsafe { pubsel_fit_parameter(fit, 9, &mut est, &mut se) }, PubselStatus::InvalidInput);

    let mut p = ptr::null_mut();
    assert_eq!(unsafe { pubsel_fit_selection(fit, &mut p) }, PubselStatus::Ok);
    let mut v = 0.0;
    unsafe { pubsel_selection_value(p, 0.5, &mut v) };
    let mut b = 0.0;
    unsafe { pubsel_fit_parameter(fit, 2, &mut b, &mut se) };
    assert_eq!(v, b);

    let (mut plain, mut wide) = (PubselInterval::default(), PubselInterval::default());
    unsafe {
        assert_eq!(pubsel_corrected_interval(p, 2.5, 1.0, 0.05, &mut plain), PubselStatus::Ok);
        assert_eq!(pubsel_bonferroni_interval(fit, 2.5, 1.0, 0.05, 0.005, &mut wide), PubselStatus::Ok);
        pubsel_selection_free(p);
        pubsel_fit_free(fit);
    }
    assert!(wide.lower <= plain.lower && wide.upper >= plain.upper, "{plain:?} {wide:?}");
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pubsel.h")).unwrap();
    for name in [
        "pubsel_last_error",
        "pubsel_selection_new",
        "pubsel_corrected_interval",
        "pubsel_bonferroni_interval",
        "pubsel_fit_from_json",
        "typedef struct PubselFit PubselFit",
        "PUBSEL_STATUS_INVALID_INPUT",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"pubsel.h\"\nint main(void) { PubselInterval i; (void)i; return pubsel_last_error() != 0; }\n").unwrap();
    let status = Command::new(cc).arg("-fsyntax-only").arg("-I").arg(&include).arg(&src).status().unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for c in ["cc", "gcc", "clang"] {
        if Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(c);
        }
    }
    Err(())
}
