use std::ffi::{CStr, CString};
use std::ptr;

use dfps_ffi::*;

const TINY: &str = r#"{"steps": 5, "paths": 4, "scenarios": 2, "minibatch": 1, "picard": 1,
    "adjoint_steps": 2, "macro_steps": 2, "lambda_steps": 1, "warmstart_steps": 2,
    "eval_scenarios": 1, "eval_paths": 8}"#;

fn last_error(h: *const DfpsSolver) -> String {
    let p = unsafe { dfps_last_error(h) };
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_solver() -> *mut DfpsSolver {
    let mut h = ptr::null_mut();
    let profile = CString::new("smoke").unwrap();
    assert_eq!(unsafe { dfps_solver_new(profile.as_ptr(), &mut h) }, DfpsStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn unknown_profile_is_a_config_error() {
    let mut h = ptr::null_mut();
    let profile = CString::new("enormous").unwrap();
    assert_eq!(unsafe { dfps_solver_new(profile.as_ptr(), &mut h) }, DfpsStatus::Config);
    assert!(h.is_null());
    assert!(last_error(ptr::null()).contains("enormous"));
}

#[test]
fn null_arguments_are_rejected() {
    assert_eq!(unsafe { dfps_solver_new(ptr::null(), ptr::null_mut()) }, DfpsStatus::NullArgument);
    assert_eq!(unsafe { dfps_solver_train(ptr::null_mut()) }, DfpsStatus::NullArgument);
    let h = new_solver();
    assert_eq!(unsafe { dfps_solver_configure(h, ptr::null()) }, DfpsStatus::NullArgument);
    unsafe { dfps_solver_free(h) };
    unsafe { dfps_solver_free(ptr::null_mut()) };
}

#[test]
fn costs_need_a_model() {
    let h = new_solver();
    let (mut j1, mut j2) = (0.0, 0.0);
    assert_eq!(unsafe { dfps_solver_costs(h, &mut j1, &mut j2) }, DfpsStatus::NotTrained);
    assert!(last_error(h).contains("no trained model"));
    unsafe { dfps_solver_free(h) };
}

#[test]
fn bad_config_patch_keeps_old_config() {
    let h = new_solver();
    let bad = CString::new(r#"{"steps": 0}"#).unwrap();
    assert_eq!(unsafe { dfps_solver_configure(h, bad.as_ptr()) }, DfpsStatus::Config);
    let unknown = CString::new(r#"{"nope": 1}"#).unwrap();
    assert_eq!(unsafe { dfps_solver_configure(h, unknown.as_ptr()) }, DfpsStatus::Config);
    unsafe { dfps_solver_free(h) };
}

#[test]
fn train_save_load_round_trip() {
    let h = new_solver();
    let tiny = CString::new(TINY).unwrap();
    assert_eq!(unsafe { dfps_solver_configure(h, tiny.as_ptr()) }, DfpsStatus::Ok);
    assert_eq!(unsafe { dfps_solver_set_seed(h, 3) }, DfpsStatus::Ok);
    assert_eq!(unsafe { dfps_solver_train(h) }, DfpsStatus::Ok, "{}", unsafe {
        let p = dfps_last_error(h);
        if p.is_null() {
            String::new()
        } else {
            CStr::from_ptr(p).to_string_lossy().into_owned()
        }
    });
    let (mut j1, mut j2) = (f64::NAN, f64::NAN);
    assert_eq!(unsafe { dfps_solver_costs(h, &mut j1, &mut j2) }, DfpsStatus::Ok);
    assert!(j1.is_finite() && j2.is_finite());

    let dir = tempfile::tempdir().unwrap();
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    let stem = CString::new("model").unwrap();
    assert_eq!(unsafe { dfps_solver_save(h, d.as_ptr(), stem.as_ptr()) }, DfpsStatus::Ok);

    let g = new_solver();
    assert_eq!(unsafe { dfps_solver_configure(g, tiny.as_ptr()) }, DfpsStatus::Ok);
    let manifest = CString::new(dir.path().join("model.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dfps_solver_load(g, manifest.as_ptr()) }, DfpsStatus::Ok);
    let (mut k1, mut k2) = (f64::NAN, f64::NAN);
    assert_eq!(unsafe { dfps_solver_costs(g, &mut k1, &mut k2) }, DfpsStatus::Ok);
    assert_eq!((k1, k2), (j1, j2));

    let missing = CString::new(dir.path().join("absent.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dfps_solver_load(g, missing.as_ptr()) }, DfpsStatus::Io);
    unsafe {
        dfps_solver_free(h);
        dfps_solver_free(g);
    }
}

#[test]
fn parameter_count_matches_the_library() {
    let d = dfps::model::Dims { n: 2, m1: 1, m2: 1 };
    assert_eq!(dfps_parameter_count(2, 1, 1), dfps::networks::parameter_count(d) as u64);
    assert_eq!(dfps_parameter_count(0, 1, 1), 0);
    let v = unsafe { CStr::from_ptr(dfps_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dfps.h")).unwrap();
    for f in [
        "dfps_solver_new",
        "dfps_solver_free",
        "dfps_last_error",
        "dfps_solver_configure",
        "dfps_solver_set_seed",
        "dfps_solver_train",
        "dfps_solver_costs",
        "dfps_solver_save",
        "dfps_solver_load",
        "dfps_parameter_count",
        "dfps_version",
    ] {
        assert!(header.contains(f), "{f} missing from the header");
    }
    assert!(header.contains("typedef struct DfpsSolver DfpsSolver"));
    assert!(header.contains("DFPS_STATUS_NOT_TRAINED"));
}
