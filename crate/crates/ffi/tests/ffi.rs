use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dualcolor::config::TrainConfig;
use dualcolor::train::Trainer;
use dualcolor_ffi::*;

fn last_error() -> String {
    let p = dc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn color_conversions_round_trip() {
    let rgb: Vec<f32> = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.2, 0.5, 0.8, 1.0, 0.0, 0.0];
    let mut lab = vec![0f32; rgb.len()];
    let mut back = vec![0f32; rgb.len()];
    unsafe {
        assert_eq!(dc_rgb_to_lab(rgb.as_ptr(), 4, lab.as_mut_ptr()), DcStatus::Ok);
        assert_eq!(dc_lab_to_rgb(lab.as_ptr(), 4, back.as_mut_ptr()), DcStatus::Ok);
    }
    assert!((lab[3] - 100.0).abs() < 1e-3);
    for (a, b) in rgb.iter().zip(&back) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn null_and_non_finite_inputs_are_reported() {
    let mut out = [0f32; 3];
    unsafe {
        assert_eq!(dc_rgb_to_lab(ptr::null(), 1, out.as_mut_ptr()), DcStatus::NullPointer);
        assert!(last_error().contains("rgb"));
        let nan = [f32::NAN, 0.0, 0.0];
        assert_eq!(dc_lab_to_rgb(nan.as_ptr(), 1, out.as_mut_ptr()), DcStatus::NonFinite);
    }
}

#[test]
fn colorfulness_and_psnr() {
    let red: Vec<f32> = (0..16).flat_map(|_| [1.0, 0.0, 0.0]).collect();
    let mut cf = 0.0;
    unsafe {
        assert_eq!(dc_colorfulness(red.as_ptr(), 0, 4, &mut cf), DcStatus::InvalidArgument);
        assert_eq!(dc_colorfulness(red.as_ptr(), 4, 4, &mut cf), DcStatus::Ok);
    }
    assert!((cf - 0.3 * (255f64.powi(2) + 127.5f64.powi(2)).sqrt()).abs() < 1e-3);

    let a = [10.0, 20.0];
    let b = [11.0, 21.0];
    let mut p = 0.0;
    unsafe {
        assert_eq!(dc_psnr(a.as_ptr(), b.as_ptr(), 2, 255.0, &mut p), DcStatus::Ok);
    }
    assert!((p - 20.0 * 255f64.log10()).abs() < 1e-9);
    unsafe {
        assert_eq!(
            dc_psnr(a.as_ptr(), b.as_ptr(), 2, -1.0, &mut p),
            DcStatus::InvalidArgument
        );
    }
}

#[test]
fn frechet_analytic_and_indefinite() {
    let (m0, m3) = ([0.0], [3.0]);
    let (v1, v4) = ([1.0], [4.0]);
    let mut d = 0.0;
    unsafe {
        assert_eq!(
            dc_frechet_distance(m0.as_ptr(), v1.as_ptr(), m3.as_ptr(), v1.as_ptr(), 1, &mut d),
            DcStatus::Ok
        );
        assert!((d - 9.0).abs() < 1e-9);
        assert_eq!(
            dc_frechet_distance(m0.as_ptr(), v1.as_ptr(), m0.as_ptr(), v4.as_ptr(), 1, &mut d),
            DcStatus::Ok
        );
        assert!((d - 1.0).abs() < 1e-9);
        let neg = [-1.0];
        assert_eq!(
            dc_frechet_distance(m0.as_ptr(), v1.as_ptr(), m0.as_ptr(), neg.as_ptr(), 1, &mut d),
            DcStatus::NotPositiveSemidefinite
        );
        let asym = [1.0, 0.5, 0.0, 1.0];
        let m = [0.0, 0.0];
        assert_eq!(
            dc_frechet_distance(m.as_ptr(), asym.as_ptr(), m.as_ptr(), asym.as_ptr(), 2, &mut d),
            DcStatus::InvalidArgument
        );
    }
}

#[test]
fn model_handle_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    Trainer::new(&TrainConfig::default())
        .unwrap()
        .save_checkpoint(&path)
        .unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model: *mut DcModel = ptr::null_mut();
    unsafe {
        assert_eq!(dc_model_load(cpath.as_ptr(), &mut model), DcStatus::Ok);
        let mut k = 0usize;
        assert_eq!(dc_model_num_queries(model, &mut k), DcStatus::Ok);
        assert_eq!(k, 16);
        let (h, w) = (20usize, 37usize);
        let input: Vec<f32> = (0..h * w * 3).map(|i| (i % 7) as f32 / 6.0).collect();
        let mut out = vec![-1f32; input.len()];
        assert_eq!(
            dc_model_colorize(model, input.as_ptr(), h, w, out.as_mut_ptr()),
            DcStatus::Ok
        );
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        dc_model_free(model);
        dc_model_free(ptr::null_mut());

        let missing = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
        let mut none: *mut DcModel = ptr::null_mut();
        assert_ne!(dc_model_load(missing.as_ptr(), &mut none), DcStatus::Ok);
        assert!(none.is_null());
        assert!(!last_error().is_empty());
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(dc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dualcolor.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "dc_model_load",
        "dc_model_colorize",
        "dc_frechet_distance",
        "DC_STATUS_OK",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(status.success());
}
