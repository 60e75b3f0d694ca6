//! Exercises the C entry points the way a foreign caller would: raw
//! pointers in, status codes out.

use std::ffi::{CStr, CString};
use std::ptr;

use conreg_ffi::*;

fn gaussian_table(n: usize, center: f64) -> Vec<f64> {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let x = i as f64 / (n - 1) as f64;
            let y = j as f64 / (n - 1) as f64;
            let d2 = (x - center).powi(2) + (y - center).powi(2);
            data[i * n + j] = (-d2 / 0.02).exp() + 0.05;
        }
    }
    data
}

fn make_density(n: usize, center: f64) -> *mut ConregDensity {
    let data = gaussian_table(n, center);
    let mut handle = ptr::null_mut();
    let status = unsafe { conreg_density_from_values(n, data.as_ptr(), &mut handle) };
    assert_eq!(status, ConregStatus::Ok);
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(conreg_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn density_construction_and_readback() {
    let n = 40;
    let d = make_density(n, 0.5);
    unsafe {
        assert_eq!(conreg_density_size(d), n);
        let mut out = vec![0.0; n * n];
        assert_eq!(conreg_density_values(d, out.as_mut_ptr()), ConregStatus::Ok);
        // normalized and symmetric
        assert!(out.iter().all(|v| *v >= 0.0));
        assert_eq!(out[3 * n + 7], out[7 * n + 3]);
        conreg_density_free(d);
    }
}

#[test]
fn invalid_density_sets_error_message() {
    let n = 10;
    let mut data = gaussian_table(n, 0.5);
    data[5] = f64::NAN;
    let mut handle = ptr::null_mut();
    let status = unsafe { conreg_density_from_values(n, data.as_ptr(), &mut handle) };
    assert_ne!(status, ConregStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn null_pointers_are_rejected_not_dereferenced() {
    unsafe {
        let mut handle = ptr::null_mut();
        assert_eq!(
            conreg_density_from_values(8, ptr::null(), &mut handle),
            ConregStatus::NullPointer
        );
        assert_eq!(
            conreg_density_values(ptr::null(), ptr::null_mut()),
            ConregStatus::NullPointer
        );
        assert_eq!(conreg_density_size(ptr::null()), 0);
        assert_eq!(conreg_warp_size(ptr::null()), 0);
        // frees of null are no-ops
        conreg_density_free(ptr::null_mut());
        conreg_warp_free(ptr::null_mut());
    }
}

#[test]
fn file_round_trip_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("d.csv").to_str().unwrap()).unwrap();
    let d = make_density(30, 0.4);
    unsafe {
        assert_eq!(conreg_density_write(d, path.as_ptr()), ConregStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(conreg_density_read(path.as_ptr(), &mut back), ConregStatus::Ok);
        let n = conreg_density_size(back);
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n * n];
        conreg_density_values(d, a.as_mut_ptr());
        conreg_density_values(back, b.as_mut_ptr());
        assert_eq!(a, b);
        conreg_density_free(d);
        conreg_density_free(back);
    }
}

#[test]
fn missing_file_reports_io_status() {
    let path = CString::new("/no/such/file.csv").unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { conreg_density_read(path.as_ptr(), &mut handle) };
    assert_eq!(status, ConregStatus::Io);
    // the density reader touches the sidecar first, so the path in the
    // message may carry either extension
    assert!(last_error().contains("/no/such/file"));
}

#[test]
fn registration_of_identical_densities_is_near_identity() {
    let n = 100;
    let d = make_density(n, 0.5);
    let mut warp = ptr::null_mut();
    let mut cost = f64::MAX;
    unsafe {
        let status = conreg_register(d, d, 0, 0, &mut warp, &mut cost);
        assert_eq!(status, ConregStatus::Ok, "{}", last_error());
        assert!(cost < 1e-6);
        let m = conreg_warp_size(warp);
        assert_eq!(m, n);
        let mut vals = vec![0.0; m];
        conreg_warp_values(warp, vals.as_mut_ptr());
        for (i, v) in vals.iter().enumerate() {
            let x = i as f64 / (m - 1) as f64;
            assert!((v - x).abs() < 1e-3, "warp deviates at {x}: {v}");
        }
        conreg_density_free(d);
        conreg_warp_free(warp);
    }
}

#[test]
fn warp_invert_and_distance() {
    let n = 100;
    let fixed = make_density(n, 0.45);
    let moving = make_density(n, 0.55);
    unsafe {
        let mut warp = ptr::null_mut();
        let status = conreg_register(fixed, moving, 20, 200, &mut warp, ptr::null_mut());
        assert_eq!(status, ConregStatus::Ok, "{}", last_error());
        let mut inv = ptr::null_mut();
        assert_eq!(conreg_warp_invert(warp, &mut inv), ConregStatus::Ok);
        let mut d_wi = 0.0;
        assert_eq!(conreg_warp_distance(warp, inv, &mut d_wi), ConregStatus::Ok);
        let mut d_ww = f64::MAX;
        assert_eq!(conreg_warp_distance(warp, warp, &mut d_ww), ConregStatus::Ok);
        assert_eq!(d_ww, 0.0);
        assert!(d_wi >= 0.0);
        conreg_warp_free(warp);
        conreg_warp_free(inv);
        conreg_density_free(fixed);
        conreg_density_free(moving);
    }
}

#[test]
fn template_returns_density_and_warps() {
    let n = 60;
    let handles: Vec<*const ConregDensity> = [0.42, 0.5, 0.58]
        .iter()
        .map(|c| make_density(n, *c) as *const _)
        .collect();
    let mut template = ptr::null_mut();
    let mut warps = vec![ptr::null_mut(); handles.len()];
    unsafe {
        let status = conreg_template(
            handles.as_ptr(),
            handles.len(),
            &mut template,
            warps.as_mut_ptr(),
        );
        assert_eq!(status, ConregStatus::Ok, "{}", last_error());
        assert_eq!(conreg_density_size(template), n);
        for w in &warps {
            assert!(!w.is_null());
            assert_eq!(conreg_warp_size(*w), n);
            conreg_warp_free(*w);
        }
        conreg_density_free(template);
        for h in handles {
            conreg_density_free(h as *mut _);
        }
    }
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/include/conreg.h"
    ))
    .unwrap();
    for symbol in [
        "conreg_last_error_message",
        "conreg_density_from_values",
        "conreg_register",
        "conreg_template",
        "conreg_warp_distance",
        "typedef struct ConregDensity ConregDensity",
        "CONREG_STATUS_OK",
    ] {
        assert!(header.contains(symbol), "header is missing {symbol}");
    }
}
