// Copyright 2026 The fl-sampling Authors
// SPDX-License-Identifier: Apache-2.0

use std::ffi::CStr;
use std::ptr;

use fl_sampling_ffi::*;

fn importance(p: &[f64]) -> *mut FlsImportance {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fls_importance_new(p.as_ptr(), p.len(), &mut h) }, FlsStatus::Ok);
    h
}

fn scheme(kind: FlsSchemeKind, m: usize, p: *const FlsImportance) -> *mut FlsScheme {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fls_scheme_new(kind as u32, m, p, &mut h) }, FlsStatus::Ok);
    h
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(fls_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn uniform_stats_through_the_abi() {
    let p = importance(&[0.1, 0.2, 0.3, 0.4]);
    let s = scheme(FlsSchemeKind::Uniform, 2, p);
    let mut st = FlsStats::default();
    let mut var = [0.0; 4];
    unsafe {
        assert_eq!(fls_closed_form_stats(s, p, &mut st, var.as_mut_ptr(), 4), FlsStatus::Ok);
    }
    assert!((st.var_weight_sum - 1.0 / 15.0).abs() < 1e-15);
    assert!((st.alpha - 1.0 / 3.0).abs() < 1e-15);
    assert!(st.alpha_exact && st.has_var_clients);
    assert!((var[3] - 0.16).abs() < 1e-15);
    unsafe {
        assert_eq!(fls_closed_form_stats(s, p, &mut st, var.as_mut_ptr(), 3), FlsStatus::LengthMismatch);
        fls_scheme_free(s);
        fls_importance_free(p);
    }
}

#[test]
fn md_draw_is_seeded() {
    let p = importance(&[0.25; 4]);
    let s = scheme(FlsSchemeKind::Md, 3, p);
    let (mut a, mut b) = ([0.0; 4], [0.0; 4]);
    let mut n = 0usize;
    unsafe {
        assert_eq!(fls_draw(s, p, 9, a.as_mut_ptr(), 4, &mut n), FlsStatus::Ok);
        assert_eq!(fls_draw(s, p, 9, b.as_mut_ptr(), 4, ptr::null_mut()), FlsStatus::Ok);
    }
    assert_eq!(a, b);
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!((1..=3).contains(&n));
    unsafe {
        fls_scheme_free(s);
        fls_importance_free(p);
    }
}

#[test]
fn error_codes_and_messages() {
    let mut h = ptr::null_mut();
    let bad = [0.5, 0.5, 0.0];
    assert_eq!(unsafe { fls_importance_new(bad.as_ptr(), 3, &mut h) }, FlsStatus::InvalidImportance);
    assert!(h.is_null());
    assert!(last_error().contains("importance"), "{}", last_error());
    assert_eq!(unsafe { fls_importance_new(ptr::null(), 3, &mut h) }, FlsStatus::NullPointer);

    let p = importance(&[0.1, 0.2, 0.3, 0.4]);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { fls_scheme_new(FlsSchemeKind::PoissonBinomial as u32, 3, p, &mut s) }, FlsStatus::InvalidScheme);
    assert!(last_error().contains("m·max p_i"), "{}", last_error());
    assert_eq!(unsafe { fls_scheme_new(99, 2, p, &mut s) }, FlsStatus::InvalidScheme);
    assert_eq!(unsafe { fls_scheme_new(FlsSchemeKind::Md as u32, 2, ptr::null(), &mut s) }, FlsStatus::NullPointer);
    let ok = scheme(FlsSchemeKind::Md, 2, p);
    assert_eq!(last_error(), "");
    let mut st = FlsStats::default();
    assert_eq!(unsafe { fls_closed_form_stats(ok, p, ptr::null_mut(), ptr::null_mut(), 0) }, FlsStatus::NullPointer);
    assert_eq!(unsafe { fls_closed_form_stats(ok, p, &mut st, ptr::null_mut(), 0) }, FlsStatus::Ok);
    assert!((st.alpha - 0.5).abs() < 1e-15 && st.var_weight_sum == 0.0);

    // An optimal scheme's q must match the number of clients.
    let small = importance(&[0.5, 0.5]);
    let q = [0.5; 4];
    let mut u = ptr::null_mut();
    assert_eq!(unsafe { fls_scheme_new_optimal(q.as_ptr(), 4, &mut u) }, FlsStatus::Ok);
    assert_eq!(unsafe { fls_closed_form_stats(u, small, &mut st, ptr::null_mut(), 0) }, FlsStatus::InvalidScheme);
    unsafe {
        fls_scheme_free(u);
        fls_scheme_free(ok);
        fls_importance_free(small);
        fls_importance_free(p);
        fls_scheme_free(ptr::null_mut());
        fls_importance_free(ptr::null_mut());
    }
}

#[test]
fn optimal_and_clustered() {
    let p = importance(&[0.25; 4]);
    let mut s = ptr::null_mut();
    let q = [0.5, 0.5, 1.0, 0.25];
    assert_eq!(unsafe { fls_scheme_new_optimal(q.as_ptr(), 4, &mut s) }, FlsStatus::Ok);
    let mut st = FlsStats::default();
    assert_eq!(unsafe { fls_closed_form_stats(s, p, &mut st, ptr::null_mut(), 0) }, FlsStatus::Ok);
    assert!((st.expected_clients - 2.25).abs() < 1e-15);
    let zero = [0.5, 0.0, 1.0, 0.25];
    let mut s2 = ptr::null_mut();
    assert_eq!(unsafe { fls_scheme_new_optimal(zero.as_ptr(), 4, &mut s2) }, FlsStatus::InvalidScheme);

    let c = scheme(FlsSchemeKind::Clustered, 2, p);
    assert_eq!(unsafe { fls_closed_form_stats(c, p, &mut st, ptr::null_mut(), 0) }, FlsStatus::Ok);
    assert!(!st.alpha_exact);
    assert!(st.var_weight_sum.abs() < 1e-15);
    unsafe {
        fls_scheme_free(s);
        fls_scheme_free(c);
        fls_importance_free(p);
    }
}

#[test]
fn verdict_and_version() {
    let mut h = ptr::null_mut();
    let w = [1.0; 10];
    assert_eq!(unsafe { fls_importance_from_weights(w.as_ptr(), 10, &mut h) }, FlsStatus::Ok);
    assert_eq!(unsafe { fls_importance_len(h) }, 10);
    let mut v = FlsVerdict::default();
    assert_eq!(unsafe { fls_corollary_compare(h, 5, &mut v) }, FlsStatus::Ok);
    assert!(v.uniform_better && !v.degenerate);
    assert!((v.threshold - 1.0 / 6.0).abs() < 1e-15);
    assert_eq!(unsafe { fls_corollary_compare(h, 11, &mut v) }, FlsStatus::InvalidScheme);
    unsafe { fls_importance_free(h) };
    let version = unsafe { CStr::from_ptr(fls_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}
