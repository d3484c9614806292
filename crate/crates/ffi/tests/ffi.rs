use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ogan_lab::attacks::AdvGenerator;
use ogan_lab::diffengine::{SeededRng, Tensor};
use ogan_lab::faceswap::{Architecture, SwapModel};
use ogan_lab::transforms::{AffineDistortion, DistortionSamplerConfig};
use ogan_lab_ffi::*;

const RES: usize = 16;

fn frames(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = SeededRng::new(seed);
    (0..n * RES * RES * 3).map(|_| rng.uniform_range(0.0, 1.0)).collect()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ogan_last_error()) }.to_string_lossy().into_owned()
}

fn saved_model(dir: &Path) -> (SwapModel, CString) {
    let model = SwapModel::new(Architecture::H128Mini, RES, &mut SeededRng::new(3)).unwrap();
    let stem = dir.join("model");
    model.save(&stem).unwrap();
    (model, cstr(&stem))
}

#[test]
fn swap_matches_rust_api() {
    let dir = tempfile::tempdir().unwrap();
    let (model, stem) = saved_model(dir.path());
    let x = frames(2, 1);
    let mut out = vec![0.0f32; x.len()];
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(ogan_swap_model_load(stem.as_ptr(), &mut h), OganStatus::Ok);
        let mut res = 0usize;
        assert_eq!(ogan_swap_model_resolution(h, &mut res), OganStatus::Ok);
        assert_eq!(res, RES);
        assert_eq!(ogan_swap_model_swap(h, x.as_ptr(), 2, out.as_mut_ptr()), OganStatus::Ok);
        ogan_swap_model_free(h);
    }
    let expected = model.swap(&Tensor::new(vec![2, RES, RES, 3], x).unwrap()).unwrap();
    assert_eq!(out, expected.data());
    assert_eq!(last_error(), "");
}

#[test]
fn perturb_matches_rust_api_and_respects_budget() {
    let dir = tempfile::tempdir().unwrap();
    let bounds = DistortionSamplerConfig { max_rotation: 10.0, max_shift: 3.2 };
    let gen = AdvGenerator::new(RES, 2.0 / 255.0, bounds, &mut SeededRng::new(4)).unwrap();
    let stem = dir.path().join("gen");
    gen.save(&stem).unwrap();
    let x = frames(3, 2);
    let ds = [1.0f32, 0.5, -0.5, -3.0, 2.0, 0.0, 0.0, 0.0, 0.0];
    let mut out = vec![0.0f32; x.len()];
    unsafe {
        let mut h = ptr::null_mut();
        let s = cstr(&stem);
        assert_eq!(ogan_generator_load(s.as_ptr(), &mut h), OganStatus::Ok);
        assert_eq!(
            ogan_generator_perturb(h, x.as_ptr(), 3, ds.as_ptr(), out.as_mut_ptr()),
            OganStatus::Ok
        );
        ogan_generator_free(h);
    }
    let dists: Vec<_> = ds.chunks(3).map(|c| AffineDistortion::new(c[0], c[1], c[2])).collect();
    let expected = gen.perturb(&Tensor::new(vec![3, RES, RES, 3], x.clone()).unwrap(), &dists).unwrap();
    assert_eq!(out, expected.data());
    for (a, b) in out.iter().zip(&x) {
        assert!((a - b).abs() <= 2.0 / 255.0 + 1e-6 && (0.0..=1.0).contains(a));
    }
}

#[test]
fn pgd_stays_in_budget_and_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (_, stem) = saved_model(dir.path());
    let x = frames(2, 5);
    let eps = 2.0 / 255.0;
    let run = |seed| {
        let mut out = vec![0.0f32; x.len()];
        unsafe {
            let mut h = ptr::null_mut();
            assert_eq!(ogan_swap_model_load(stem.as_ptr(), &mut h), OganStatus::Ok);
            let s = ogan_pgd_distort(h, x.as_ptr(), 2, eps, 0.001, 5, seed, out.as_mut_ptr());
            assert_eq!(s, OganStatus::Ok, "{}", last_error());
            ogan_swap_model_free(h);
        }
        out
    };
    let a = run(7);
    assert_eq!(a, run(7));
    for (p, q) in a.iter().zip(&x) {
        assert!((p - q).abs() <= eps + 1e-6 && (0.0..=1.0).contains(p));
    }
}

#[test]
fn temporal_scores() {
    // Two 2-element frames: diff (1, 1), RMS 1, E_tmp 1000.
    let v = [0.0f32, 0.0, 1.0, 1.0];
    let mut e = 0.0;
    unsafe {
        assert_eq!(ogan_e_tmp(v.as_ptr(), 2, 2, &mut e), OganStatus::Ok);
    }
    assert!((e - 1000.0).abs() < 1e-9);
    let half = [0.0f32, 0.0, 0.5, 0.5];
    let mut s = 0.0;
    unsafe {
        assert_eq!(ogan_s_tmp(v.as_ptr(), half.as_ptr(), 2, 2, &mut s), OganStatus::Ok);
    }
    assert!((s - 1.0).abs() < 1e-9);
    unsafe {
        assert_eq!(ogan_s_tmp(v.as_ptr(), v.as_ptr(), 2, 2, &mut s), OganStatus::Ok);
    }
    assert_eq!(s, 0.0);
}

#[test]
fn errors_are_codes_with_messages() {
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(ogan_swap_model_load(ptr::null(), &mut h), OganStatus::NullPointer);
        assert!(last_error().contains("null"));
        let missing = CString::new("/nonexistent/model").unwrap();
        let s = ogan_swap_model_load(missing.as_ptr(), &mut h);
        assert!(matches!(s, OganStatus::Io | OganStatus::Format), "{s:?}");
        assert!(h.is_null());
        assert!(!last_error().is_empty());

        let mut out = 0usize;
        assert_eq!(ogan_swap_model_resolution(ptr::null(), &mut out), OganStatus::NullPointer);
        let mut e = 0.0;
        assert_eq!(ogan_e_tmp([0.0f32].as_ptr(), 1, 0, &mut e), OganStatus::InvalidArgument);
        let nan = [f32::NAN, 0.0];
        assert_ne!(ogan_e_tmp(nan.as_ptr(), 2, 1, &mut e), OganStatus::Ok);
        ogan_swap_model_free(ptr::null_mut());
        ogan_generator_free(ptr::null_mut());
    }
}

#[test]
fn header_compiles_as_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("ogan_lab.h").exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "ogan_lab.h"
int main(void) {
    OganSwapModel *m = NULL;
    double e = 0.0;
    float f[2] = {0.0f, 1.0f};
    if (ogan_swap_model_load("x", &m) != OGAN_STATUS_OK) return 1;
    ogan_swap_model_free(m);
    return ogan_e_tmp(f, 2, 1, &e) == OGAN_STATUS_OK ? 0 : (int)ogan_last_error()[0];
}
"#,
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("skipping C check, no compiler ({cc}): {e}"),
    }
}
