use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use newton_cnn_ffi::*;

const TINY: &str = "input a=6 b=6 d=2\nconv h=3 out=3 pool=2\nfc out=4\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(ncnn_last_error()) }.to_string_lossy().into_owned()
}

fn model(text: &str) -> *mut NcnnModel {
    let c = CString::new(text).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ncnn_model_new(c.as_ptr(), &mut m) }, NcnnStatus::Ok);
    m
}

fn sample(len: usize, seed: u64) -> Vec<f64> {
    // Small deterministic generator; the values only need to be varied.
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..len)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

#[test]
fn counts_and_init_match_the_core_crate() {
    let m = model(TINY);
    let mut n = 0;
    let mut k = 0;
    unsafe {
        assert_eq!(ncnn_param_count(m, &mut n), NcnnStatus::Ok);
        assert_eq!(ncnn_num_classes(m, &mut k), NcnnStatus::Ok);
    }
    // 3·(3·3·2 + 1) + 4·(2·2·3 + 1)
    assert_eq!(n, 57 + 52);
    assert_eq!(k, 4);
    let mut theta = vec![0.0; n];
    assert_eq!(unsafe { ncnn_init_params(m, 7, theta.as_mut_ptr(), n) }, NcnnStatus::Ok);
    let cfg = newton_cnn::ModelConfig::parse(TINY).unwrap();
    assert_eq!(theta, newton_cnn::config::init_params(&cfg, 7).unwrap().into_vec());
    unsafe { ncnn_model_free(m) };
}

#[test]
fn gradient_is_consistent_with_objective() {
    let m = model(TINY);
    let n = 109;
    let l = 3;
    let mut theta = vec![0.0; n];
    unsafe { ncnn_init_params(m, 1, theta.as_mut_ptr(), n) };
    let images = sample(l * 72, 3);
    let labels = [0u32, 3, 1];
    let c = 0.5;
    let (mut f, mut f2) = (0.0, 0.0);
    let mut grad = vec![0.0; n];
    unsafe {
        let st = ncnn_objective(m, theta.as_ptr(), n, images.as_ptr(), labels.as_ptr(), l, c, &mut f);
        assert_eq!(st, NcnnStatus::Ok);
        let st = ncnn_gradient(
            m, theta.as_ptr(), n, images.as_ptr(), labels.as_ptr(), l, c, &mut f2, grad.as_mut_ptr(),
        );
        assert_eq!(st, NcnnStatus::Ok);
    }
    assert_eq!(f, f2);
    let dir = sample(n, 9);
    let eps = 1e-6;
    let at = |s: f64| {
        let t: Vec<f64> = theta.iter().zip(&dir).map(|(a, d)| a + s * eps * d).collect();
        let mut v = 0.0;
        unsafe { ncnn_objective(m, t.as_ptr(), n, images.as_ptr(), labels.as_ptr(), l, c, &mut v) };
        v
    };
    let fd = (at(1.0) - at(-1.0)) / (2.0 * eps);
    let an: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
    unsafe { ncnn_model_free(m) };
}

#[test]
fn gauss_newton_handle_is_symmetric_and_damped() {
    let m = model(TINY);
    let n = 109;
    let l = 4;
    let mut theta = vec![0.0; n];
    unsafe { ncnn_init_params(m, 2, theta.as_mut_ptr(), n) };
    let images = sample(l * 72, 5);
    let (c, lambda) = (0.25, 0.5);
    let mut gn = ptr::null_mut();
    assert_eq!(
        unsafe { ncnn_gn_new(m, theta.as_ptr(), n, images.as_ptr(), l, c, lambda, &mut gn) },
        NcnnStatus::Ok
    );
    let (v, w) = (sample(n, 11), sample(n, 12));
    let (mut gv, mut gw) = (vec![0.0; n], vec![0.0; n]);
    unsafe {
        assert_eq!(ncnn_gn_matvec(gn, v.as_ptr(), gv.as_mut_ptr(), n), NcnnStatus::Ok);
        assert_eq!(ncnn_gn_matvec(gn, w.as_ptr(), gw.as_mut_ptr(), n), NcnnStatus::Ok);
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (a, b) = (dot(&gv, &w), dot(&v, &gw));
    assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()));
    assert!(dot(&v, &gv) >= (1.0 / c + lambda) * dot(&v, &v) * (1.0 - 1e-10));

    // Changing λ shifts the product by exactly Δλ·v.
    let mut gv2 = vec![0.0; n];
    unsafe {
        assert_eq!(ncnn_gn_set_lambda(gn, lambda + 1.0), NcnnStatus::Ok);
        ncnn_gn_matvec(gn, v.as_ptr(), gv2.as_mut_ptr(), n);
    }
    for i in 0..n {
        assert!((gv2[i] - gv[i] - v[i]).abs() <= 1e-9 * gv[i].abs().max(1.0));
    }
    unsafe {
        ncnn_gn_free(gn);
        ncnn_model_free(m);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let bad = CString::new("input a=4 b=4 d=1\nconv h=5 out=2\nfc out=2\n").unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { ncnn_model_new(bad.as_ptr(), &mut m) };
    assert_eq!(st, NcnnStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("line 2"), "{}", last_error());

    assert_eq!(unsafe { ncnn_model_new(ptr::null(), &mut m) }, NcnnStatus::NullPointer);
    let mut n = 0;
    assert_eq!(unsafe { ncnn_param_count(ptr::null(), &mut n) }, NcnnStatus::NullPointer);

    let m = model(TINY);
    let mut theta = vec![0.0; 10];
    assert_eq!(unsafe { ncnn_init_params(m, 0, theta.as_mut_ptr(), 10) }, NcnnStatus::Dimension);
    assert!(last_error().contains("109"));

    let theta = vec![0.0; 109];
    let images = sample(72, 1);
    let labels = [9u32];
    let mut f = 0.0;
    let st = unsafe { ncnn_objective(m, theta.as_ptr(), 109, images.as_ptr(), labels.as_ptr(), 1, 1.0, &mut f) };
    assert_eq!(st, NcnnStatus::Data);
    assert_eq!(unsafe { ncnn_param_count(m, &mut n) }, NcnnStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe {
        ncnn_model_free(m);
        ncnn_model_free(ptr::null_mut());
        ncnn_gn_free(ptr::null_mut());
    }
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps/
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib_dir = target_dir();
    let lib = lib_dir.join("libnewton_cnn_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let out = tempfile_path("ffi_smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&out)
        .status()
        .expect("a C compiler is available");
    assert!(status.success());
    let run = Command::new(&out).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains("params 109"), "{stdout}");
    let _ = std::fs::remove_file(out);
}

fn tempfile_path(stem: &str) -> PathBuf {
    std::env::temp_dir().join(format!("{stem}_{}", std::process::id()))
}
