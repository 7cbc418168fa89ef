use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ygan::autograd::Tensor;
use ygan::model::ModelConfig;
use ygan::scoring::{score_batch, ScoreMethod};
use ygan::training::{save_checkpoint, Checkpoint, TrainConfig};
use ygan_ffi::*;

fn config() -> ModelConfig {
    ModelConfig::new(32, 1, 6, 4, 5, 4)
}

fn write_checkpoint<T: ygan::autograd::Scalar>(dir: &Path, name: &str) -> (PathBuf, Checkpoint<T>) {
    let train = TrainConfig {
        seed: 11,
        ..TrainConfig::default()
    };
    let ckpt = Checkpoint::<T>::new(&config(), &train).unwrap();
    let path = dir.join(name);
    save_checkpoint(&ckpt, &path).unwrap();
    (path, ckpt)
}

fn pixels(n: usize) -> Vec<f32> {
    (0..n * 32 * 32).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect()
}

fn load(path: &Path) -> *mut YganModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { ygan_model_load(c.as_ptr(), &mut model) }, YganStatus::Ok);
    assert!(!model.is_null());
    model
}

fn last_error() -> String {
    let p = ygan_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn scores_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ckpt) = write_checkpoint::<f64>(dir.path(), "m.ckpt");
    let model = load(&path);

    let mut info = YganModelInfo::default();
    assert_eq!(unsafe { ygan_model_info(model, &mut info) }, YganStatus::Ok);
    assert_eq!((info.image_size, info.channels, info.latent_dim, info.num_classes), (32, 1, 6, 4));
    assert!(info.has_classifier);

    let n = 5;
    let px = pixels(n);
    let x = Tensor::from_vec(&[n, 1, 32, 32], px.iter().map(|&v| v as f64).collect()).unwrap();
    for name in ["s", "s_c", "s_x", "s_z", "s_zs"] {
        let method = CString::new(name).unwrap();
        let mut out = vec![0.0; n];
        let status = unsafe { ygan_model_score(model, method.as_ptr(), px.as_ptr(), n, out.as_mut_ptr()) };
        assert_eq!(status, YganStatus::Ok, "{name}");
        let expect = score_batch(&ckpt.bundle, &x, &ScoreMethod::simple(name.parse().unwrap()).unwrap()).unwrap();
        assert_eq!(out, expect, "{name}");
    }

    let mut codes = vec![0.0; n * 6];
    assert_eq!(unsafe { ygan_model_encode(model, px.as_ptr(), n, codes.as_mut_ptr()) }, YganStatus::Ok);
    assert_eq!(codes, ckpt.bundle.encode_semantic(&x).unwrap().to_f64_vec());
    unsafe { ygan_model_free(model) };
}

#[test]
fn single_precision_checkpoints_and_large_batches() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ckpt) = write_checkpoint::<f32>(dir.path(), "m32.ckpt");
    let model = load(&path);
    // More images than one internal chunk.
    let n = 300;
    let px = pixels(n);
    let mut out = vec![0.0; n];
    let s = CString::new("s").unwrap();
    assert_eq!(unsafe { ygan_model_score(model, s.as_ptr(), px.as_ptr(), n, out.as_mut_ptr()) }, YganStatus::Ok);
    let x = Tensor::from_vec(&[2, 1, 32, 32], px[..2 * 1024].to_vec()).unwrap();
    let expect = score_batch(&ckpt.bundle, &x, &ScoreMethod::simple("s".parse().unwrap()).unwrap()).unwrap();
    assert_eq!(&out[..2], &expect[..]);
    assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    unsafe { ygan_model_free(model) };
}

#[test]
fn failures_report_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_checkpoint::<f64>(dir.path(), "m.ckpt");
    let model = load(&path);
    let px = pixels(1);
    let mut out = [0.0];

    let bad = CString::new("bogus").unwrap();
    assert_eq!(unsafe { ygan_model_score(model, bad.as_ptr(), px.as_ptr(), 1, out.as_mut_ptr()) }, YganStatus::Config);
    assert!(last_error().contains("bogus"));

    let proto = CString::new("s_zp").unwrap();
    assert_eq!(unsafe { ygan_model_score(model, proto.as_ptr(), px.as_ptr(), 1, out.as_mut_ptr()) }, YganStatus::Config);

    let s = CString::new("s").unwrap();
    assert_eq!(unsafe { ygan_model_score(model, s.as_ptr(), ptr::null(), 1, out.as_mut_ptr()) }, YganStatus::NullPointer);
    assert_eq!(unsafe { ygan_model_score(ptr::null(), s.as_ptr(), px.as_ptr(), 1, out.as_mut_ptr()) }, YganStatus::NullPointer);

    // A success clears the previous message.
    assert_eq!(unsafe { ygan_model_score(model, s.as_ptr(), px.as_ptr(), 1, out.as_mut_ptr()) }, YganStatus::Ok);
    assert!(ygan_last_error().is_null());
    unsafe { ygan_model_free(model) };
    unsafe { ygan_model_free(ptr::null_mut()) };

    let mut handle = ptr::null_mut();
    let missing = CString::new(dir.path().join("absent.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ygan_model_load(missing.as_ptr(), &mut handle) }, YganStatus::Io);
    assert!(handle.is_null());

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ygan_model_load(junk.as_ptr(), &mut handle) }, YganStatus::Checkpoint);
    assert!(last_error().contains("checkpoint"));
    assert_eq!(unsafe { ygan_model_load(junk.as_ptr(), ptr::null_mut()) }, YganStatus::NullPointer);
}

#[test]
fn metrics_through_the_c_interface() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [0u8, 0, 1, 1];
    let mut area = 0.0;
    assert_eq!(unsafe { ygan_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut area) }, YganStatus::Ok);
    assert_eq!(area, 0.75);

    let (mut t, mut e) = (0.0, 0.0);
    assert_eq!(unsafe { ygan_eer(scores.as_ptr(), labels.as_ptr(), 4, &mut t, &mut e) }, YganStatus::Ok);
    assert!((e - 0.5).abs() < 1e-12);

    let one_class = [1u8; 4];
    assert_eq!(unsafe { ygan_auc(scores.as_ptr(), one_class.as_ptr(), 4, &mut area) }, YganStatus::Protocol);
    let bad = [0u8, 2, 1, 1];
    assert_eq!(unsafe { ygan_auc(scores.as_ptr(), bad.as_ptr(), 4, &mut area) }, YganStatus::InvalidArgument);
    assert_eq!(unsafe { ygan_auc(scores.as_ptr(), labels.as_ptr(), 4, ptr::null_mut()) }, YganStatus::NullPointer);

    let version = unsafe { CStr::from_ptr(ygan_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ygan.h")).unwrap();
    for name in [
        "ygan_version",
        "ygan_last_error",
        "ygan_model_load",
        "ygan_model_free",
        "ygan_model_info",
        "ygan_model_score",
        "ygan_model_encode",
        "ygan_auc",
        "ygan_eer",
        "typedef struct YganModel YganModel",
        "YGAN_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

/// Directory holding the shared library built alongside this test binary.
fn library_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_shared_library() {
    let lib_dir = library_dir();
    if !lib_dir.join("libygan_ffi.so").exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or shared library in {}", lib_dir.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let (path, ckpt) = write_checkpoint::<f32>(dir.path(), "m.ckpt");
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .args(["-lygan_ffi", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).arg(&path).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "exit {:?}: {stdout} {}", out.status, String::from_utf8_lossy(&out.stderr));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.last(), Some(&"ok"));

    // Same pixels as the C program, scored in Rust.
    let px: Vec<f32> = (0..3 * 1024).map(|i| ((i % 7) as f64 / 3.0 - 1.0) as f32).collect();
    let x = Tensor::from_vec(&[3, 1, 32, 32], px).unwrap();
    let expect = score_batch(&ckpt.bundle, &x, &ScoreMethod::simple("s".parse().unwrap()).unwrap()).unwrap();
    for (line, e) in lines.iter().zip(&expect) {
        assert_eq!(line.parse::<f64>().unwrap(), *e);
    }
}
