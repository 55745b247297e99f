use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;
use std::sync::OnceLock;

use deepflow_ffi::*;

const CONFIG: &str = r#"{
  "model": {"k": 2, "depth_per_branch": 1, "hidden": 16, "heads": 2, "freq_dim": 16},
  "train": {"steps": 4, "batch_size": 16, "log_interval": 2, "lr": 0.001},
  "sampler": {"steps": 12},
  "data": {"name": "eight_gaussians", "n": 256},
  "seed": 5
}"#;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { df_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

/// A run trained once through `df_train` and shared by the tests.
fn trained() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let cfg = CString::new(CONFIG).unwrap();
        let out = CString::new(dir.to_str().unwrap()).unwrap();
        assert_eq!(unsafe { df_train(cfg.as_ptr(), out.as_ptr()) }, DfStatus::Ok);
        assert!(dir.join("metrics.csv").exists());
        dir.join("ckpt_final")
    })
}

struct Handle(*mut DfModel);

impl Drop for Handle {
    fn drop(&mut self) {
        unsafe { df_model_free(self.0) }
    }
}

fn load(path: &Path) -> Result<Handle, DfStatus> {
    let p = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    match unsafe { df_model_load(p.as_ptr(), &mut h) } {
        DfStatus::Ok => Ok(Handle(h)),
        s => {
            assert!(h.is_null());
            Err(s)
        }
    }
}

fn options(h: &Handle) -> DfSamplerOptions {
    let mut o = DfSamplerOptions {
        kind: DfSamplerKind::Sde,
        steps: 0,
        cfg_scale: 0.0,
        seed: 0,
    };
    assert_eq!(unsafe { df_model_sampler_options(h.0, &mut o) }, DfStatus::Ok);
    o
}

fn draw(h: &Handle, o: &DfSamplerOptions, n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; n * unsafe { df_model_sample_numel(h.0) }];
    let s = unsafe { df_sample(h.0, o, n, ptr::null(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, DfStatus::Ok, "{}", last_error());
    out
}

#[test]
fn handle_queries() {
    let h = load(trained()).unwrap();
    unsafe {
        assert_eq!(df_model_sample_numel(h.0), 2);
        assert_eq!(df_model_num_classes(h.0), 8);
        assert_eq!(df_model_branches(h.0), 2);
        assert_eq!(df_model_sample_numel(ptr::null()), 0);
    }
    let o = options(&h);
    assert_eq!(o.steps, 12);
    assert_eq!(o.kind, DfSamplerKind::Sde);
    assert_eq!(o.seed, 5);
    let v = unsafe { CStr::from_ptr(df_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn sampling_is_deterministic_and_finite() {
    let h = load(trained()).unwrap();
    let mut o = options(&h);
    o.kind = DfSamplerKind::Ode;
    let a = draw(&h, &o, 64);
    let b = draw(&h, &o, 64);
    assert_eq!(a, b);
    assert!(a.iter().all(|x| x.is_finite()));
    o.seed += 1;
    assert_ne!(draw(&h, &o, 64), a);
}

#[test]
fn explicit_classes() {
    let h = load(trained()).unwrap();
    let o = options(&h);
    let classes = vec![3u32; 10];
    let mut out = vec![0.0; 20];
    let s = unsafe { df_sample(h.0, &o, 10, classes.as_ptr(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, DfStatus::Ok);
    let bad = vec![8u32; 10];
    let s = unsafe { df_sample(h.0, &o, 10, bad.as_ptr(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, DfStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));
}

#[test]
fn error_codes() {
    let h = load(trained()).unwrap();
    let o = options(&h);
    let mut out = vec![0.0; 10];
    let s = unsafe { df_sample(h.0, &o, 10, ptr::null(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, DfStatus::BufferTooSmall);
    assert!(last_error().contains("20 needed"));
    let s = unsafe { df_sample(ptr::null(), &o, 1, ptr::null(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, DfStatus::NullPointer);
    let mut zero = o;
    zero.steps = 0;
    let s = unsafe { df_sample(h.0, &zero, 1, ptr::null(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, DfStatus::Config);

    assert_eq!(load(Path::new("/nonexistent/ckpt")).err(), Some(DfStatus::Io));
    let bad = CString::new("{\"model\": {\"k\": 2,}").unwrap();
    assert_eq!(unsafe { df_train(bad.as_ptr(), ptr::null()) }, DfStatus::Config);
    assert!(last_error().contains("at byte"));
    assert_eq!(unsafe { df_train(ptr::null(), ptr::null()) }, DfStatus::NullPointer);
}

#[test]
fn version_mismatch_is_a_checkpoint_error() {
    let mut bytes = std::fs::read(trained()).unwrap();
    bytes[8] = 99;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    std::fs::write(&path, bytes).unwrap();
    assert_eq!(load(&path).err(), Some(DfStatus::Checkpoint));
    assert!(last_error().contains("version"));
}

#[test]
fn truncated_error_buffer() {
    let _ = load(Path::new("/nonexistent/ckpt"));
    let full = last_error();
    let mut buf = [1 as c_char; 6];
    let n = unsafe { df_last_error(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, full.len());
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), &full[..5]);
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "deepflow.h"

int main(int argc, char **argv) {
    DfModel *m = NULL;
    if (df_model_load(argv[1], &m) != DF_STATUS_OK) {
        char buf[256];
        df_last_error(buf, sizeof buf);
        fprintf(stderr, "%s\n", buf);
        return 1;
    }
    DfSamplerOptions o;
    df_model_sampler_options(m, &o);
    o.kind = DF_SAMPLER_KIND_ODE;
    double out[8];
    DfStatus s = df_sample(m, &o, 4, NULL, out, 8);
    df_model_free(m);
    if (s != DF_STATUS_OK) return 2;
    for (int i = 0; i < 8; i++) printf("%.17g\n", out[i]);
    return 0;
}
"#;

/// The generated header compiles and links against the static library.
#[test]
fn c_program_links_against_header() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    let staticlib = lib_dir.join("libdeepflow_ffi.a");
    if !staticlib.exists() {
        eprintln!("{} not built; skipping", staticlib.display());
        return;
    }
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).arg(trained()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let from_c: Vec<f64> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    let h = load(trained()).unwrap();
    let mut o = options(&h);
    o.kind = DfSamplerKind::Ode;
    assert_eq!(from_c, draw(&h, &o, 4));
}
