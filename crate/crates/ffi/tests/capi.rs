use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dtameta_ffi::*;

const CSV: &str = include_str!("../../core/data/example_synthetic.csv");

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = dta_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn parse(csv: &str) -> *mut DtaDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { dta_dataset_parse(c(csv).as_ptr(), &mut ds) }, DtaStatus::Ok);
    ds
}

#[test]
fn bad_input_reports_status_and_message() {
    let mut ds = ptr::null_mut();
    let st = unsafe { dta_dataset_parse(c("author,year,tp,fp,fn,tn\nA,2000,x,1,1,1\n").as_ptr(), &mut ds) };
    assert_eq!(st, DtaStatus::InvalidData);
    assert!(ds.is_null());
    assert!(last_error().contains("row 1"));

    assert_eq!(unsafe { dta_dataset_parse(ptr::null(), &mut ds) }, DtaStatus::NullPointer);
    assert_eq!(unsafe { dta_dataset_len(ptr::null()) }, 0);
    unsafe { dta_dataset_free(ptr::null_mut()) };
    unsafe { dta_string_free(ptr::null_mut()) };

    let ds = parse(CSV);
    let mut res = ptr::null_mut();
    let st = unsafe { dta_analysis_run(ds, c(r#"{"model":"bivariate","sampler":{"chains":0}}"#).as_ptr(), &mut res) };
    assert_eq!(st, DtaStatus::InvalidConfig);
    let st = unsafe { dta_analysis_run(ds, c("{").as_ptr(), &mut res) };
    assert_eq!(st, DtaStatus::InvalidConfig);
    assert!(res.is_null());
    unsafe { dta_dataset_free(ds) };
}

#[test]
fn run_query_and_render() {
    let ds = parse(CSV);
    assert_eq!(unsafe { dta_dataset_len(ds) }, 14);
    let cfg = c(r#"{"model":"bivariate","sampler":{"chains":2,"warmup":300,"samples":300,"seed":9}}"#);
    let mut res = ptr::null_mut();
    assert_eq!(unsafe { dta_analysis_run(ds, cfg.as_ptr(), &mut res) }, DtaStatus::Ok);

    let mut se = f64::NAN;
    assert_eq!(unsafe { dta_result_median(res, ptr::null(), c("se").as_ptr(), &mut se) }, DtaStatus::Ok);
    assert!(se > 0.5 && se < 1.0, "{se}");
    let st = unsafe { dta_result_median(res, ptr::null(), c("nonsense").as_ptr(), &mut se) };
    assert_eq!(st, DtaStatus::NotFound);
    let st = unsafe { dta_result_median(res, c("x").as_ptr(), c("se").as_ptr(), &mut se) };
    assert_eq!(st, DtaStatus::NotFound);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { dta_result_json(res, &mut json) }, DtaStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { dta_result_parse(json, &mut again) }, DtaStatus::Ok);
    let mut json2 = ptr::null_mut();
    assert_eq!(unsafe { dta_result_json(again, &mut json2) }, DtaStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(json2) }.to_str().unwrap(), text);
    unsafe {
        dta_string_free(json);
        dta_string_free(json2);
        dta_result_free(again);
    }

    let mut svg = ptr::null_mut();
    assert_eq!(unsafe { dta_render(ds, res, c("sroc").as_ptr(), c("svg").as_ptr(), &mut svg) }, DtaStatus::Ok);
    assert!(unsafe { CStr::from_ptr(svg) }.to_str().unwrap().contains("<polyline"));
    unsafe { dta_string_free(svg) };
    let st = unsafe { dta_render(ds, res, c("sroc").as_ptr(), c("png").as_ptr(), &mut svg) };
    assert_eq!(st, DtaStatus::InvalidConfig);
    let st = unsafe { dta_render(ds, ptr::null(), c("sroc").as_ptr(), c("svg").as_ptr(), &mut svg) };
    assert_eq!(st, DtaStatus::NullPointer);

    unsafe {
        dta_result_free(res);
        dta_dataset_free(ds);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dtameta.h")).unwrap();
    for f in [
        "dta_last_error", "dta_version", "dta_string_free", "dta_dataset_parse", "dta_dataset_len", "dta_dataset_free",
        "dta_analysis_run", "dta_result_parse", "dta_result_json", "dta_result_median", "dta_result_passes",
        "dta_result_free", "dta_render",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct DtaDataset DtaDataset;"));
}

/// Directory holding the static library built alongside this test binary.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let lib = lib_dir().join("libdtameta_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out = Command::new(&cc)
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8(run.stdout).unwrap().trim(), env!("CARGO_PKG_VERSION"));
}
