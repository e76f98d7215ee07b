use std::ffi::{CStr, CString};
use std::ptr;

use dcrec_ffi::*;

const SMALL_CONFIG: &str = "embed_dim = 8\nffn_hidden = 16\nt_max = 10\nbatch_size = 32\nmax_epochs = 1\nseed = 3\n";

fn last_error() -> String {
    let p = dcrec_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_dataset() -> *mut DcrecDataset {
    let mut ds = ptr::null_mut();
    let st = unsafe { dcrec_dataset_synthesize(80, 40, 8, 0.5, 1.1, 5, 10, 3, &mut ds) };
    assert_eq!(st, DcrecStatus::Ok);
    ds
}

fn trained(ds: *const DcrecDataset) -> *mut DcrecModel {
    let cfg = CString::new(SMALL_CONFIG).unwrap();
    let mut model = ptr::null_mut();
    let st = unsafe { dcrec_train(ds, cfg.as_ptr(), ptr::null(), &mut model) };
    assert_eq!(st, DcrecStatus::Ok, "{}", last_error());
    model
}

fn catalog(ds: *const DcrecDataset) -> usize {
    let mut n = 0;
    assert_eq!(unsafe { dcrec_dataset_catalog_size(ds, &mut n) }, DcrecStatus::Ok);
    n
}

#[test]
fn train_evaluate_score_round_trip() {
    let ds = small_dataset();
    let n = catalog(ds);
    let mut users = 0;
    assert_eq!(unsafe { dcrec_dataset_user_count(ds, &mut users) }, DcrecStatus::Ok);
    assert!(users > 0 && n > 0);
    let model = trained(ds);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { dcrec_evaluate(model, ds, DCREC_STAGE_TEST, &mut json) }, DcrecStatus::Ok);
    let doc: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
    unsafe { dcrec_string_free(json) };
    assert_eq!(doc["user_count"].as_u64().unwrap() as usize, users);
    assert!(doc["HR"]["10"].as_f64().unwrap() >= doc["HR"]["1"].as_f64().unwrap());

    let history = [1usize, 2, 3];
    let mut scores = vec![0.0; n];
    let st = unsafe { dcrec_score_user(model, history.as_ptr(), history.len(), scores.as_mut_ptr(), n) };
    assert_eq!(st, DcrecStatus::Ok);
    assert!(scores.iter().all(|s| s.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dcrec_model_save(model, path.as_ptr()) }, DcrecStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { dcrec_model_load(path.as_ptr(), ds, &mut loaded) }, DcrecStatus::Ok);
    let mut again = vec![0.0; n];
    let st = unsafe { dcrec_score_user(loaded, history.as_ptr(), history.len(), again.as_mut_ptr(), n) };
    assert_eq!(st, DcrecStatus::Ok);
    assert_eq!(scores, again);

    unsafe {
        dcrec_model_free(loaded);
        dcrec_model_free(model);
        dcrec_dataset_free(ds);
    }
}

#[test]
fn error_codes() {
    let mut out = 0.0;
    assert_eq!(unsafe { dcrec_f2(0.0, 0.4, &mut out) }, DcrecStatus::Ok);
    assert_eq!(out, 1.0);
    assert_eq!(unsafe { dcrec_f1(2.0, 0.4, &mut out) }, DcrecStatus::InvalidArgument);
    assert!(last_error().contains("domain"));
    assert_eq!(unsafe { dcrec_f1(0.5, 0.4, ptr::null_mut()) }, DcrecStatus::NullPointer);

    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { dcrec_dataset_load(ptr::null(), 50, 3, &mut ds) }, DcrecStatus::NullPointer);
    let missing = CString::new("/nonexistent/log.tsv").unwrap();
    assert_eq!(unsafe { dcrec_dataset_load(missing.as_ptr(), 50, 3, &mut ds) }, DcrecStatus::Io);
    assert!(ds.is_null());

    let ds = small_dataset();
    let bad = CString::new("no_such_key = 1\n").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dcrec_train(ds, bad.as_ptr(), ptr::null(), &mut model) }, DcrecStatus::Config);
    assert!(last_error().contains("no_such_key"));
    assert!(model.is_null());
    unsafe { dcrec_dataset_free(ds) };

    // freeing null is a no-op
    unsafe {
        dcrec_dataset_free(ptr::null_mut());
        dcrec_model_free(ptr::null_mut());
        dcrec_string_free(ptr::null_mut());
    }
}

#[test]
fn score_rejects_bad_input() {
    let ds = small_dataset();
    let n = catalog(ds);
    let model = trained(ds);
    let mut scores = vec![0.0; n];
    let pad = [0usize, 1];
    let st = unsafe { dcrec_score_user(model, pad.as_ptr(), pad.len(), scores.as_mut_ptr(), n) };
    assert_eq!(st, DcrecStatus::InvalidArgument);
    let ok = [1usize];
    let st = unsafe { dcrec_score_user(model, ok.as_ptr(), 1, scores.as_mut_ptr(), n - 1) };
    assert_eq!(st, DcrecStatus::InvalidArgument);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { dcrec_evaluate(model, ds, 7, &mut json) }, DcrecStatus::InvalidArgument);

    // a model cannot be evaluated against a different corpus
    let mut other = ptr::null_mut();
    assert_eq!(unsafe { dcrec_dataset_synthesize(80, 41, 8, 0.5, 1.1, 6, 10, 3, &mut other) }, DcrecStatus::Ok);
    assert_eq!(unsafe { dcrec_evaluate(model, other, DCREC_STAGE_TEST, &mut json) }, DcrecStatus::Runtime);
    unsafe {
        dcrec_model_free(model);
        dcrec_dataset_free(ds);
        dcrec_dataset_free(other);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dcrec.h")).unwrap();
    for name in [
        "dcrec_dataset_load",
        "dcrec_dataset_synthesize",
        "dcrec_train",
        "dcrec_model_load",
        "dcrec_evaluate",
        "dcrec_score_user",
        "dcrec_last_error",
        "dcrec_string_free",
        "typedef struct DcrecModel DcrecModel",
        "DCREC_STATUS_NULL_POINTER",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let v = unsafe { CStr::from_ptr(dcrec_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
