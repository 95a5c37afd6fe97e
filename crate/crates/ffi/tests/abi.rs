use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use tcskd::evalkit::{evaluate, predict};
use tcskd::nets::{init_params, Role};
use tcskd::scenegen::{generate_split, save_dataset, GenConfig};
use tcskd_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = tcs_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: CString,
    model: CString,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let g = GenConfig {
        height: 32,
        width: 64,
        ..GenConfig::default()
    };
    let scenes = generate_split(&g, 2, 1, 3).unwrap();
    let d = dir.path().join("val.tcsd");
    save_dataset(&scenes, "", &d).unwrap();
    let m = dir.path().join("s.tcsp");
    init_params(Role::Student, 1).save(&m).unwrap();
    Fixture {
        data: cpath(&d),
        model: cpath(&m),
        _dir: dir,
    }
}

#[test]
fn load_query_predict_evaluate() {
    let f = fixture();
    let mut ds = ptr::null_mut();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(tcs_dataset_load(f.data.as_ptr(), &mut ds), TcsStatus::Ok);
        assert_eq!(tcs_model_load(f.model.as_ptr(), &mut m), TcsStatus::Ok);
        assert_eq!(tcs_dataset_len(ds), 3);
        let (mut h, mut w) = (0, 0);
        assert_eq!(tcs_dataset_grid(ds, &mut h, &mut w), TcsStatus::Ok);
        assert_eq!((h, w), (32, 64));
        assert_eq!(tcs_model_role(m), 2);
        let params = init_params(Role::Student, 1);
        assert_eq!(tcs_model_param_count(m), params.param_count());

        let mut out = vec![0.0; 3 * h * w];
        assert_eq!(
            tcs_predict(m, ds, 1, out.as_mut_ptr(), out.len()),
            TcsStatus::Ok
        );
        let scenes = generate_split(
            &GenConfig {
                height: 32,
                width: 64,
                ..GenConfig::default()
            },
            2,
            1,
            3,
        )
        .unwrap();
        let want = predict(&params, &scenes[1..2], 1).unwrap();
        assert_eq!(out, want[0].values());

        let mut met = TcsMetrics::default();
        assert_eq!(tcs_evaluate(m, ds, &mut met), TcsStatus::Ok);
        let r = evaluate(&params, &scenes, 8).unwrap();
        assert_eq!(
            (met.iou, met.miou, met.ap, met.map),
            (r.iou, r.miou, r.ap, r.map)
        );

        tcs_model_free(m);
        tcs_dataset_free(ds);
    }
}

#[test]
fn argument_errors_set_a_message() {
    let f = fixture();
    let mut ds = ptr::null_mut();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(
            tcs_dataset_load(ptr::null(), &mut ds),
            TcsStatus::NullPointer
        );
        assert!(last_error().contains("null"));
        assert_eq!(
            tcs_dataset_load(f.data.as_ptr(), ptr::null_mut()),
            TcsStatus::NullPointer
        );

        tcs_dataset_load(f.data.as_ptr(), &mut ds);
        tcs_model_load(f.model.as_ptr(), &mut m);
        let mut small = vec![0.0; 10];
        assert_eq!(
            tcs_predict(m, ds, 0, small.as_mut_ptr(), small.len()),
            TcsStatus::Shape
        );
        assert!(last_error().contains("10"));
        let mut out = vec![0.0; 3 * 32 * 64];
        assert_eq!(
            tcs_predict(m, ds, 3, out.as_mut_ptr(), out.len()),
            TcsStatus::InvalidArgument
        );
        assert_eq!(
            tcs_predict(ptr::null(), ds, 0, out.as_mut_ptr(), out.len()),
            TcsStatus::NullPointer
        );
        assert_eq!(tcs_evaluate(m, ds, ptr::null_mut()), TcsStatus::NullPointer);

        // NULL is accepted where documented
        assert_eq!(tcs_dataset_len(ptr::null()), 0);
        assert_eq!(tcs_model_role(ptr::null()), -1);
        assert_eq!(tcs_model_param_count(ptr::null()), 0);
        tcs_dataset_free(ptr::null_mut());
        tcs_model_free(ptr::null_mut());

        tcs_model_free(m);
        tcs_dataset_free(ds);
    }
}

#[test]
fn file_errors_map_to_status_codes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut ds = ptr::null_mut();
    let mut m = ptr::null_mut();
    unsafe {
        let missing = cpath(&dir.path().join("none.tcsd"));
        assert_eq!(tcs_dataset_load(missing.as_ptr(), &mut ds), TcsStatus::Io);
        assert!(ds.is_null());

        let bad = dir.path().join("bad.tcsp");
        let mut bytes = std::fs::read(f.model.to_str().unwrap()).unwrap();
        let n = bytes.len();
        bytes[n / 3] ^= 4;
        std::fs::write(&bad, bytes).unwrap();
        assert_eq!(
            tcs_model_load(cpath(&bad).as_ptr(), &mut m),
            TcsStatus::Corrupt
        );
        assert!(m.is_null());
        assert!(!last_error().is_empty());

        // a dataset is not a model
        assert_eq!(tcs_model_load(f.data.as_ptr(), &mut m), TcsStatus::Corrupt);
    }
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/tcskd.h"))
        .unwrap();
    for name in [
        "tcs_last_error_message",
        "tcs_dataset_load",
        "tcs_dataset_len",
        "tcs_dataset_grid",
        "tcs_dataset_free",
        "tcs_model_load",
        "tcs_model_role",
        "tcs_model_param_count",
        "tcs_model_free",
        "tcs_predict",
        "tcs_evaluate",
        "TCS_STATUS_CORRUPT",
        "TcsMetrics",
    ] {
        assert!(h.contains(name), "{name}");
    }
}
