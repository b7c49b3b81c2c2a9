use std::ffi::{c_char, CStr, CString};
use std::ptr;

use last_ffi::*;

const TOY: &str = r#"{
  "seed": 3,
  "backbone": {"depth": 4, "width": 8, "heads": 2, "patch_size": 4, "image_size": 8},
  "side": {"gap": 2, "stack": 2, "rank": 4, "heads": 2, "num_classes": 2},
  "train": {"lr": 0.01, "epochs": 2, "batch_size": 4},
  "data": {"num_classes": 2, "train": 12, "eval": 4}
}"#;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn error() -> String {
    let p = last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    last_string_free(s);
    out
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(last_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn end_to_end_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = c(TOY);
    let cache_dir = c(dir.path().join("cache").to_str().unwrap());
    unsafe {
        let mut bb = ptr::null_mut();
        assert_eq!(last_backbone_init(cfg.as_ptr(), 3, &mut bb), LastStatus::Ok);
        assert!(last_error_message().is_null());
        let mut ds = ptr::null_mut();
        assert_eq!(last_dataset_generate(cfg.as_ptr(), 3, &mut ds), LastStatus::Ok);
        let mut n = 0;
        assert_eq!(last_dataset_len(ds, &mut n), LastStatus::Ok);
        assert_eq!(n, 16);

        let mut fresh = -1;
        assert_eq!(
            last_cache_extract(ds, bb, 1, cache_dir.as_ptr(), &mut fresh),
            LastStatus::Ok
        );
        assert_eq!(fresh, 0);
        assert_eq!(
            last_cache_extract(ds, bb, 1, cache_dir.as_ptr(), &mut fresh),
            LastStatus::Ok
        );
        assert_eq!(fresh, 1);
        let mut forwards = 0;
        assert_eq!(last_backbone_forward_count(bb, &mut forwards), LastStatus::Ok);
        assert_eq!(forwards, 16);

        let mut sum = ptr::null_mut();
        assert_eq!(last_backbone_checksum(bb, &mut sum), LastStatus::Ok);
        assert_eq!(take(sum).len(), 64);

        let mut cache = ptr::null_mut();
        assert_eq!(last_cache_open(cache_dir.as_ptr(), &mut cache), LastStatus::Ok);
        assert_eq!(last_cache_len(cache, &mut n), LastStatus::Ok);
        assert_eq!(n, 16);

        let out = c(dir.path().to_str().unwrap());
        let id = c("ffi");
        let (mut side, mut log) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(
            last_train(cache, cfg.as_ptr(), id.as_ptr(), out.as_ptr(), &mut side, &mut log),
            LastStatus::Ok
        );
        assert_eq!(take(log).lines().count(), 2);
        assert!(dir.path().join("ffi.lasts").exists());

        let mut params = 0;
        assert_eq!(last_side_param_count(side, false, &mut params), LastStatus::Ok);
        let mut fresh_side = ptr::null_mut();
        assert_eq!(last_side_init(cfg.as_ptr(), 3, &mut fresh_side), LastStatus::Ok);
        let mut fresh_params = 0;
        last_side_param_count(fresh_side, false, &mut fresh_params);
        assert_eq!(params, fresh_params);

        let weights = c(dir.path().join("ffi.lasts").to_str().unwrap());
        let mut loaded = ptr::null_mut();
        assert_eq!(last_side_load(weights.as_ptr(), &mut loaded), LastStatus::Ok);
        let mut with_head = 0;
        last_side_param_count(loaded, true, &mut with_head);
        assert_eq!(with_head, params + 2 * 8 + 8 * 2 + 2);

        last_side_free(loaded);
        last_side_free(fresh_side);
        last_side_free(side);
        last_cache_free(cache);
        last_dataset_free(ds);
        last_backbone_free(bb);
    }
}

#[test]
fn backbone_and_dataset_roundtrip_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = c(TOY);
    let w = c(dir.path().join("w.lastw").to_str().unwrap());
    let d = c(dir.path().join("data").to_str().unwrap());
    unsafe {
        let (mut bb, mut back) = (ptr::null_mut(), ptr::null_mut());
        last_backbone_init(cfg.as_ptr(), 9, &mut bb);
        assert_eq!(last_backbone_save(bb, w.as_ptr()), LastStatus::Ok);
        assert_eq!(last_backbone_load(w.as_ptr(), &mut back), LastStatus::Ok);
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        last_backbone_checksum(bb, &mut a);
        last_backbone_checksum(back, &mut b);
        assert_eq!(take(a), take(b));

        let (mut ds, mut ds2) = (ptr::null_mut(), ptr::null_mut());
        last_dataset_generate(cfg.as_ptr(), 9, &mut ds);
        assert_eq!(last_dataset_save(ds, d.as_ptr()), LastStatus::Ok);
        assert_eq!(last_dataset_load(d.as_ptr(), &mut ds2), LastStatus::Ok);
        let mut n = 0;
        last_dataset_len(ds2, &mut n);
        assert_eq!(n, 16);
        last_dataset_free(ds2);
        last_dataset_free(ds);
        last_backbone_free(back);
        last_backbone_free(bb);
    }
}

#[test]
fn error_codes_and_messages() {
    unsafe {
        let mut bb = ptr::null_mut();
        let bad = c(r#"{"side": {"rnak": 1}}"#);
        assert_eq!(last_backbone_init(bad.as_ptr(), 0, &mut bb), LastStatus::Config);
        assert!(error().contains("rnak"));
        assert!(bb.is_null());

        let missing = c("/nonexistent/w.lastw");
        assert_eq!(last_backbone_load(missing.as_ptr(), &mut bb), LastStatus::Io);
        assert!(error().contains("/nonexistent/w.lastw"));

        assert_eq!(last_backbone_load(ptr::null(), &mut bb), LastStatus::InvalidArgument);
        assert_eq!(
            last_backbone_init(ptr::null(), 0, ptr::null_mut()),
            LastStatus::InvalidArgument
        );
        let mut n = 0;
        assert_eq!(last_cache_len(ptr::null(), &mut n), LastStatus::InvalidArgument);
        assert!(error().contains("NULL"));

        let not_utf8 = [0xffu8 as c_char, 0];
        assert_eq!(
            last_backbone_load(not_utf8.as_ptr(), &mut bb),
            LastStatus::InvalidArgument
        );

        let mut json = ptr::null_mut();
        let lora = c("lora");
        assert_eq!(
            last_estimate_memory(ptr::null(), lora.as_ptr(), &mut json),
            LastStatus::Config
        );
        assert!(error().contains("linear_probe"));

        // a success clears the message
        let last = c("last");
        assert_eq!(
            last_estimate_memory(ptr::null(), last.as_ptr(), &mut json),
            LastStatus::Ok
        );
        assert!(last_error_message().is_null());
        let v: serde_json::Value = serde_json::from_str(&take(json)).unwrap();
        assert_eq!(v["strategy"], "last");

        last_backbone_free(ptr::null_mut());
        last_string_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_per_thread() {
    unsafe {
        let mut bb = ptr::null_mut();
        let missing = c("/nonexistent/w.lastw");
        assert_eq!(last_backbone_load(missing.as_ptr(), &mut bb), LastStatus::Io);
    }
    std::thread::spawn(|| assert!(last_error_message().is_null()))
        .join()
        .unwrap();
    assert!(!last_error_message().is_null());
}

#[test]
fn numeric_failure_maps_to_status_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = c(&TOY.replace(r#""lr": 0.01"#, r#""lr": 1e200"#));
    let cache_dir = c(dir.path().to_str().unwrap());
    unsafe {
        let (mut bb, mut ds, mut cache) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
        last_backbone_init(cfg.as_ptr(), 1, &mut bb);
        last_dataset_generate(cfg.as_ptr(), 1, &mut ds);
        last_cache_extract(ds, bb, 1, cache_dir.as_ptr(), ptr::null_mut());
        last_cache_open(cache_dir.as_ptr(), &mut cache);
        let status = last_train(
            cache,
            cfg.as_ptr(),
            ptr::null(),
            ptr::null(),
            ptr::null_mut(),
            ptr::null_mut(),
        );
        assert_eq!(status, LastStatus::Numeric);
        assert!(error().contains("non-finite"));
        last_cache_free(cache);
        last_dataset_free(ds);
        last_backbone_free(bb);
    }
}
