use std::ffi::{CStr, CString};
use std::ptr;

use lrseg_ffi::*;

fn last_error() -> String {
    let p = lrseg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(lrseg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn video_roundtrip_through_file() {
    let data: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 / 24.0).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("v.lrse").to_str().unwrap()).unwrap();
    unsafe {
        let mut v = ptr::null_mut();
        assert_eq!(lrseg_video_from_data(data.as_ptr(), 2, 3, 4, 25.0, &mut v), LrsegStatus::Ok);
        assert_eq!(lrseg_video_save(v, path.as_ptr()), LrsegStatus::Ok);
        lrseg_video_free(v);

        let mut back = ptr::null_mut();
        assert_eq!(lrseg_video_load(path.as_ptr(), &mut back), LrsegStatus::Ok);
        let (mut t, mut h, mut w) = (0, 0, 0);
        assert_eq!(lrseg_video_dims(back, &mut t, &mut h, &mut w), LrsegStatus::Ok);
        assert_eq!((t, h, w), (2, 3, 4));
        let mut out = vec![0.0; 24];
        assert_eq!(lrseg_video_copy_data(back, out.as_mut_ptr(), 24), LrsegStatus::Ok);
        for (a, b) in out.iter().zip(&data) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(lrseg_video_copy_data(back, out.as_mut_ptr(), 23), LrsegStatus::Dimension);
        lrseg_video_free(back);
    }
}

#[test]
fn null_and_bad_arguments_report_status_and_message() {
    unsafe {
        let mut v = ptr::null_mut();
        assert_eq!(lrseg_video_load(ptr::null(), &mut v), LrsegStatus::NullPointer);
        assert!(last_error().contains("path"));
        assert!(v.is_null());

        let missing = CString::new("/nonexistent/dir/x.lrse").unwrap();
        assert_eq!(lrseg_video_load(missing.as_ptr(), &mut v), LrsegStatus::Io);

        let data = [f64::NAN; 4];
        assert_ne!(lrseg_video_from_data(data.as_ptr(), 1, 2, 2, 25.0, &mut v), LrsegStatus::Ok);

        let mut summary = LrsegRunSummary::default();
        let bad = CString::new("train.epochs = lots").unwrap();
        assert_eq!(
            lrseg_pipeline_run(bad.as_ptr(), ptr::null(), 0, &mut summary, ptr::null_mut()),
            LrsegStatus::Config
        );
        assert!(last_error().contains("train.epochs"));

        lrseg_video_free(ptr::null_mut());
        lrseg_mask_free(ptr::null_mut());
    }
}

#[test]
fn success_clears_last_error() {
    unsafe {
        let mut v = ptr::null_mut();
        lrseg_video_load(ptr::null(), &mut v);
        assert!(!lrseg_last_error_message().is_null());
        let data = [0.5; 4];
        assert_eq!(lrseg_video_from_data(data.as_ptr(), 1, 2, 2, 25.0, &mut v), LrsegStatus::Ok);
        assert!(lrseg_last_error_message().is_null());
        lrseg_video_free(v);
    }
}

#[test]
fn byte_metrics() {
    let m = [1u8, 1, 0, 0];
    let gs = [1u8, 0, 1, 0];
    let mut out = 0.0;
    unsafe {
        assert_eq!(lrseg_dice(m.as_ptr(), gs.as_ptr(), 4, &mut out), LrsegStatus::Ok);
        assert!((out - 0.5).abs() < 1e-12);
        assert_eq!(lrseg_iou(m.as_ptr(), gs.as_ptr(), 4, &mut out), LrsegStatus::Ok);
        assert!((out - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(lrseg_window_accuracy(m.as_ptr(), gs.as_ptr(), 4, &mut out), LrsegStatus::Ok);
        assert!((out - 0.5).abs() < 1e-12);
        let empty = [0u8; 4];
        assert_eq!(lrseg_window_accuracy(empty.as_ptr(), gs.as_ptr(), 4, &mut out), LrsegStatus::Metric);
    }
}

#[test]
fn phantom_and_short_pipeline_run() {
    unsafe {
        let (mut v, mut truth) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(lrseg_phantom_generate(3, &mut v, &mut truth), LrsegStatus::Ok);
        let (mut t, mut h, mut w) = (0, 0, 0);
        assert_eq!(lrseg_mask_dims(truth, &mut t, &mut h, &mut w), LrsegStatus::Ok);
        assert_eq!((t, h, w), (48, 64, 64));
        let mut bytes = vec![0u8; t * h * w];
        assert_eq!(lrseg_mask_copy_data(truth, bytes.as_mut_ptr(), bytes.len()), LrsegStatus::Ok);
        assert!(bytes.iter().any(|b| *b == 1));
        lrseg_mask_free(truth);
        lrseg_video_free(v);

        let dir = tempfile::tempdir().unwrap();
        let out_dir = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
        let cfg = CString::new("phantom.seed = 3\nseed = 3\ntrain.epochs = 2\ntrain.threshold_restarts = 0\n").unwrap();
        let mut summary = LrsegRunSummary::default();
        let mut mask = ptr::null_mut();
        assert_eq!(
            lrseg_pipeline_run(cfg.as_ptr(), out_dir.as_ptr(), 0, &mut summary, &mut mask),
            LrsegStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!((summary.roi_height, summary.roi_width), (10, 12));
        assert_eq!(summary.has_metrics, 1);
        assert!((0.0..=1.0).contains(&summary.mean_dc));
        assert_eq!(lrseg_mask_dims(mask, &mut t, &mut h, &mut w), LrsegStatus::Ok);
        assert_eq!((t, h, w), (48, 64, 64));
        lrseg_mask_free(mask);
        assert!(dir.path().join("run").read_dir().unwrap().count() > 0);

        assert_ne!(
            lrseg_pipeline_run(cfg.as_ptr(), out_dir.as_ptr(), 0, &mut summary, ptr::null_mut()),
            LrsegStatus::Ok
        );
    }
}
