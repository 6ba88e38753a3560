use std::ffi::{CStr, CString};
use std::ptr;

use bcsi::trainer::train;
use bcsi_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(bcsi_last_error()) }.to_string_lossy().into_owned()
}

fn volume_values(v: *const BcsiVolume) -> ([usize; 3], Vec<f64>) {
    let mut dims = [0usize; 3];
    let mut data = ptr::null();
    let mut len = 0;
    unsafe {
        assert_eq!(bcsi_volume_dims(v, dims.as_mut_ptr()), BcsiStatus::Ok);
        assert_eq!(bcsi_volume_data(v, &mut data, &mut len), BcsiStatus::Ok);
        (dims, std::slice::from_raw_parts(data, len).to_vec())
    }
}

#[test]
fn volume_roundtrip_and_null_handling() {
    let values: Vec<f64> = (0..24).map(f64::from).collect();
    let mut v = ptr::null_mut();
    unsafe {
        assert_eq!(bcsi_volume_new(2, 3, 4, values.as_ptr(), &mut v), BcsiStatus::Ok);
        assert_eq!(volume_values(v), ([2, 3, 4], values.clone()));
        bcsi_volume_free(v);
        bcsi_volume_free(ptr::null_mut());

        let mut w = ptr::null_mut();
        assert_eq!(bcsi_volume_new(0, 3, 4, values.as_ptr(), &mut w), BcsiStatus::InvalidArgument);
        assert!(w.is_null());
        assert_eq!(bcsi_volume_new(2, 3, 4, ptr::null(), &mut w), BcsiStatus::NullPointer);
        assert!(last_error().contains("data"));
        assert_eq!(bcsi_volume_dims(ptr::null(), [0usize; 3].as_mut_ptr()), BcsiStatus::NullPointer);
    }
}

#[test]
fn generated_case_matches_library() {
    let json = CString::new(r#"{"dims": [12, 12, 12], "radius_range": [2.0, 3.0]}"#).unwrap();
    let (mut img, mut lab) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(bcsi_generate_case(7, json.as_ptr(), &mut img, &mut lab), BcsiStatus::Ok);
    }
    let params = bcsi::synthdata::GeneratorParams { dims: [12; 3], radius_range: [2.0, 3.0], ..Default::default() };
    let (vol, label) = bcsi::synthdata::generate_case(7, &params).unwrap();
    assert_eq!(volume_values(img), ([12; 3], vol.voxels().to_vec()));
    let expected: Vec<f64> = label.mask().iter().map(|&m| f64::from(m)).collect();
    assert_eq!(volume_values(lab).1, expected);

    // Scoring the label against itself is perfect.
    let mut m = BcsiMetrics::default();
    unsafe {
        assert_eq!(bcsi_case_metrics(lab, lab, 0.5, &mut m), BcsiStatus::Ok);
        bcsi_volume_free(img);
        bcsi_volume_free(lab);
    }
    assert_eq!((m.dice, m.jaccard, m.hd95, m.asd, m.has_distances), (100.0, 100.0, 0.0, 0.0, 1));
}

#[test]
fn bad_params_report_config_errors() {
    let (mut img, mut lab) = (ptr::null_mut(), ptr::null_mut());
    for (json, status) in [
        (r#"{"n_blobs": 0}"#, BcsiStatus::Config),
        (r#"{"bogus": 1}"#, BcsiStatus::Format),
        ("not json", BcsiStatus::Format),
    ] {
        let json = CString::new(json).unwrap();
        assert_eq!(unsafe { bcsi_generate_case(0, json.as_ptr(), &mut img, &mut lab) }, status);
        assert!(!last_error().is_empty());
        assert!(img.is_null() && lab.is_null());
    }
}

#[test]
fn metrics_flag_empty_masks() {
    let zeros = [0.0; 8];
    let ones = [1.0; 8];
    let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
    let mut m = BcsiMetrics::default();
    unsafe {
        bcsi_volume_new(2, 2, 2, zeros.as_ptr(), &mut a);
        bcsi_volume_new(2, 2, 2, ones.as_ptr(), &mut b);
        assert_eq!(bcsi_case_metrics(a, b, 0.5, &mut m), BcsiStatus::Ok);
        assert_eq!(m.has_distances, 0);
        assert!(m.hd95.is_nan() && m.asd.is_nan());
        assert_eq!(m.dice, 0.0);

        let mut c = ptr::null_mut();
        bcsi_volume_new(1, 2, 4, ones.as_ptr(), &mut c);
        assert_eq!(bcsi_case_metrics(b, c, 0.5, &mut m), BcsiStatus::Shape);
        for v in [a, b, c] {
            bcsi_volume_free(v);
        }
    }
}

#[test]
fn lambda_and_version() {
    assert_eq!(bcsi_lambda_u(10, 10), bcsi::losses::lambda_u(10, 10));
    assert!(bcsi_lambda_u(1, 0).is_nan());
    let v = unsafe { CStr::from_ptr(bcsi_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_predicts_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = bcsi::trainer::gradcheck::miniature_config();
    cfg.data.dir = dir.path().join("data");
    cfg.data.n_cases = 4;
    cfg.data.n_test = 1;
    cfg.data.labeled_ratio = 0.5;
    cfg.t_max = 2;
    cfg.checkpoint_every = 0;
    cfg.validate().unwrap();
    bcsi::trainer::gen_data(&cfg, false).unwrap();
    let out = dir.path().join("run");
    let outcome = train(&cfg, &out, None).unwrap();

    let config_path = CString::new(out.join("config.json").to_str().unwrap()).unwrap();
    let ckpt = CString::new(outcome.final_checkpoint.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(bcsi_model_load(config_path.as_ptr(), ckpt.as_ptr(), &mut model), BcsiStatus::Ok);
    }

    let case = bcsi::synthdata::load_case(&cfg.data.dir, 0).unwrap();
    let mut img = ptr::null_mut();
    let mut probs = ptr::null_mut();
    unsafe {
        bcsi_volume_new(12, 12, 12, case.volume.voxels().as_ptr(), &mut img);
        assert_eq!(bcsi_model_predict(model, img, &mut probs), BcsiStatus::Ok);
    }
    let predictor = bcsi::trainer::NetPredictor { params: outcome.state.params, network: cfg.network.clone() };
    let expected = bcsi::metrics::VolumePredictor::predict_volume(&predictor, &case.volume).unwrap();
    assert_eq!(volume_values(probs), ([12; 3], expected.data().to_vec()));

    let missing = CString::new(dir.path().join("nope.bck").to_str().unwrap()).unwrap();
    let mut other = ptr::null_mut();
    unsafe {
        assert_eq!(bcsi_model_load(config_path.as_ptr(), missing.as_ptr(), &mut other), BcsiStatus::Config);
        assert!(other.is_null());
        bcsi_volume_free(img);
        bcsi_volume_free(probs);
        bcsi_model_free(model);
    }
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/bcsi.h")).unwrap();
    for name in [
        "bcsi_last_error",
        "bcsi_version",
        "bcsi_volume_new",
        "bcsi_volume_dims",
        "bcsi_volume_data",
        "bcsi_volume_free",
        "bcsi_generate_case",
        "bcsi_lambda_u",
        "bcsi_model_load",
        "bcsi_model_predict",
        "bcsi_model_free",
        "bcsi_case_metrics",
        "typedef struct BcsiVolume BcsiVolume",
        "BCSI_STATUS_NULL_POINTER",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
