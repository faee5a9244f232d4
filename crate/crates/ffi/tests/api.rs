use std::ffi::{CStr, CString};
use std::ptr;

use pepnet::checkpoint;
use pepnet::data::{generate_dataset, SynthParams};
use pepnet::metrics;
use pepnet::net::{Model, ModelConfig};
use pepnet::rng::{stream_rng, Stream};
use pepnet::Tensor;
use pepnet_ffi::*;

fn last_error() -> String {
    let p = pep_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tmp(name: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("pepnet-ffi-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

#[test]
fn generated_sample_matches_library_dataset() {
    let mut p = pep_synth_default();
    p.image_size = 16;
    p.seed = 11;
    let lib = SynthParams {
        image_size: 16,
        seed: 11,
        ..SynthParams::default()
    };
    let expected = generate_dataset(&lib, 3).unwrap();
    let mut image = vec![0f32; 256];
    let mut masks = vec![0u8; 4 * 256];
    let status = unsafe { pep_generate_sample(&p, 2, image.as_mut_ptr(), masks.as_mut_ptr()) };
    assert_eq!(status, PepStatus::Ok);
    assert_eq!(image, expected[2].image);
    for (chunk, mask) in masks.chunks(256).zip(&expected[2].masks) {
        assert!(chunk.iter().zip(mask.bits()).all(|(&a, &b)| (a == 1) == b));
    }
}

#[test]
fn metrics_match_library_and_report_errors() {
    let lib = generate_dataset(
        &SynthParams {
            image_size: 16,
            ..SynthParams::default()
        },
        2,
    )
    .unwrap();
    let to_bytes = |ms: &[pepnet::data::Mask]| {
        ms.iter()
            .flat_map(|m| m.bits().iter().map(|&b| b as u8))
            .collect::<Vec<u8>>()
    };
    let a = to_bytes(&lib[0].masks);
    let b = to_bytes(&lib[1].masks);
    let mut v = 0.0;
    assert_eq!(
        unsafe { pep_iou(a.as_ptr(), b.as_ptr(), 16, 16, &mut v) },
        PepStatus::Ok
    );
    assert_eq!(v, metrics::iou(&lib[0].masks[0], &lib[1].masks[0]).unwrap());
    assert_eq!(
        unsafe { pep_ged(a.as_ptr(), 4, b.as_ptr(), 4, 16, 16, &mut v) },
        PepStatus::Ok
    );
    assert_eq!(v, metrics::ged(&lib[0].masks, &lib[1].masks).unwrap());

    assert_eq!(
        unsafe { pep_iou(ptr::null(), b.as_ptr(), 16, 16, &mut v) },
        PepStatus::NullPointer
    );
    assert!(last_error().contains("null"));
    assert_eq!(
        unsafe { pep_ged(a.as_ptr(), 0, b.as_ptr(), 4, 16, 16, &mut v) },
        PepStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { pep_iou(a.as_ptr(), b.as_ptr(), 0, 16, &mut v) },
        PepStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { pep_iou(a.as_ptr(), b.as_ptr(), 16, 16, &mut v) },
        PepStatus::Ok
    );
    assert!(pep_last_error().is_null());
}

#[test]
fn model_handle_round_trip() {
    let config = ModelConfig {
        image_size: 8,
        base_channels: 4,
        depth: 1,
        ..ModelConfig::default()
    };
    let model = Model::new(config, 5).unwrap();
    let dir = tmp("model");
    checkpoint::save(&model, &dir).unwrap();

    let path = CString::new(dir.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { pep_model_load(path.as_ptr(), &mut handle) },
        PepStatus::Ok
    );
    let (mut size, mut d, mut k) = (0, 0, 0);
    assert_eq!(
        unsafe { pep_model_dims(handle, &mut size, &mut d, &mut k) },
        PepStatus::Ok
    );
    assert_eq!((size, d, k), (8, config.latent_dim, config.k));

    let image: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
    let mut probs = vec![0f32; 3 * 64];
    assert_eq!(
        unsafe { pep_model_sample(handle, image.as_ptr(), 8, 3, 9, probs.as_mut_ptr()) },
        PepStatus::Ok
    );
    let tensor = Tensor::new(vec![1, 1, 8, 8], image.clone()).unwrap();
    let expected =
        metrics::probability_maps(&model, &tensor, 3, &mut stream_rng(9, Stream::Eval, 0)).unwrap();
    assert_eq!(probs, expected.concat());
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));

    assert_eq!(
        unsafe { pep_model_sample(handle, image.as_ptr(), 16, 3, 9, probs.as_mut_ptr()) },
        PepStatus::InvalidArgument
    );
    assert!(last_error().contains("8x8"));
    unsafe { pep_model_free(handle) };
    std::fs::remove_dir_all(&dir).unwrap();

    let missing = CString::new("/nonexistent/pepnet").unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { pep_model_load(missing.as_ptr(), &mut handle) },
        PepStatus::Io
    );
    assert!(handle.is_null());
    assert_eq!(
        unsafe { pep_model_load(ptr::null(), &mut handle) },
        PepStatus::NullPointer
    );
}
