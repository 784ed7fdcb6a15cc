//! Exercises the C ABI end to end: load a real checkpoint, run the three
//! tasks on raw RGB buffers, and check error paths.

use std::ffi::CString;

use stegokey::backbone::{BackboneConfig, Nonlinearity};
use stegokey::data_io::{save_checkpoint, Checkpoint};
use stegokey::synth::synth_image;
use stegokey::training::{LossWeights, MismatchPolicy, TrainConfig, Trainer};

use stegokey_ffi::*;

const SIDE: usize = 16;

fn write_test_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let backbone = BackboneConfig {
        base_width: 6,
        depth: 1,
        side: SIDE,
        nonlinearity: Nonlinearity::LeakyRelu,
        input_slots: 2,
    };
    let config = TrainConfig {
        k: 2,
        alpha: 0.7,
        mask_seed: 4,
        keys: vec![(0x1111_2222_3333_4444, 0x5555_6666_7777_8888), (0x9999, 0xAAAA)],
        learning_rate: 1e-3,
        batch_size: 1,
        steps: 1,
        noise_sigma: [0.0, 0.05],
        mismatch: MismatchPolicy::SampleOne,
        eval_every: 0,
        checkpoint_every: 0,
        seed: 2,
    };
    let trainer = Trainer::new(backbone, config, LossWeights::default()).unwrap();
    let path = dir.join("model.skc");
    save_checkpoint(&path, &Checkpoint::from_trainer(&trainer)).unwrap();
    path
}

fn rgb(seed: u64) -> Vec<u8> {
    synth_image(seed, SIDE).to_rgb8()
}

fn last_error() -> String {
    let mut buf = vec![0i8; 256];
    let n = unsafe { sk_last_error_message(buf.as_mut_ptr() as *mut _, buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&b| b as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[test]
fn load_run_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_test_checkpoint(dir.path());
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut model: *mut SkModel = std::ptr::null_mut();
    let st = unsafe { sk_model_load(cpath.as_ptr(), &mut model) };
    assert_eq!(st, SkStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    assert_eq!(unsafe { sk_model_side(model) }, SIDE);

    let secret = rgb(1);
    let cover = rgb(2);
    let mut stego = vec![0u8; SIDE * SIDE * 3];
    let st = unsafe {
        sk_embed(model, 0xDEAD_BEEF, secret.as_ptr(), cover.as_ptr(), stego.as_mut_ptr())
    };
    assert_eq!(st, SkStatus::Ok, "{}", last_error());
    assert!(stego.iter().any(|&b| b != 0));

    let mut recovered = vec![0u8; SIDE * SIDE * 3];
    let st = unsafe { sk_recover(model, 0xDEAD_BEEF, stego.as_ptr(), recovered.as_mut_ptr()) };
    assert_eq!(st, SkStatus::Ok, "{}", last_error());

    // determinism across calls through the ABI
    let mut recovered2 = vec![0u8; SIDE * SIDE * 3];
    let st = unsafe { sk_recover(model, 0xDEAD_BEEF, stego.as_ptr(), recovered2.as_mut_ptr()) };
    assert_eq!(st, SkStatus::Ok);
    assert_eq!(recovered, recovered2);

    let mut purified = vec![0u8; SIDE * SIDE * 3];
    let st = unsafe { sk_purify(model, cover.as_ptr(), purified.as_mut_ptr()) };
    assert_eq!(st, SkStatus::Ok, "{}", last_error());

    unsafe { sk_model_free(model) };
}

#[test]
fn metrics_through_the_abi() {
    let a = rgb(3);
    let mut out = f64::NAN;
    let st = unsafe { sk_psnr(a.as_ptr(), a.as_ptr(), SIDE, SIDE, &mut out) };
    assert_eq!(st, SkStatus::Ok);
    assert_eq!(out, 100.0);

    let st = unsafe { sk_ssim(a.as_ptr(), a.as_ptr(), SIDE, SIDE, &mut out) };
    assert_eq!(st, SkStatus::Ok);
    assert!((out - 1.0).abs() < 1e-12);

    let st = unsafe { sk_mae(a.as_ptr(), a.as_ptr(), SIDE, SIDE, &mut out) };
    assert_eq!(st, SkStatus::Ok);
    assert_eq!(out, 0.0);

    // ssim needs at least the window size
    let tiny = vec![0u8; 8 * 8 * 3];
    let st = unsafe { sk_ssim(tiny.as_ptr(), tiny.as_ptr(), 8, 8, &mut out) };
    assert_eq!(st, SkStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn error_paths_set_messages() {
    let mut model: *mut SkModel = std::ptr::null_mut();
    let st = unsafe { sk_model_load(std::ptr::null(), &mut model) };
    assert_eq!(st, SkStatus::NullArgument);

    let missing = CString::new("/nonexistent/model.skc").unwrap();
    let st = unsafe { sk_model_load(missing.as_ptr(), &mut model) };
    assert_eq!(st, SkStatus::IoError);
    assert!(!last_error().is_empty());

    // not a checkpoint
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.skc");
    std::fs::write(&bogus, b"XXXXnot a checkpoint").unwrap();
    let cpath = CString::new(bogus.to_str().unwrap()).unwrap();
    let st = unsafe { sk_model_load(cpath.as_ptr(), &mut model) };
    assert_eq!(st, SkStatus::FormatError);

    assert_eq!(unsafe { sk_model_side(std::ptr::null()) }, 0);
    unsafe { sk_model_free(std::ptr::null_mut()) };

    assert!(!unsafe { sk_version() }.is_null());
}
