use std::ffi::{CStr, CString};
use std::ptr;

use int8_train_ffi::*;

fn create(arch: &str, seed: u64, max_batch: usize) -> *mut I8tNetwork {
    let arch = CString::new(arch).unwrap();
    let mut net = ptr::null_mut();
    let status = unsafe { i8t_network_create(arch.as_ptr(), seed, I8tInit::Uniform, max_batch, &mut net) };
    assert_eq!(status, I8tStatus::Ok, "{}", last_error());
    assert!(!net.is_null());
    net
}

fn last_error() -> String {
    let p = i8t_last_error();
    if p.is_null() {
        return String::new();
    }
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Deterministic pseudo-random pixels.
fn pixels(n: usize, seed: u32) -> Vec<u8> {
    let mut x = seed.wrapping_mul(2654435761).wrapping_add(1);
    (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 17;
            x ^= x << 5;
            (x >> 24) as u8
        })
        .collect()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(i8t_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn preset_dimensions() {
    let net = create("lenet-mnist", 1, 16);
    unsafe {
        assert_eq!(i8t_network_input_size(net), 784);
        assert_eq!(i8t_network_num_classes(net), 10);
        i8t_network_free(net);
        assert_eq!(i8t_network_input_size(ptr::null()), 0);
    }
    let net = create("cnn4-cifar10", 1, 16);
    unsafe {
        assert_eq!(i8t_network_input_size(net), 3 * 32 * 32);
        i8t_network_free(net);
    }
}

#[test]
fn unknown_architecture_reports_config_error() {
    let arch = CString::new("resnet-9000").unwrap();
    let mut net = ptr::null_mut();
    let status = unsafe { i8t_network_create(arch.as_ptr(), 0, I8tInit::Uniform, 8, &mut net) };
    assert_eq!(status, I8tStatus::Config);
    assert!(net.is_null());
    assert!(last_error().contains("resnet-9000"), "{}", last_error());
}

#[test]
fn null_arguments_are_rejected() {
    let mut net = ptr::null_mut();
    unsafe {
        assert_eq!(i8t_network_create(ptr::null(), 0, I8tInit::Uniform, 8, &mut net), I8tStatus::NullPointer);
        let arch = CString::new("mlp-mnist").unwrap();
        assert_eq!(
            i8t_network_create(arch.as_ptr(), 0, I8tInit::Uniform, 8, ptr::null_mut()),
            I8tStatus::NullPointer
        );
        let mut out = [0u8; 1];
        assert_eq!(
            i8t_network_predict(ptr::null_mut(), [0u8; 784].as_ptr(), 1, out.as_mut_ptr()),
            I8tStatus::NullPointer
        );
        i8t_network_free(ptr::null_mut());
    }
}

#[test]
fn bad_inputs_map_to_status_codes() {
    let net = create("mlp-mnist", 3, 4);
    let x = pixels(784 * 8, 1);
    unsafe {
        let labels = [0u8, 1, 2, 42];
        let status = i8t_network_train_step(net, x.as_ptr(), labels.as_ptr(), 4, 3, ptr::null_mut());
        assert_eq!(status, I8tStatus::InvalidArgument);
        assert!(last_error().contains("42"));

        let labels = [0u8; 8];
        let status = i8t_network_train_step(net, x.as_ptr(), labels.as_ptr(), 8, 3, ptr::null_mut());
        assert_eq!(status, I8tStatus::InvalidArgument, "batch above the limit");

        let labels = [0u8; 4];
        let status = i8t_network_train_step(net, x.as_ptr(), labels.as_ptr(), 4, 9, ptr::null_mut());
        assert_eq!(status, I8tStatus::Config, "m_u out of range");

        let mut out = [0u8; 1];
        assert_eq!(i8t_network_predict(net, x.as_ptr(), 0, out.as_mut_ptr()), I8tStatus::InvalidArgument);
        i8t_network_free(net);
    }
}

#[test]
fn training_memorizes_a_small_batch() {
    let net = create("mlp-mnist", 7, 16);
    let x = pixels(784 * 16, 2);
    let labels: Vec<u8> = (0..16).map(|i| (i % 10) as u8).collect();
    let mut correct = 0usize;
    unsafe {
        for _ in 0..60 {
            let status = i8t_network_train_step(net, x.as_ptr(), labels.as_ptr(), 16, 3, &mut correct);
            assert_eq!(status, I8tStatus::Ok, "{}", last_error());
        }
        let mut pred = [0u8; 16];
        assert_eq!(i8t_network_predict(net, x.as_ptr(), 16, pred.as_mut_ptr()), I8tStatus::Ok);
        assert_eq!(pred.to_vec(), labels);
        i8t_network_free(net);
    }
    assert_eq!(correct, 16);
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("net.ckpt").to_str().unwrap()).unwrap();
    let net = create("lenet-mnist", 11, 8);
    let x = pixels(784 * 3, 3);
    let (mut before, mut after) = ([0i8; 30], [0i8; 30]);
    let (mut s0, mut s1) = (0i8, 0i8);
    unsafe {
        assert_eq!(i8t_network_logits(net, x.as_ptr(), 3, before.as_mut_ptr(), &mut s0), I8tStatus::Ok);
        assert_eq!(i8t_network_save(net, path.as_ptr()), I8tStatus::Ok, "{}", last_error());
        let mut loaded = ptr::null_mut();
        assert_eq!(i8t_network_load(path.as_ptr(), 8, &mut loaded), I8tStatus::Ok, "{}", last_error());
        assert_eq!(i8t_network_logits(loaded, x.as_ptr(), 3, after.as_mut_ptr(), &mut s1), I8tStatus::Ok);
        i8t_network_free(loaded);
        i8t_network_free(net);
    }
    assert_eq!(before, after);
    assert_eq!(s0, s1);
}

#[test]
fn loading_garbage_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("junk.ckpt");
    std::fs::write(&file, b"definitely not a checkpoint").unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { i8t_network_load(path.as_ptr(), 8, &mut net) }, I8tStatus::Format);
    let missing = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { i8t_network_load(missing.as_ptr(), 8, &mut net) }, I8tStatus::Io);
    assert!(net.is_null());
}

#[test]
fn rounding_can_be_changed() {
    let net = create("mlp-mnist", 5, 4);
    unsafe {
        let status = i8t_network_set_rounding(
            net,
            I8tRounding::Nearest,
            I8tRounding::Stochastic,
            I8tRounding::PseudoStochastic,
        );
        assert_eq!(status, I8tStatus::Ok);
        i8t_network_free(net);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/int8_train.h")).unwrap();
    for name in [
        "i8t_version",
        "i8t_last_error",
        "i8t_network_create",
        "i8t_network_load",
        "i8t_network_save",
        "i8t_network_free",
        "i8t_network_input_size",
        "i8t_network_num_classes",
        "i8t_network_set_rounding",
        "i8t_network_train_step",
        "i8t_network_predict",
        "i8t_network_logits",
        "I8T_STATUS_OK",
        "typedef struct I8tNetwork I8tNetwork;",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
