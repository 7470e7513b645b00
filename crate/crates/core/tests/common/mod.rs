#![allow(dead_code)]

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn idx_images(images: &[u8], n: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = 0x0000_0803u32.to_be_bytes().to_vec();
    for d in [n, h, w] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(images);
    out
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = 0x0000_0801u32.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// 28x28 digits-like images: class `c` lights a horizontal band at rows
/// `2c + 4 ..` over faint noise.
pub fn synthetic_mnist(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        labels.push(c as u8);
        for y in 0..28 {
            for _ in 0..28 {
                let band = y >= 2 * c + 4 && y < 2 * c + 7;
                let base: u8 = if band { 200 } else { 10 };
                images.push(base.saturating_add(rng.gen_range(0..40)));
            }
        }
    }
    (images, labels)
}

/// Writes `train-*` and `t10k-*` IDX files of synthetic digits into `dir`.
pub fn write_mnist_dir(dir: &Path, train: usize, test: usize) {
    for (prefix, n, seed) in [("train", train, 1), ("t10k", test, 2)] {
        let (images, labels) = synthetic_mnist(n, seed);
        fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx_images(&images, n, 28, 28)).unwrap();
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&labels)).unwrap();
    }
}
