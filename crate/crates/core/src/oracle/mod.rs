//! Reference implementations used to check the integer path: naive loop
//! kernels, floating-point softmax, and an fp64 SGD trainer for side-by-side
//! curves. Nothing in the integer training path calls into this module except
//! the metrics logger, which reports an fp64 loss computed from integer
//! logits.

mod shadow;

pub use shadow::{shadow_train_fp, FpNetwork, ShadowConfig, ShadowEpoch};

use crate::kernels::conv::ConvGeometry;
use crate::qtensor::QTensor;

/// Triple loop `A (m x k) * B (k x n)`.
pub fn gemm_naive(a: &[i8], b: &[i8], m: usize, k: usize, n: usize) -> Vec<i32> {
    let mut c = vec![0i32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0i64;
            for t in 0..k {
                s += a[i * k + t] as i64 * b[t * n + j] as i64;
            }
            c[i * n + j] = i32::try_from(s).expect("gemm_naive overflowed int32");
        }
    }
    c
}

fn padded_at(x: &QTensor, g: &ConvGeometry, b: usize, c: usize, y: isize, xx: isize) -> i64 {
    if y < 0 || xx < 0 || y as usize >= g.input_h || xx as usize >= g.input_w {
        return 0;
    }
    x.data()[((b * g.in_channels + c) * g.input_h + y as usize) * g.input_w + xx as usize] as i64
}

/// Direct convolution (cross-correlation) with zero padding.
pub fn conv_naive(x: &QTensor, w: &QTensor, g: &ConvGeometry) -> Vec<i32> {
    let n = x.shape()[0];
    let (oh, ow) = (g.output_h(), g.output_w());
    let mut out = vec![0i32; n * g.out_channels * oh * ow];
    for b in 0..n {
        for o in 0..g.out_channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0i64;
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel_h {
                            for kj in 0..g.kernel_w {
                                let iy = (y * g.stride + ki) as isize - g.padding as isize;
                                let ix = (xx * g.stride + kj) as isize - g.padding as isize;
                                let wv = w.data()[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                                s += padded_at(x, g, b, c, iy, ix) * wv as i64;
                            }
                        }
                    }
                    out[((b * g.out_channels + o) * oh + y) * ow + xx] = s as i32;
                }
            }
        }
    }
    out
}

/// `∂⟨conv(x, w), e⟩ / ∂x`, accumulated term by term.
pub fn conv_grad_input_naive(e: &QTensor, w: &QTensor, g: &ConvGeometry) -> Vec<i32> {
    let n = e.shape()[0];
    let (oh, ow) = (g.output_h(), g.output_w());
    let mut out = vec![0i64; n * g.in_channels * g.input_h * g.input_w];
    for b in 0..n {
        for o in 0..g.out_channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let ev = e.data()[((b * g.out_channels + o) * oh + y) * ow + xx] as i64;
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel_h {
                            for kj in 0..g.kernel_w {
                                let iy = (y * g.stride + ki) as isize - g.padding as isize;
                                let ix = (xx * g.stride + kj) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= g.input_h || ix as usize >= g.input_w {
                                    continue;
                                }
                                let wv = w.data()[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                                out[((b * g.in_channels + c) * g.input_h + iy as usize) * g.input_w + ix as usize] +=
                                    ev * wv as i64;
                            }
                        }
                    }
                }
            }
        }
    }
    out.into_iter().map(|v| v as i32).collect()
}

/// `g[o][c][i][j] = Σ_{n,y,x} x[n][c][y·s+i−p][x·s+j−p] · e[n][o][y][x]`.
pub fn conv_grad_weight_naive(x: &QTensor, e: &QTensor, g: &ConvGeometry) -> Vec<i32> {
    let n = x.shape()[0];
    let (oh, ow) = (g.output_h(), g.output_w());
    let mut out = vec![0i32; g.out_channels * g.patch_len()];
    for o in 0..g.out_channels {
        for c in 0..g.in_channels {
            for ki in 0..g.kernel_h {
                for kj in 0..g.kernel_w {
                    let mut s = 0i64;
                    for b in 0..n {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let iy = (y * g.stride + ki) as isize - g.padding as isize;
                                let ix = (xx * g.stride + kj) as isize - g.padding as isize;
                                let ev = e.data()[((b * g.out_channels + o) * oh + y) * ow + xx] as i64;
                                s += padded_at(x, g, b, c, iy, ix) * ev;
                            }
                        }
                    }
                    out[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj] = s as i32;
                }
            }
        }
    }
    out
}

/// `softmax(z) - onehot(label)` in fp64.
pub fn softmax_grad_fp(logits: &[f64], label: usize) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let c: f64 = exps.iter().sum();
    exps.iter()
        .enumerate()
        .map(|(i, &t)| t / c - if i == label { 1.0 } else { 0.0 })
        .collect()
}

/// Same gradient through the log-sum-exp form `exp(z_i - lse(z))`.
pub fn softmax_grad_lse(logits: &[f64], label: usize) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &z)| (z - lse).exp() - if i == label { 1.0 } else { 0.0 })
        .collect()
}

/// `-ln softmax(z)[label]`.
pub fn cross_entropy_fp(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_pair() {
        let g = softmax_grad_fp(&[0.3, 0.3], 0);
        assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_dominant_logit() {
        let g = softmax_grad_fp(&[40.0, 0.0, 0.0], 1);
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert!((g[1] + 1.0).abs() < 1e-12);
        assert!(g[2].abs() < 1e-12);
    }

    #[test]
    fn softmax_forms_agree_and_sum_to_zero() {
        let z = [1.5, -2.0, 0.25, 3.0, -0.75];
        for label in 0..z.len() {
            let a = softmax_grad_fp(&z, label);
            let b = softmax_grad_lse(&z, label);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!(a.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_of_uniform() {
        let ce = cross_entropy_fp(&[0.0; 10], 3);
        assert!((ce - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn naive_gemm_small() {
        assert_eq!(gemm_naive(&[1, 2, 3, 4], &[5, 6, 7, 8], 2, 2, 2), vec![19, 22, 43, 50]);
    }
}
