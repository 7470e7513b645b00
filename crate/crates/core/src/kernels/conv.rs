//! 2-D convolution lowered to int8 GEMM, together with its two gradients.
//!
//! Tensors are NCHW; weights are `out_channels x in_channels x kh x kw`.
//! Each multiply kernel returns an int32 accumulator whose scale is the sum
//! of its operands' scales.

use crate::error::{Error, Result};
use std::ops::Range;

use crate::kernels::gemm::{gemm_nn_into, gemm_nt_into, transpose, MAX_REDUCTION};
use crate::qtensor::{AccTensor, QTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        input: (usize, usize),
    ) -> Result<Self> {
        let g = ConvGeometry {
            in_channels,
            out_channels,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride,
            padding,
            input_h: input.0,
            input_w: input.1,
        };
        g.validate()?;
        Ok(g)
    }

    /// `conv3`-style layer: 3x3 kernel, stride 1, padding 1.
    pub fn same3x3(in_channels: usize, out_channels: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, (3, 3), 1, 1, (h, w))
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.out_channels,
            self.kernel_h,
            self.kernel_w,
            self.stride,
            self.input_h,
            self.input_w,
        ];
        if dims.contains(&0) {
            return Err(Error::Network(format!("conv geometry has a zero dimension: {self:?}")));
        }
        let span_h = self.input_h + 2 * self.padding;
        let span_w = self.input_w + 2 * self.padding;
        if span_h < self.kernel_h || span_w < self.kernel_w {
            return Err(Error::Network(format!("kernel larger than padded input: {self:?}")));
        }
        if !(span_h - self.kernel_h).is_multiple_of(self.stride) || !(span_w - self.kernel_w).is_multiple_of(self.stride) {
            return Err(Error::Network(format!(
                "stride does not tile the padded input exactly: {self:?}"
            )));
        }
        if self.patch_len() > MAX_REDUCTION || self.out_channels * self.kernel_h * self.kernel_w > MAX_REDUCTION {
            return Err(Error::Network(format!("conv reduction exceeds the int32 bound: {self:?}")));
        }
        Ok(())
    }

    pub fn output_h(&self) -> usize {
        (self.input_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn output_w(&self) -> usize {
        (self.input_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// `in_channels * kh * kw`, the forward reduction length.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn positions(&self) -> usize {
        self.output_h() * self.output_w()
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.in_channels, self.input_h, self.input_w]
    }

    pub fn output_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.out_channels, self.output_h(), self.output_w()]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn fan_in(&self) -> usize {
        self.patch_len()
    }

    /// Input coordinate read by output position `o` and kernel tap `k`, if it
    /// falls inside the unpadded image.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let v = (o * self.stride + k).checked_sub(self.padding)?;
        (v < limit).then_some(v)
    }

    /// Output columns `lo..hi` whose tap `k` lands inside the image.
    #[inline]
    fn output_range(&self, k: usize, limit: usize, outputs: usize) -> (usize, usize) {
        // need 0 <= x*s + k - p < limit
        let s = self.stride;
        let lo = self.padding.saturating_sub(k).div_ceil(s);
        let hi = if limit + self.padding > k {
            ((limit + self.padding - k - 1) / s + 1).min(outputs)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Row-major int8 matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct I8Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i8>,
}

fn batch_of(t_shape: &[usize], want: &[usize], context: &'static str) -> Result<usize> {
    if t_shape.len() != 4 || t_shape[1..] != want[1..] {
        return Err(Error::shape(context, want, t_shape));
    }
    Ok(t_shape[0])
}

/// Samples lowered at once: enough to keep the unrolled patches near
/// 256 KiB, so they stay in cache between lowering and multiplication.
fn chunk_samples(geom: &ConvGeometry) -> usize {
    ((1 << 18) / (geom.positions() * geom.patch_len()).max(1)).max(1)
}

/// Unrolls every receptive field into a column: the result is
/// `(C*kh*kw) x (N*oh*ow)` so that the forward convolution equals
/// `weights(O x C*kh*kw) * im2col(input)`.
pub fn im2col(input: &QTensor, geom: &ConvGeometry) -> Result<I8Matrix> {
    let n = batch_of(input.shape(), &geom.input_shape(0), "im2col")?;
    let mut data = Vec::new();
    im2col_into(input.data(), geom, 0..n, &mut data);
    Ok(I8Matrix { rows: geom.patch_len(), cols: n * geom.positions(), data })
}

fn im2col_into(src: &[i8], geom: &ConvGeometry, samples: Range<usize>, data: &mut Vec<i8>) {
    let p = geom.positions();
    let cols = samples.len() * p;
    data.clear();
    data.resize(geom.patch_len() * cols, 0);
    let (oh, ow) = (geom.output_h(), geom.output_w());
    let (h, w) = (geom.input_h, geom.input_w);
    for c in 0..geom.in_channels {
        for ki in 0..geom.kernel_h {
            for kj in 0..geom.kernel_w {
                let r = (c * geom.kernel_h + ki) * geom.kernel_w + kj;
                let dst_row = &mut data[r * cols..(r + 1) * cols];
                let (xlo, xhi) = geom.output_range(kj, w, ow);
                for (i, b) in samples.clone().enumerate() {
                    let plane = &src[(b * geom.in_channels + c) * h * w..][..h * w];
                    for y in 0..oh {
                        let Some(sy) = geom.source(y, ki, h) else { continue };
                        let out = &mut dst_row[i * p + y * ow..][..ow];
                        let first = sy * w + xlo * geom.stride + kj - geom.padding;
                        if geom.stride == 1 {
                            out[xlo..xhi].copy_from_slice(&plane[first..first + (xhi - xlo)]);
                        } else {
                            for (t, o) in out[xlo..xhi].iter_mut().enumerate() {
                                *o = plane[first + t * geom.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatter-adds `(C*kh*kw) x (S*oh*ow)` tap
/// gradients for `samples` back onto the input grid.
fn col2im_add(data: &[i32], geom: &ConvGeometry, samples: Range<usize>, out: &mut [i32]) {
    let p = geom.positions();
    let cols = samples.len() * p;
    let (oh, ow) = (geom.output_h(), geom.output_w());
    let (h, w) = (geom.input_h, geom.input_w);
    for c in 0..geom.in_channels {
        for ki in 0..geom.kernel_h {
            for kj in 0..geom.kernel_w {
                let r = (c * geom.kernel_h + ki) * geom.kernel_w + kj;
                let src_row = &data[r * cols..(r + 1) * cols];
                let (xlo, xhi) = geom.output_range(kj, w, ow);
                for (i, b) in samples.clone().enumerate() {
                    let plane = &mut out[(b * geom.in_channels + c) * h * w..][..h * w];
                    for y in 0..oh {
                        let Some(sy) = geom.source(y, ki, h) else { continue };
                        let taps = &src_row[i * p + y * ow..][..ow];
                        let first = sy * w + xlo * geom.stride + kj - geom.padding;
                        if geom.stride == 1 {
                            for (d, &t) in plane[first..first + (xhi - xlo)].iter_mut().zip(&taps[xlo..xhi]) {
                                *d += t;
                            }
                        } else {
                            for (t, &v) in taps[xlo..xhi].iter().enumerate() {
                                plane[first + t * geom.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies the errors of `samples` into one `O x (S*oh*ow)` matrix.
fn errors_by_channel(e: &[i8], o: usize, p: usize, samples: Range<usize>, out: &mut [i8]) {
    let len = samples.len() * p;
    for (i, b) in samples.enumerate() {
        for ch in 0..o {
            out[ch * len + i * p..][..p].copy_from_slice(&e[(b * o + ch) * p..][..p]);
        }
    }
}

fn check_weights(w: &QTensor, geom: &ConvGeometry, context: &'static str) -> Result<()> {
    if w.shape() != geom.weight_shape().as_slice() {
        return Err(Error::shape(context, &geom.weight_shape(), w.shape()));
    }
    Ok(())
}

pub fn conv_forward(a_prev: &QTensor, w: &QTensor, geom: &ConvGeometry) -> Result<AccTensor> {
    let n = batch_of(a_prev.shape(), &geom.input_shape(0), "conv_forward input")?;
    check_weights(w, geom, "conv_forward weights")?;
    let (o, p, k) = (geom.out_channels, geom.positions(), geom.patch_len());
    let step = chunk_samples(geom);
    let mut out = vec![0i32; n * o * p];
    let (mut patches, mut c) = (Vec::new(), vec![0i32; o * step.min(n) * p]);
    for b0 in (0..n).step_by(step) {
        let b1 = (b0 + step).min(n);
        let len = (b1 - b0) * p;
        im2col_into(a_prev.data(), geom, b0..b1, &mut patches);
        // O x (S*P)
        let c = &mut c[..o * len];
        gemm_nn_into(w.data(), &patches, o, len, k, c);
        for ch in 0..o {
            for b in b0..b1 {
                out[(b * o + ch) * p..][..p].copy_from_slice(&c[ch * len + (b - b0) * p..][..p]);
            }
        }
    }
    AccTensor::new(geom.output_shape(n), out, a_prev.scale().saturating_add(w.scale()))
}

pub fn conv_grad_input(e: &QTensor, w: &QTensor, geom: &ConvGeometry) -> Result<AccTensor> {
    let n = batch_of(e.shape(), &geom.output_shape(0), "conv_grad_input error")?;
    check_weights(w, geom, "conv_grad_input weights")?;
    let (o, p, k) = (geom.out_channels, geom.positions(), geom.patch_len());
    let wt = transpose(w.data(), o, k);
    let step = chunk_samples(geom);
    let mut out = vec![0i32; n * geom.in_channels * geom.input_h * geom.input_w];
    let (mut e_cols, mut taps) = (vec![0i8; o * step.min(n) * p], vec![0i32; k * step.min(n) * p]);
    for b0 in (0..n).step_by(step) {
        let b1 = (b0 + step).min(n);
        let len = (b1 - b0) * p;
        let e_cols = &mut e_cols[..o * len];
        errors_by_channel(e.data(), o, p, b0..b1, e_cols);
        // (C*kh*kw) x (S*P)
        let taps = &mut taps[..k * len];
        gemm_nn_into(&wt, e_cols, k, len, o, taps);
        col2im_add(taps, geom, b0..b1, &mut out);
    }
    AccTensor::new(geom.input_shape(n), out, e.scale().saturating_add(w.scale()))
}

/// Weight gradient summed over batch and positions. The caller is responsible
/// for the int32 bound on `N * oh * ow` nonzero terms.
pub fn conv_grad_weight(a_prev: &QTensor, e: &QTensor, geom: &ConvGeometry) -> Result<AccTensor> {
    let n = batch_of(a_prev.shape(), &geom.input_shape(0), "conv_grad_weight input")?;
    let ne = batch_of(e.shape(), &geom.output_shape(0), "conv_grad_weight error")?;
    if n != ne {
        return Err(Error::shape("conv_grad_weight batch", &[n], &[ne]));
    }
    let (o, p, k) = (geom.out_channels, geom.positions(), geom.patch_len());
    let step = chunk_samples(geom);
    let mut g = vec![0i32; o * k];
    let (mut cols, mut part) = (Vec::new(), vec![0i32; o * k]);
    let mut e_cols = vec![0i8; o * step.min(n) * p];
    for b0 in (0..n).step_by(step) {
        let b1 = (b0 + step).min(n);
        let len = (b1 - b0) * p;
        im2col_into(a_prev.data(), geom, b0..b1, &mut cols);
        let e_cols = &mut e_cols[..o * len];
        errors_by_channel(e.data(), o, p, b0..b1, e_cols);
        gemm_nt_into(e_cols, &cols, o, k, len, &mut part);
        // Partial sums may wrap; the total fits int32, so it comes out exact.
        for (acc, &v) in g.iter_mut().zip(&part) {
            *acc = acc.wrapping_add(v);
        }
    }
    AccTensor::new(geom.weight_shape(), g, a_prev.scale().saturating_add(e.scale()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{conv_grad_input_naive, conv_grad_weight_naive, conv_naive};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q(shape: Vec<usize>, data: Vec<i8>, scale: i8) -> QTensor {
        QTensor::new(shape, data, scale).unwrap()
    }

    fn random_q(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> QTensor {
        let n = shape.iter().product();
        q(shape, (0..n).map(|_| rng.gen_range(-127..=127)).collect(), 0)
    }

    #[test]
    fn geometry_rejects_bad_stride() {
        assert!(ConvGeometry::new(1, 1, (2, 2), 2, 0, (5, 5)).is_err());
        assert!(ConvGeometry::new(1, 1, (7, 7), 1, 0, (5, 5)).is_err());
        assert!(ConvGeometry::new(0, 1, (1, 1), 1, 0, (5, 5)).is_err());
        let g = ConvGeometry::same3x3(3, 8, 32, 32).unwrap();
        assert_eq!((g.output_h(), g.output_w()), (32, 32));
    }

    #[test]
    fn im2col_trivial_cases() {
        let g = ConvGeometry::new(1, 1, (1, 1), 1, 0, (1, 1)).unwrap();
        let m = im2col(&q(vec![1, 1, 1, 1], vec![42], 0), &g).unwrap();
        assert_eq!((m.rows, m.cols, m.data), (1, 1, vec![42]));

        let g = ConvGeometry::new(1, 1, (2, 2), 1, 0, (2, 2)).unwrap();
        let m = im2col(&q(vec![1, 1, 2, 2], vec![1, 2, 3, 4], 0), &g).unwrap();
        assert_eq!((m.rows, m.cols), (4, 1));
        assert_eq!(m.data, vec![1, 2, 3, 4]);
    }

    #[test]
    fn im2col_3x3_matches_index_formula() {
        let g = ConvGeometry::new(1, 1, (2, 2), 1, 0, (3, 3)).unwrap();
        let x = q(vec![1, 1, 3, 3], (1..=9).collect(), 0);
        let m = im2col(&x, &g).unwrap();
        assert_eq!((m.rows, m.cols), (4, 4));
        // row (ki,kj), column (y,x) holds input[y+ki][x+kj]
        for ki in 0..2 {
            for kj in 0..2 {
                for y in 0..2 {
                    for xx in 0..2 {
                        let want = ((y + ki) * 3 + (xx + kj) + 1) as i8;
                        assert_eq!(m.data[(ki * 2 + kj) * 4 + y * 2 + xx], want);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_zero_weights_still_sums_scales() {
        let g = ConvGeometry::same3x3(2, 3, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = random_q(&mut rng, g.input_shape(2));
        x.set_scale(-3);
        let w = QTensor::zeros(g.weight_shape(), -5);
        let out = conv_forward(&x, &w, &g).unwrap();
        assert!(out.data().iter().all(|&v| v == 0));
        assert_eq!(out.scale(), -8);
    }

    #[test]
    fn forward_scalar_product() {
        let g = ConvGeometry::new(1, 1, (1, 1), 1, 0, (1, 1)).unwrap();
        let out = conv_forward(&q(vec![1, 1, 1, 1], vec![3], -3), &q(vec![1, 1, 1, 1], vec![2], -4), &g).unwrap();
        assert_eq!(out.data(), &[6]);
        assert_eq!(out.scale(), -7);
    }

    #[test]
    fn forward_random_matches_direct_convolution() {
        let g = ConvGeometry::same3x3(3, 4, 5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_q(&mut rng, g.input_shape(2));
        let w = random_q(&mut rng, g.weight_shape());
        let out = conv_forward(&x, &w, &g).unwrap();
        assert_eq!(out.data(), conv_naive(&x, &w, &g).as_slice());
    }

    #[test]
    fn grad_input_cases() {
        let g = ConvGeometry::new(1, 1, (1, 1), 1, 0, (2, 3)).unwrap();
        let e = q(vec![1, 1, 2, 3], vec![1, -2, 3, 0, 5, -6], 0);
        let w = q(vec![1, 1, 1, 1], vec![-4], 0);
        let gi = conv_grad_input(&e, &w, &g).unwrap();
        assert_eq!(gi.data(), &[-4, 8, -12, 0, -20, 24]);

        let g = ConvGeometry::new(2, 3, (3, 3), 2, 1, (5, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zeros = QTensor::zeros(g.output_shape(2), 0);
        let w = random_q(&mut rng, g.weight_shape());
        assert!(conv_grad_input(&zeros, &w, &g).unwrap().data().iter().all(|&v| v == 0));
        let e = random_q(&mut rng, g.output_shape(2));
        assert_eq!(conv_grad_input(&e, &w, &g).unwrap().data(), conv_grad_input_naive(&e, &w, &g).as_slice());
    }

    #[test]
    fn grad_weight_cases() {
        let g = ConvGeometry::new(1, 1, (1, 1), 1, 0, (2, 2)).unwrap();
        let a = q(vec![1, 1, 2, 2], vec![1, 2, 3, 4], 0);
        let e = q(vec![1, 1, 2, 2], vec![5, 6, 7, -8], 0);
        let gw = conv_grad_weight(&a, &e, &g).unwrap();
        assert_eq!(gw.data(), &[5 + 12 + 21 - 32]);

        let g = ConvGeometry::new(3, 2, (3, 3), 1, 1, (4, 6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_q(&mut rng, g.input_shape(3));
        let zeros = QTensor::zeros(g.output_shape(3), 0);
        assert!(conv_grad_weight(&a, &zeros, &g).unwrap().data().iter().all(|&v| v == 0));
        let e = random_q(&mut rng, g.output_shape(3));
        assert_eq!(conv_grad_weight(&a, &e, &g).unwrap().data(), conv_grad_weight_naive(&a, &e, &g).as_slice());
    }

    #[test]
    fn shape_errors() {
        let g = ConvGeometry::same3x3(2, 3, 4, 4).unwrap();
        let x = QTensor::zeros(vec![1, 3, 4, 4], 0);
        let w = QTensor::zeros(g.weight_shape(), 0);
        assert!(conv_forward(&x, &w, &g).is_err());
        let x = QTensor::zeros(g.input_shape(1), 0);
        let bad_w = QTensor::zeros(vec![3, 2, 1, 1], 0);
        assert!(conv_forward(&x, &bad_w, &g).is_err());
        let e = QTensor::zeros(g.output_shape(2), 0);
        assert!(conv_grad_weight(&x, &e, &g).is_err());
    }
}
