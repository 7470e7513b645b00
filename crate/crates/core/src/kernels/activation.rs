//! Elementwise and pooling layers. None of them change a tensor's scale
//! except dropout, whose power-of-two compensation is a scale increment.

use rand::Rng;

use crate::error::{Error, Result};
use crate::qtensor::{AccTensor, QTensor};

pub fn relu_acc(a: &mut AccTensor) -> Vec<bool> {
    a.data_mut()
        .iter_mut()
        .map(|v| {
            let keep = *v > 0;
            if !keep {
                *v = 0;
            }
            keep
        })
        .collect()
}

pub fn relu(a: &mut QTensor) -> Vec<bool> {
    a.data_mut()
        .iter_mut()
        .map(|v| {
            let keep = *v > 0;
            if !keep {
                *v = 0;
            }
            keep
        })
        .collect()
}

/// Zeroes error entries whose forward activation was clipped.
pub fn relu_backward(e: &mut QTensor, mask: &[bool]) {
    debug_assert_eq!(e.len(), mask.len());
    for (v, &keep) in e.data_mut().iter_mut().zip(mask) {
        if !keep {
            *v = 0;
        }
    }
}

/// Flat input index of each pooled maximum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<u32>,
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
/// Ties resolve to the first element in row-major order.
pub fn maxpool2(a: &QTensor) -> Result<(QTensor, PoolIndices)> {
    let [n, c, h, w] = *a.shape() else {
        return Err(Error::shape("maxpool2", &[0, 0, 0, 0], a.shape()));
    };
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::shape("maxpool2 spatial", &[2, 2], &[h, w]));
    }
    let src = a.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            let top = plane * h * w + 2 * y * w;
            let (r0, r1) = (&src[top..top + 2 * ow], &src[top + w..top + w + 2 * ow]);
            for (x, (p0, p1)) in r0.chunks_exact(2).zip(r1.chunks_exact(2)).enumerate() {
                let mut best = (p0[0], 0);
                for (v, off) in [(p0[1], 1), (p1[0], w), (p1[1], w + 1)] {
                    if v > best.0 {
                        best = (v, off);
                    }
                }
                out.push(best.0);
                argmax.push((top + 2 * x + best.1) as u32);
            }
        }
    }
    let pooled = QTensor::from_parts(vec![n, c, oh, ow], out, a.scale());
    Ok((pooled, PoolIndices { input_shape: a.shape().to_vec(), argmax }))
}

/// Routes each pooled error to the position that won the forward max.
pub fn maxpool2_backward(e: &QTensor, idx: &PoolIndices) -> Result<QTensor> {
    if e.len() != idx.argmax.len() {
        return Err(Error::shape("maxpool2_backward", &[idx.argmax.len()], &[e.len()]));
    }
    let mut out = QTensor::zeros(idx.input_shape.clone(), e.scale());
    let dst = out.data_mut();
    for (&v, &i) in e.data().iter().zip(&idx.argmax) {
        dst[i as usize] = v;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout with keep probability `2^keep_log2`. Kept values are
/// unchanged and the scale grows by `-keep_log2`, which multiplies the
/// represented values by `1 / keep`. Returns the keep mask in training mode.
pub fn dropout_pow2<R: Rng + ?Sized>(
    a: &mut QTensor,
    keep_log2: i32,
    mode: Mode,
    rng: &mut R,
) -> Result<Option<Vec<bool>>> {
    if !(-16..=0).contains(&keep_log2) {
        return Err(Error::Network(format!("dropout keep_log2 {keep_log2} outside [-16, 0]")));
    }
    if mode == Mode::Eval || keep_log2 == 0 {
        return Ok(None);
    }
    let drop_bits = keep_log2.unsigned_abs();
    let mask: Vec<bool> = a
        .data_mut()
        .iter_mut()
        .map(|v| {
            // keep when the top `drop_bits` bits of a fresh draw are all zero
            let keep = rng.gen::<u32>() >> (32 - drop_bits) == 0;
            if !keep {
                *v = 0;
            }
            keep
        })
        .collect();
    a.set_scale(a.scale().saturating_add(drop_bits as i8));
    Ok(Some(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(shape: Vec<usize>, data: Vec<i8>, scale: i8) -> QTensor {
        QTensor::new(shape, data, scale).unwrap()
    }

    #[test]
    fn relu_cases() {
        let mut neg = q(vec![3], vec![-1, -50, -127], 2);
        let mask = relu(&mut neg);
        assert_eq!(neg.data(), &[0, 0, 0]);
        assert_eq!(mask, vec![false; 3]);
        assert_eq!(neg.scale(), 2);

        let mut pos = q(vec![3], vec![1, 50, 127], 2);
        relu(&mut pos);
        assert_eq!(pos.data(), &[1, 50, 127]);

        let mut acc = AccTensor::new(vec![4], vec![-5, 0, 7, 100_000], -3).unwrap();
        let mask = relu_acc(&mut acc);
        assert_eq!(acc.data(), &[0, 0, 7, 100_000]);
        assert_eq!(mask, vec![false, false, true, true]);

        let mut e = q(vec![4], vec![9, 9, 9, 9], 0);
        relu_backward(&mut e, &mask);
        assert_eq!(e.data(), &[0, 0, 9, 9]);
    }

    #[test]
    fn maxpool_constant_and_increasing() {
        let (p, idx) = maxpool2(&q(vec![1, 1, 2, 2], vec![5; 4], -1)).unwrap();
        assert_eq!(p.data(), &[5]);
        assert_eq!(idx.argmax, vec![0]);
        assert_eq!(p.scale(), -1);

        let (p, idx) = maxpool2(&q(vec![1, 1, 2, 2], vec![1, 2, 3, 4], 0)).unwrap();
        assert_eq!(p.data(), &[4]);
        assert_eq!(idx.argmax, vec![3]);
    }

    #[test]
    fn maxpool_backward_scatters() {
        let x = q(vec![1, 1, 2, 4], vec![1, 9, 0, 0, 3, 4, 0, 7], 0);
        let (p, idx) = maxpool2(&x).unwrap();
        assert_eq!(p.data(), &[9, 7]);
        let e = q(vec![1, 1, 1, 2], vec![-3, 5], 0);
        let back = maxpool2_backward(&e, &idx).unwrap();
        assert_eq!(back.data(), &[0, -3, 0, 0, 0, 0, 0, 5]);
    }

    #[test]
    fn maxpool_odd_dims_drop_tail() {
        let x = q(vec![1, 1, 3, 3], (1..=9).collect(), 0);
        let (p, _) = maxpool2(&x).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1, 1]);
        assert_eq!(p.data(), &[5]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let orig = q(vec![4], vec![1, 2, 3, 4], -2);
        let mut a = orig.clone();
        assert!(dropout_pow2(&mut a, -1, Mode::Eval, &mut rng).unwrap().is_none());
        assert_eq!(a, orig);
        assert!(dropout_pow2(&mut a, 0, Mode::Train, &mut rng).unwrap().is_none());
        assert_eq!(a, orig);
        assert!(dropout_pow2(&mut a, 1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_half_keep_rate() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut a = q(vec![n], vec![1; n], -3);
        let mask = dropout_pow2(&mut a, -1, Mode::Train, &mut rng).unwrap().unwrap();
        let kept = mask.iter().filter(|&&k| k).count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((kept - 0.5 * n as f64).abs() < 4.0 * sd, "kept {kept}");
        assert_eq!(a.scale(), -2);
        assert_eq!(a.data().iter().filter(|&&v| v == 1).count() as f64, kept);
    }
}
