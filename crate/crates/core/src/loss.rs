//! Integer cross-entropy gradient.
//!
//! The softmax gradient `(exp(z_i) - y_i * C) / C` is computed up to the
//! positive factor `1 / C` (and any power of two absorbed into it), since the
//! weight update only looks at bit patterns relative to their own effective
//! bitwidth. Only shifts, adds and one 16-bit constant multiply are used.
//!
//! Two branches approximate `t_i = exp(a_i * 2^s)`:
//! * `s <= -7`: second-order Taylor expansion, exact in fixed point.
//! * `s > -7`: `t_i = 2^(log2(e) * a_i * 2^s)` with `log2(e) ≈ 47274 / 2^15`
//!   and the exponent truncated to an integer, offset into a 10-bit window.
//!   Classes whose exponent falls below the window get `t_i = 0`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::qtensor::{bit_length, narrowing_shift, round_wide, QTensor, RoundingScheme, ACT_BITS};

/// `log2(e)` in Q15.
pub const LOG2_E_Q15: i64 = 47274;

/// Width of the exponent window kept by the base-2 branch.
pub const EXP_WINDOW: i64 = 10;

/// Largest binary point used by the Taylor branch.
pub const TAYLOR_MAX_POINT: u32 = 20;

/// Scales at or below this use the Taylor branch.
pub const TAYLOR_SCALE_LIMIT: i8 = -7;

/// Final-layer activations of one sample.
#[derive(Debug, Clone, Copy)]
pub struct LogitBlock<'a> {
    pub logits: &'a [i8],
    pub scale: i8,
    pub label: usize,
}

impl<'a> LogitBlock<'a> {
    pub fn new(logits: &'a [i8], scale: i8, label: usize) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::Usage(format!(
                "loss needs at least 2 classes, got {}",
                logits.len()
            )));
        }
        if label >= logits.len() {
            return Err(Error::Usage(format!(
                "label {label} out of range for {} classes",
                logits.len()
            )));
        }
        Ok(Self { logits, scale, label })
    }

    pub fn uses_taylor(&self) -> bool {
        self.scale <= TAYLOR_SCALE_LIMIT
    }
}

/// Integer exponents of the base-2 branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Base2Exponents {
    /// `x̂_i`, the truncated `log2(e) * a_i * 2^s`.
    pub truncated: Vec<i64>,
    /// Offset `p` subtracted from every exponent.
    pub offset: i64,
    /// `x̃_i = max(0, x̂_i - p)`, each in `[0, 10]`.
    pub windowed: Vec<u32>,
}

const PRODUCT_CAP: i128 = 1 << 62;

fn scaled_log2_exponent(a: i8, scale: i8) -> i64 {
    let prod = LOG2_E_Q15 * a as i64;
    if scale < 0 {
        prod >> (scale.unsigned_abs() as u32 + 15)
    } else {
        let wide = ((prod as i128) << scale as u32).clamp(-PRODUCT_CAP, PRODUCT_CAP);
        (wide >> 15) as i64
    }
}

/// Base-2 branch exponents. The offset puts the largest exponent at the top
/// of a 10-bit window, so `2^x̃` never exceeds `2^10`; anything more than
/// `2^10` below the maximum clips to `x̃ = 0`.
pub fn exp_exponents_base2(block: &LogitBlock<'_>) -> Base2Exponents {
    let truncated: Vec<i64> = block
        .logits
        .iter()
        .map(|&a| scaled_log2_exponent(a, block.scale))
        .collect();
    let max = truncated.iter().copied().max().unwrap_or(0);
    let offset = max - EXP_WINDOW;
    let windowed = truncated.iter().map(|&x| (x - offset).max(0) as u32).collect();
    Base2Exponents { truncated, offset, windowed }
}

fn shift_signed(v: i64, by: i64) -> i64 {
    if by >= 0 {
        v << by
    } else if by <= -63 {
        if v < 0 {
            -1
        } else {
            0
        }
    } else {
        v >> (-by)
    }
}

/// Binary point used by the Taylor branch for a given scale.
pub fn taylor_point(scale: i8) -> u32 {
    (scale.unsigned_abs() as u32).min(TAYLOR_MAX_POINT)
}

/// `1 + x + x²/2` with `x = a_i * 2^s`, as integers at binary point `2d`
/// where `d = min(|s|, 20)`.
pub fn exp_taylor(block: &LogitBlock<'_>) -> Vec<i64> {
    let s = block.scale.unsigned_abs() as i64;
    let d = taylor_point(block.scale) as i64;
    block
        .logits
        .iter()
        .map(|&a| {
            let a = a as i64;
            let one = 1i64 << (2 * d);
            let linear = shift_signed(a, 2 * d - s);
            let quadratic = shift_signed(a * a, 2 * d - 2 * s) >> 1;
            one + linear + quadratic
        })
        .collect()
}

/// Nonnegative proxies for `exp(a_i * 2^s)`, all sharing one unknown factor.
/// In the base-2 branch an exponent below the offset is negligible against
/// the top of the window and contributes 0 rather than `2^0`.
pub fn exp_proxies(block: &LogitBlock<'_>) -> Vec<i64> {
    if block.uses_taylor() {
        exp_taylor(block)
    } else {
        let e = exp_exponents_base2(block);
        e.truncated
            .iter()
            .zip(&e.windowed)
            .map(|(&x, &w)| if x < e.offset { 0 } else { 1i64 << w })
            .collect()
    }
}

/// `t_i - y_i * Σ t` before rounding. Sums to zero exactly.
pub fn raw_gradient(block: &LogitBlock<'_>) -> Vec<i64> {
    let mut t = exp_proxies(block);
    let sum: i64 = t.iter().sum();
    t[block.label] -= sum;
    t
}

/// Integer loss gradient for a batch of logits `[N, classes]`. The result is
/// int8 with scale 0; its true scale is never needed downstream.
pub fn loss_gradient<R: Rng + ?Sized>(
    logits: &QTensor,
    labels: &[usize],
    scheme: RoundingScheme,
    rng: &mut R,
) -> Result<QTensor> {
    let [n, classes] = *logits.shape() else {
        return Err(Error::shape("loss_gradient logits", &[labels.len(), 0], logits.shape()));
    };
    if labels.len() != n {
        return Err(Error::shape("loss_gradient labels", &[n], &[labels.len()]));
    }
    let mut raw = Vec::with_capacity(n * classes);
    for (row, &label) in logits.data().chunks_exact(classes.max(1)).zip(labels) {
        let block = LogitBlock::new(row, logits.scale(), label)?;
        raw.extend(raw_gradient(&block));
    }
    let max = raw.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    let bp = narrowing_shift(bit_length(max), ACT_BITS);
    let data: Vec<i8> = raw.iter().map(|&v| round_wide(v, bp, scheme, rng)).collect();
    Ok(QTensor::from_parts(vec![n, classes], data, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{cosine, softmax_grad_fp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_matches_log2e() {
        // 0xB8AA; the nearest Q15 value to log2(e)
        assert_eq!(LOG2_E_Q15, (std::f64::consts::LOG2_E * 32768.0).round() as i64);
        let approx = LOG2_E_Q15 as f64 / 32768.0;
        assert!((approx - std::f64::consts::LOG2_E).abs() < 1e-4);
    }

    #[test]
    fn equal_logits_are_symmetric() {
        let logits = [37i8; 6];
        let e = exp_exponents_base2(&LogitBlock::new(&logits, -3, 0).unwrap());
        assert!(e.truncated.iter().all(|&x| x == e.truncated[0]));
        assert!(e.windowed.iter().all(|&x| x == EXP_WINDOW as u32));
    }

    #[test]
    fn base2_trace() {
        // 47274 * 127 = 6_003_798; >> 19 = 11 (11.45 truncated); a = 0 gives 0.
        let logits = [127i8, 0];
        let e = exp_exponents_base2(&LogitBlock::new(&logits, -4, 0).unwrap());
        assert_eq!(e.truncated, vec![11, 0]);
        assert_eq!(e.offset, 1);
        assert_eq!(e.windowed, vec![10, 0]);
        let raw = raw_gradient(&LogitBlock::new(&logits, -4, 0).unwrap());
        assert_eq!(raw, vec![0, 0]);
        // 47274 * 64 >> 19 = 5, inside the window
        let raw = raw_gradient(&LogitBlock::new(&[127, 64], -4, 0).unwrap());
        assert_eq!(raw, vec![1024 - 1040, 16]);
    }

    #[test]
    fn negative_logits_floor_toward_minus_infinity() {
        // -47274 >> 16 = floor(-0.72) = -1
        let logits = [-1i8, 100];
        let e = exp_exponents_base2(&LogitBlock::new(&logits, -1, 1).unwrap());
        assert_eq!(e.truncated[0], -1);
        assert_eq!(e.windowed[0], 0);
    }

    #[test]
    fn nonnegative_scale_caps_product() {
        let logits = [127i8, -127];
        let e = exp_exponents_base2(&LogitBlock::new(&logits, 60, 0).unwrap());
        assert_eq!(e.truncated[0], (1i64 << 62) >> 15);
        assert_eq!(e.windowed, vec![10, 0]);
        let e = exp_exponents_base2(&LogitBlock::new(&logits, 2, 0).unwrap());
        assert_eq!(e.truncated[0], (47274 * 127 * 4) >> 15);
    }

    #[test]
    fn taylor_zero_logit_is_one() {
        let logits = [0i8, 0];
        for s in [-7i8, -12, -30] {
            let u = exp_taylor(&LogitBlock::new(&logits, s, 0).unwrap());
            assert_eq!(u, vec![1 << (2 * taylor_point(s)); 2]);
        }
    }

    #[test]
    fn taylor_half_ratio_close_to_e() {
        let logits = [64i8, -64];
        let u = exp_taylor(&LogitBlock::new(&logits, -7, 0).unwrap());
        // (1 + 0.5 + 0.125) / (1 - 0.5 + 0.125) = 2.6
        assert_eq!(u, vec![16384 + 8192 + 2048, 16384 - 8192 + 2048]);
        let ratio = u[0] as f64 / u[1] as f64;
        let e = std::f64::consts::E;
        assert!((ratio - e).abs() / e < 0.05, "ratio {ratio}");
    }

    #[test]
    fn taylor_vanishing_logits() {
        let logits = [127i8, -127, 3];
        let u = exp_taylor(&LogitBlock::new(&logits, -30, 0).unwrap());
        // linear term 127 * 2^10, quadratic truncated to 0
        assert_eq!(u, vec![(1 << 40) + 127 * 1024, (1 << 40) - 127 * 1024, (1 << 40) + 3 * 1024]);
        let u = exp_taylor(&LogitBlock::new(&logits, -60, 0).unwrap());
        assert_eq!(u[0], 1 << 40);
        assert_eq!(u[1], (1 << 40) - 1);
    }

    #[test]
    fn raw_gradient_sums_to_zero_and_has_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in -12i8..3 {
            for _ in 0..50 {
                let logits: Vec<i8> = (0..10).map(|_| rng.gen_range(-127..=127)).collect();
                let label = rng.gen_range(0..10);
                let raw = raw_gradient(&LogitBlock::new(&logits, s, label).unwrap());
                assert_eq!(raw.iter().sum::<i64>(), 0);
                assert!(raw[label] <= 0);
                assert!(raw.iter().enumerate().all(|(i, &v)| i == label || v >= 0));
                let winner = logits.iter().enumerate().max_by_key(|&(i, &v)| (v, usize::MAX - i)).unwrap().0;
                if winner != label {
                    assert!(raw[label] < 0, "a misclassified sample always has a gradient");
                }
            }
        }
    }

    #[test]
    fn uniform_pair_direction() {
        let logits = QTensor::new(vec![1, 2], vec![5, 5], -3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = loss_gradient(&logits, &[0], RoundingScheme::Nearest, &mut rng).unwrap();
        assert_eq!(e.data()[0], -e.data()[1]);
        assert!(e.data()[0] < 0);
        let fp = softmax_grad_fp(&[0.625, 0.625], 0);
        let ie: Vec<f64> = e.data().iter().map(|&v| v as f64).collect();
        assert!((cosine(&ie, &fp) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_class() {
        // x̂ = [36, 0, 0]: the label sits at the top of the window, the rest fall below it
        let logits = QTensor::new(vec![1, 3], vec![100, 0, 0], -2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = loss_gradient(&logits, &[0], RoundingScheme::Nearest, &mut rng).unwrap();
        assert_eq!(e.data(), &[0, 0, 0]);
        let e = loss_gradient(&logits, &[1], RoundingScheme::Nearest, &mut rng).unwrap();
        let d = e.data();
        assert!(d[0] > 0 && d[1] < 0 && d[2] == 0);
        assert_eq!(-(d[1] as i32), d[0] as i32);
    }

    #[test]
    fn invalid_blocks_are_usage_errors() {
        assert!(LogitBlock::new(&[1], 0, 0).is_err());
        assert!(LogitBlock::new(&[1, 2], 0, 2).is_err());
        let logits = QTensor::new(vec![1, 2], vec![1, 2], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(loss_gradient(&logits, &[5], RoundingScheme::Nearest, &mut rng).is_err());
        assert!(loss_gradient(&logits, &[0, 1], RoundingScheme::Nearest, &mut rng).is_err());
    }
}
