//! Block-scaled integer tensors and the rounding schemes used to narrow
//! 32-bit accumulators back to 8 bits.
//!
//! A tensor stores integer elements together with one shared exponent `s`;
//! the represented real value of element `v` is `v * 2^s`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Largest magnitude an int8 element may hold. `-128` is never stored so
/// that negation stays closed.
pub const Q_MAX: i32 = 127;

/// Bits kept by activations and errors after narrowing (`b - 7` shift).
pub const ACT_BITS: u32 = 7;

/// Upper bound on the binary point accepted for 32-bit inputs.
pub const MAX_BP_32: u32 = 31;

#[derive(Clone, PartialEq, Eq)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    scale: i8,
}

#[derive(Clone, PartialEq, Eq)]
pub struct AccTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    scale: i8,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl QTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, scale: i8) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("QTensor::new", &shape, &[data.len()]));
        }
        if data.contains(&i8::MIN) {
            return Err(Error::Usage("QTensor elements must lie in [-127, 127]".into()));
        }
        Ok(Self { shape, data, scale })
    }

    /// Builds a tensor from values already known to be in range.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<i8>, scale: i8) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        debug_assert!(data.iter().all(|&v| v != i8::MIN));
        Self { shape, data, scale }
    }

    pub fn zeros(shape: Vec<usize>, scale: i8) -> Self {
        let n = numel(&shape);
        Self { shape, data: vec![0; n], scale }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [i8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<i8> {
        self.data
    }

    pub fn scale(&self) -> i8 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: i8) {
        self.scale = scale;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::shape("QTensor::reshape", &shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Real values `v * 2^scale`, for reporting only.
    pub fn to_f64(&self) -> Vec<f64> {
        let f = 2f64.powi(self.scale as i32);
        self.data.iter().map(|&v| v as f64 * f).collect()
    }

    pub fn max_abs(&self) -> u32 {
        self.data.iter().map(|v| v.unsigned_abs() as u32).max().unwrap_or(0)
    }

    pub fn widen(&self) -> AccTensor {
        AccTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as i32).collect(),
            scale: self.scale,
        }
    }
}

impl fmt::Debug for QTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QTensor")
            .field("shape", &self.shape)
            .field("scale", &self.scale)
            .field("max_abs", &self.max_abs())
            .finish()
    }
}

impl AccTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>, scale: i8) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("AccTensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data, scale })
    }

    pub fn zeros(shape: Vec<usize>, scale: i8) -> Self {
        let n = numel(&shape);
        Self { shape, data: vec![0; n], scale }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    pub fn scale(&self) -> i8 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: i8) {
        self.scale = scale;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::shape("AccTensor::reshape", &shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs(&self) -> u32 {
        self.data.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)
    }
}

impl fmt::Debug for AccTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AccTensor")
            .field("shape", &self.shape)
            .field("scale", &self.scale)
            .field("max_abs", &self.max_abs())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoundingScheme {
    Nearest,
    Stochastic,
    PseudoStochastic,
}

impl RoundingScheme {
    pub const ALL: [RoundingScheme; 3] = [
        RoundingScheme::Nearest,
        RoundingScheme::Stochastic,
        RoundingScheme::PseudoStochastic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RoundingScheme::Nearest => "nearest",
            RoundingScheme::Stochastic => "stochastic",
            RoundingScheme::PseudoStochastic => "pseudo-stochastic",
        }
    }

    pub fn is_deterministic(self) -> bool {
        !matches!(self, RoundingScheme::Stochastic)
    }

    /// The scheme used where results must be reproducible without an rng
    /// (evaluation passes).
    pub fn deterministic(self) -> Self {
        match self {
            RoundingScheme::Stochastic => RoundingScheme::Nearest,
            other => other,
        }
    }
}

impl fmt::Display for RoundingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoundingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "nearest" | "round-to-nearest" => Ok(RoundingScheme::Nearest),
            "stochastic" => Ok(RoundingScheme::Stochastic),
            "pseudo-stochastic" | "pseudo" | "psto" => Ok(RoundingScheme::PseudoStochastic),
            other => Err(Error::Config(format!("unknown rounding scheme `{other}`"))),
        }
    }
}

/// Bit length of the largest element magnitude; 0 for an all-zero tensor.
pub fn effective_bitwidth(t: &AccTensor) -> u32 {
    bit_length(t.max_abs() as u64)
}

pub fn bit_length(v: u64) -> u32 {
    u64::BITS - v.leading_zeros()
}

/// The shift that leaves at most `keep` effective bits.
pub fn narrowing_shift(bitwidth: u32, keep: u32) -> u32 {
    bitwidth.saturating_sub(keep)
}

fn saturate(mag: u64) -> u64 {
    mag.min(Q_MAX as u64)
}

fn low_bits(v: u64, n: u32) -> u64 {
    if n == 0 {
        0
    } else if n >= 64 {
        v
    } else {
        v & ((1u64 << n) - 1)
    }
}

fn split(mag: u64, bp: u32) -> (u64, u64) {
    if bp >= 64 {
        (0, mag)
    } else {
        (mag >> bp, low_bits(mag, bp))
    }
}

/// Decomposition of the discarded fraction used by pseudo stochastic rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FractionHalves {
    /// More significant half of the fraction (a truncated copy of it).
    pub top: u64,
    /// Less significant half, which plays the role of the random number.
    pub bottom: u64,
    /// Width in bits of each half.
    pub half_bits: u32,
}

/// Splits the low `bp` bits of `mag` into two equal halves, dropping the
/// lowest bit first when `bp` is odd.
pub fn fraction_halves(mag: u64, bp: u32) -> FractionHalves {
    let (_, mut f) = split(mag, bp);
    let mut bp = bp.min(64);
    if bp % 2 == 1 {
        f >>= 1;
        bp -= 1;
    }
    let half = bp / 2;
    FractionHalves {
        top: f >> half,
        bottom: low_bits(f, half),
        half_bits: half,
    }
}

fn nearest_magnitude(mag: u64, bp: u32) -> u64 {
    let bp = bp.min(64);
    let (q, f) = split(mag, bp);
    if bp == 0 {
        return q;
    }
    // f >= 2^(bp-1): ties go away from zero.
    if f >= 1u64 << (bp - 1) {
        q + 1
    } else {
        q
    }
}

fn pseudo_stochastic_magnitude(mag: u64, bp: u32) -> u64 {
    let (q, _) = split(mag, bp);
    let h = fraction_halves(mag, bp);
    if h.half_bits > 0 && h.top > h.bottom {
        q + 1
    } else {
        q
    }
}

fn stochastic_magnitude<R: Rng + ?Sized>(mag: u64, bp: u32, rng: &mut R) -> u64 {
    let bp = bp.min(64);
    let (q, f) = split(mag, bp);
    if bp == 0 || f == 0 {
        return q;
    }
    let r = if bp >= 64 { rng.gen::<u64>() } else { rng.gen::<u64>() >> (64 - bp) };
    if r < f {
        q + 1
    } else {
        q
    }
}

/// Rounds `value * 2^-bp` to a saturated int8 using `scheme`. Works on the
/// magnitude; the sign is reapplied afterwards. `rng` is consulted only by
/// [`RoundingScheme::Stochastic`].
pub fn round_wide<R: Rng + ?Sized>(value: i64, bp: u32, scheme: RoundingScheme, rng: &mut R) -> i8 {
    let mag = value.unsigned_abs();
    let m = match scheme {
        RoundingScheme::Nearest => nearest_magnitude(mag, bp),
        RoundingScheme::PseudoStochastic => pseudo_stochastic_magnitude(mag, bp),
        RoundingScheme::Stochastic => stochastic_magnitude(mag, bp, rng),
    };
    let m = saturate(m) as i8;
    if value < 0 {
        -m
    } else {
        m
    }
}

pub fn round_nearest(value: i32, bp: u32) -> i8 {
    let m = saturate(nearest_magnitude(value.unsigned_abs() as u64, bp.min(MAX_BP_32))) as i8;
    if value < 0 {
        -m
    } else {
        m
    }
}

pub fn round_pseudo_stochastic(value: i32, bp: u32) -> i8 {
    let m = saturate(pseudo_stochastic_magnitude(value.unsigned_abs() as u64, bp.min(MAX_BP_32))) as i8;
    if value < 0 {
        -m
    } else {
        m
    }
}

pub fn round_stochastic<R: Rng + ?Sized>(value: i32, bp: u32, rng: &mut R) -> i8 {
    let m = saturate(stochastic_magnitude(value.unsigned_abs() as u64, bp.min(MAX_BP_32), rng)) as i8;
    if value < 0 {
        -m
    } else {
        m
    }
}

#[inline]
fn with_sign(v: i32, mag: u32) -> i8 {
    let m = mag.min(Q_MAX as u32) as i8;
    if v < 0 {
        -m
    } else {
        m
    }
}

/// Narrows an accumulator by `bp` bits. The output scale is the input scale
/// plus `bp`.
pub fn shift_and_round<R: Rng + ?Sized>(
    t: &AccTensor,
    bp: u32,
    scheme: RoundingScheme,
    rng: &mut R,
) -> QTensor {
    let bp = bp.min(MAX_BP_32);
    let data: Vec<i8> = match scheme {
        _ if bp == 0 => t.data.iter().map(|&v| v.clamp(-Q_MAX, Q_MAX) as i8).collect(),
        RoundingScheme::Nearest if bp < MAX_BP_32 => {
            let half = 1u32 << (bp - 1);
            t.data.iter().map(|&v| with_sign(v, (v.unsigned_abs() + half) >> bp)).collect()
        }
        RoundingScheme::PseudoStochastic if bp < MAX_BP_32 => {
            let odd = bp & 1;
            let half_bits = bp / 2;
            let frac_mask = (1u32 << bp) - 1;
            let bottom_mask = (1u32 << half_bits) - 1;
            t.data
                .iter()
                .map(|&v| {
                    let mag = v.unsigned_abs();
                    let f = (mag & frac_mask) >> odd;
                    let up = ((f >> half_bits) > (f & bottom_mask)) as u32;
                    with_sign(v, (mag >> bp) + up)
                })
                .collect()
        }
        RoundingScheme::Nearest => t.data.iter().map(|&v| round_nearest(v, bp)).collect(),
        RoundingScheme::PseudoStochastic => {
            t.data.iter().map(|&v| round_pseudo_stochastic(v, bp)).collect()
        }
        RoundingScheme::Stochastic => t.data.iter().map(|&v| round_stochastic(v, bp, rng)).collect(),
    };
    QTensor::from_parts(t.shape.clone(), data, t.scale.saturating_add(bp as i8))
}

/// `shift_and_round` with the shift chosen to leave `keep` effective bits.
pub fn narrow_to<R: Rng + ?Sized>(
    t: &AccTensor,
    keep: u32,
    scheme: RoundingScheme,
    rng: &mut R,
) -> QTensor {
    let bp = narrowing_shift(effective_bitwidth(t), keep);
    shift_and_round(t, bp, scheme, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn acc(data: Vec<i32>) -> AccTensor {
        let n = data.len();
        AccTensor::new(vec![n], data, 0).unwrap()
    }

    #[test]
    fn bitwidth_cases() {
        assert_eq!(effective_bitwidth(&acc(vec![0, 0, 0])), 0);
        assert_eq!(effective_bitwidth(&acc(vec![1])), 1);
        assert_eq!(effective_bitwidth(&acc(vec![127])), 7);
        assert_eq!(effective_bitwidth(&acc(vec![128])), 8);
        assert_eq!(effective_bitwidth(&acc(vec![-128])), 8);
        // 5000 = 0b1_0011_1000_1000
        assert_eq!(effective_bitwidth(&acc(vec![300, -5000])), 13);
        assert_eq!(effective_bitwidth(&acc(vec![i32::MIN])), 32);
    }

    #[test]
    fn tensor_rounding_matches_scalar_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut values: Vec<i32> = (0..2000).map(|_| rng.gen::<i32>() >> rng.gen_range(0..31)).collect();
        values.extend([0, 1, -1, i32::MAX, i32::MIN, i32::MIN + 1, 127, -128, 255, -256]);
        let t = AccTensor::new(vec![values.len()], values.clone(), 0).unwrap();
        for bp in 0..=33 {
            let near = shift_and_round(&t, bp, RoundingScheme::Nearest, &mut rng);
            let pseudo = shift_and_round(&t, bp, RoundingScheme::PseudoStochastic, &mut rng);
            for (i, &v) in values.iter().enumerate() {
                assert_eq!(near.data()[i], round_nearest(v, bp), "nearest {v} >> {bp}");
                assert_eq!(pseudo.data()[i], round_pseudo_stochastic(v, bp), "pseudo {v} >> {bp}");
            }
        }
    }

    #[test]
    fn shift_and_round_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = acc(vec![300]);
        let q = shift_and_round(&t, 2, RoundingScheme::Nearest, &mut rng);
        assert_eq!(q.data(), &[75]);
        assert_eq!(q.scale(), 2);
        for scheme in RoundingScheme::ALL {
            let q = shift_and_round(&t, 0, scheme, &mut rng);
            assert_eq!(q.data(), &[127]);
            assert_eq!(q.scale(), 0);
        }
        let q = shift_and_round(&acc(vec![-53]), 4, RoundingScheme::Nearest, &mut rng);
        assert_eq!(q.data(), &[-3]);
    }

    #[test]
    fn pseudo_stochastic_examples() {
        assert_eq!(round_pseudo_stochastic(53, 4), 3);
        assert_eq!(round_pseudo_stochastic(57, 4), 4);
        assert_eq!(round_pseudo_stochastic(-57, 4), -4);
        // bp = 0 and bp = 1 both truncate
        assert_eq!(round_pseudo_stochastic(57, 0), 57);
        assert_eq!(round_pseudo_stochastic(3, 1), 1);
        // odd bp: 0b1_110 with bp 3 -> f = 0b110 >> 1 = 0b11, top 1 == bottom 1
        assert_eq!(round_pseudo_stochastic(0b1110, 3), 1);
        // 0b1_101 with bp 3 -> f = 0b10, top 1 > bottom 0
        assert_eq!(round_pseudo_stochastic(0b1101, 3), 2);
    }

    #[test]
    fn nearest_examples() {
        assert_eq!(round_nearest(40, 4), 3);
        assert_eq!(round_nearest(-40, 4), -3);
        assert_eq!(round_nearest(53, 4), 3);
        assert_eq!(round_nearest(59, 4), 4);
        assert_eq!(round_nearest(0, 4), 0);
    }

    #[test]
    fn increment_overflow_saturates() {
        // 127.9375 rounds up to 128, which saturates
        let v = (127 << 4) | 0xF;
        assert_eq!(round_nearest(v, 4), 127);
        assert_eq!(round_nearest(-v, 4), -127);
        assert_eq!(round_pseudo_stochastic(v, 4), 127);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(round_stochastic(v, 4, &mut rng), 127);
        }
    }

    #[test]
    fn stochastic_exact_value_is_never_perturbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(round_stochastic(48, 4, &mut rng), 3);
        }
    }

    fn stochastic_mean(value: i32, bp: u32, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sum: i64 = (0..n).map(|_| round_stochastic(value, bp, &mut rng) as i64).sum();
        sum as f64 / n as f64
    }

    #[test]
    fn stochastic_half_fraction_mean() {
        // f * 2^-4 = 1/2, so each draw is Bernoulli(1/2): sd of the mean is 0.5/sqrt(n)
        let n = 100_000;
        let se = 0.5 / (n as f64).sqrt();
        let m = stochastic_mean(56, 4, n, 7);
        assert!((m - 3.5).abs() < 3.0 * se, "mean {m}");
        let m = stochastic_mean(-56, 4, n, 8);
        assert!((m + 3.5).abs() < 3.0 * se, "mean {m}");
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("nearest".parse::<RoundingScheme>().unwrap(), RoundingScheme::Nearest);
        assert_eq!(
            "pseudo_stochastic".parse::<RoundingScheme>().unwrap(),
            RoundingScheme::PseudoStochastic
        );
        assert_eq!("Stochastic".parse::<RoundingScheme>().unwrap(), RoundingScheme::Stochastic);
        assert!("floor".parse::<RoundingScheme>().is_err());
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(QTensor::new(vec![2, 2], vec![0; 3], 0).is_err());
        assert!(QTensor::new(vec![1], vec![-128], 0).is_err());
        assert!(AccTensor::new(vec![3], vec![0; 4], 0).is_err());
    }
}
