use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Error;
use crate::network::spec::NetworkSpec;
use crate::qtensor::{QTensor, Q_MAX};

/// Standard deviation, in int8 units, of the discretized Gaussian init.
pub const NORMAL_SIGMA: f64 = 42.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    #[default]
    Uniform,
    Normal,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Uniform => "uniform",
            InitScheme::Normal => "normal",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(InitScheme::Uniform),
            "normal" | "gaussian" => Ok(InitScheme::Normal),
            other => Err(Error::Config(format!("unknown init scheme `{other}`"))),
        }
    }
}

/// Static weight scale: `round(log2(sqrt(2 / fan_in))) - 7`, so the largest
/// int8 weight represents roughly the He bound `sqrt(2 / fan_in)`.
pub fn weight_scale(fan_in: usize) -> i8 {
    let e = (0.5 * (2.0 / fan_in.max(1) as f64).log2()).round() as i32 - 7;
    e.clamp(i8::MIN as i32, i8::MAX as i32) as i8
}

pub fn sample_weights<R: Rng + ?Sized>(n: usize, scheme: InitScheme, rng: &mut R) -> Vec<i8> {
    match scheme {
        InitScheme::Uniform => (0..n).map(|_| rng.gen_range(-127i8..=127)).collect(),
        InitScheme::Normal => {
            let dist = Normal::new(0.0, NORMAL_SIGMA).expect("finite sigma");
            (0..n)
                .map(|_| {
                    let v: f64 = dist.sample(rng);
                    v.round().clamp(-(Q_MAX as f64), Q_MAX as f64) as i8
                })
                .collect()
        }
    }
}

/// Fills every weighted layer in order, consuming `rng` layer by layer.
pub fn init_weights<R: Rng + ?Sized>(spec: &mut NetworkSpec, scheme: InitScheme, rng: &mut R) {
    for layer in &mut spec.layers {
        let (Some(shape), Some(fan_in)) = (layer.kind.weight_shape(), layer.kind.fan_in()) else {
            continue;
        };
        let n = shape.iter().product();
        let data = sample_weights(n, scheme, rng);
        layer.weights = Some(QTensor::from_parts(shape, data, weight_scale(fan_in)));
    }
}
