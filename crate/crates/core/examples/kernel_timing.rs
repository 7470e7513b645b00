//! Times each kernel of one training step for a preset.

use std::time::Instant;

use int8_train::kernels::{conv_forward, conv_grad_input, conv_grad_weight, fc_forward, fc_grad_input, fc_grad_weight};
use int8_train::network::{init_weights, InitScheme, LayerKind, NetworkSpec};
use int8_train::QTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut args = std::env::args().skip(1);
    let arch = args.next().unwrap_or_else(|| "lenet-mnist".into());
    let batch: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(256);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut spec = NetworkSpec::preset(&arch).unwrap();
    init_weights(&mut spec, InitScheme::Uniform, &mut rng);
    let shapes = spec.shapes().unwrap();
    let mut rand_q = |shape: Vec<usize>| {
        let n = shape.iter().product();
        QTensor::new(shape, (0..n).map(|_| rng.gen_range(-127i8..=127)).collect(), 0).unwrap()
    };
    let reps = 5;
    for (i, layer) in spec.layers.iter().enumerate() {
        let w = match &layer.weights {
            Some(w) => w,
            None => continue,
        };
        let mut input_shape = vec![batch];
        input_shape.extend(&shapes[i]);
        let mut out_shape = vec![batch];
        out_shape.extend(&shapes[i + 1]);
        let a = rand_q(input_shape);
        let e = rand_q(out_shape);
        let t = Instant::now();
        for _ in 0..reps {
            match &layer.kind {
                LayerKind::Conv(g) => drop(conv_forward(&a, w, g).unwrap()),
                _ => drop(fc_forward(&a, w).unwrap()),
            }
        }
        let fwd = t.elapsed().as_secs_f64() / reps as f64;
        let t = Instant::now();
        for _ in 0..reps {
            match &layer.kind {
                LayerKind::Conv(g) => drop(conv_grad_input(&e, w, g).unwrap()),
                _ => drop(fc_grad_input(&e, w).unwrap()),
            }
        }
        let gi = t.elapsed().as_secs_f64() / reps as f64;
        let t = Instant::now();
        for _ in 0..reps {
            match &layer.kind {
                LayerKind::Conv(g) => drop(conv_grad_weight(&a, &e, g).unwrap()),
                _ => drop(fc_grad_weight(&a, &e).unwrap()),
            }
        }
        let gw = t.elapsed().as_secs_f64() / reps as f64;
        let macs = w.len() as f64 * shapes[i + 1].iter().product::<usize>() as f64 / w.shape()[0] as f64 * batch as f64;
        println!(
            "layer {i:>2}: fwd {:>7.2} ms  gi {:>7.2} ms  gw {:>7.2} ms  ({:.2} GMAC each, fwd {:.1} GMAC/s)",
            fwd * 1e3,
            gi * 1e3,
            gw * 1e3,
            macs / 1e9,
            macs / fwd / 1e9
        );
    }
}
