//! fp64 SGD-with-momentum trainer over the same layer graph, used as a
//! reference curve. Dropout is skipped and there are no biases, matching the
//! integer network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{pixel_value, Dataset};
use crate::error::{Error, Result};
use crate::kernels::conv::ConvGeometry;
use crate::network::{LayerKind, NetworkSpec};
use crate::oracle::{cross_entropy_fp, softmax_grad_fp};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadowConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, momentum: 0.9, epochs: 20, batch_size: 256, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadowEpoch {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's training batches.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

enum FpLayer {
    Conv { geom: ConvGeometry, w: Vec<f64>, v: Vec<f64> },
    Fc { inputs: usize, outputs: usize, w: Vec<f64>, v: Vec<f64> },
    Relu,
    MaxPool2 { channels: usize, h: usize, w: usize },
    Identity,
}

enum FpCache {
    Input(Vec<f64>),
    Mask(Vec<bool>),
    Pool { argmax: Vec<usize>, input_len: usize },
    None,
}

/// Floating-point twin of a [`NetworkSpec`].
pub struct FpNetwork {
    layers: Vec<FpLayer>,
    input_len: usize,
    cache: Vec<FpCache>,
}

/// `c (m x n) += a (m x k) * b (k x n)`.
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in row.iter_mut().zip(&b[t * n..(t + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// One sample's `(C*kh*kw) x P` patch matrix.
fn im2col_f(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.output_h(), g.output_w());
    let p = oh * ow;
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.input_h {
                        continue;
                    }
                    for xx in 0..ow {
                        let ix = (xx * g.stride + kj) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.input_w {
                            continue;
                        }
                        cols[row * p + y * ow + xx] =
                            x[(c * g.input_h + iy as usize) * g.input_w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_f(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let (oh, ow) = (g.output_h(), g.output_w());
    let p = oh * ow;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.input_h {
                        continue;
                    }
                    for xx in 0..ow {
                        let ix = (xx * g.stride + kj) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.input_w {
                            continue;
                        }
                        out[(c * g.input_h + iy as usize) * g.input_w + ix as usize] += cols[row * p + y * ow + xx];
                    }
                }
            }
        }
    }
}

impl FpNetwork {
    /// He-normal weights (`σ = sqrt(2 / fan_in)`) drawn from `seed`.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.output_shape()?;
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |n: usize, fan_in: usize| -> Vec<f64> {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite sigma");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        };
        let layers = spec
            .layers
            .iter()
            .zip(&shapes)
            .map(|(l, shape)| match &l.kind {
                LayerKind::Conv(g) => {
                    let n = g.out_channels * g.patch_len();
                    FpLayer::Conv { geom: *g, w: he(n, g.fan_in()), v: vec![0.0; n] }
                }
                LayerKind::Fc { in_features, out_features } => FpLayer::Fc {
                    inputs: *in_features,
                    outputs: *out_features,
                    w: he(in_features * out_features, *in_features),
                    v: vec![0.0; in_features * out_features],
                },
                LayerKind::Relu => FpLayer::Relu,
                LayerKind::MaxPool2 => FpLayer::MaxPool2 { channels: shape[0], h: shape[1], w: shape[2] },
                LayerKind::Dropout { .. } => FpLayer::Identity,
            })
            .collect::<Vec<_>>();
        let cache = layers.iter().map(|_| FpCache::None).collect();
        Ok(Self { layers, input_len: spec.input_shape.iter().product(), cache })
    }

    /// Twin carrying the dequantized weights of an integer network spec.
    pub fn from_quantized(spec: &NetworkSpec) -> Result<Self> {
        let mut net = Self::new(spec, 0)?;
        for (fl, l) in net.layers.iter_mut().zip(&spec.layers) {
            if let (FpLayer::Conv { w, .. } | FpLayer::Fc { w, .. }, Some(q)) = (fl, l.weights.as_ref()) {
                *w = q.to_f64();
            }
        }
        Ok(net)
    }

    /// Logits for a batch of `n` flattened samples.
    pub fn forward(&mut self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        if x.len() != n * self.input_len {
            return Err(Error::shape("FpNetwork input", &[n * self.input_len], &[x.len()]));
        }
        let mut a = x.to_vec();
        for (layer, cache) in self.layers.iter().zip(self.cache.iter_mut()) {
            match layer {
                FpLayer::Conv { geom: g, w, .. } => {
                    let (o, p, k) = (g.out_channels, g.positions(), g.patch_len());
                    let per_in = g.in_channels * g.input_h * g.input_w;
                    let mut out = vec![0.0; n * o * p];
                    for b in 0..n {
                        let cols = im2col_f(&a[b * per_in..(b + 1) * per_in], g);
                        matmul_acc(w, &cols, &mut out[b * o * p..(b + 1) * o * p], o, k, p);
                    }
                    *cache = FpCache::Input(std::mem::replace(&mut a, out));
                }
                FpLayer::Fc { inputs, outputs, w, .. } => {
                    let wt = transpose(w, *outputs, *inputs);
                    let mut out = vec![0.0; n * outputs];
                    matmul_acc(&a, &wt, &mut out, n, *inputs, *outputs);
                    *cache = FpCache::Input(std::mem::replace(&mut a, out));
                }
                FpLayer::Relu => {
                    let mask: Vec<bool> = a.iter().map(|&v| v > 0.0).collect();
                    for (v, &m) in a.iter_mut().zip(&mask) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                    *cache = FpCache::Mask(mask);
                }
                &FpLayer::MaxPool2 { channels, h, w } => {
                    let planes = n * channels;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut out = Vec::with_capacity(planes * oh * ow);
                    let mut argmax = Vec::with_capacity(planes * oh * ow);
                    for pl in 0..planes {
                        let base = pl * h * w;
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut best = base + 2 * y * w + 2 * xx;
                                for idx in [best + 1, best + w, best + w + 1] {
                                    if a[idx] > a[best] {
                                        best = idx;
                                    }
                                }
                                out.push(a[best]);
                                argmax.push(best);
                            }
                        }
                    }
                    *cache = FpCache::Pool { argmax, input_len: a.len() };
                    a = out;
                }
                FpLayer::Identity => *cache = FpCache::None,
            }
        }
        Ok(a)
    }

    /// Backpropagates `d loss / d logits` and takes one momentum step.
    pub fn backward_step(&mut self, grad: &[f64], n: usize, cfg: &ShadowConfig) {
        let grads = self.weight_gradients(grad, n);
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            if let (FpLayer::Conv { w, v, .. } | FpLayer::Fc { w, v, .. }, Some(g)) = (layer, g) {
                sgd(w, v, &g, n, cfg);
            }
        }
    }

    /// Summed weight gradients of the cached forward pass, one entry per
    /// layer, `None` for unweighted layers.
    pub fn weight_gradients(&mut self, grad: &[f64], n: usize) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = self.layers.iter().map(|_| None).collect();
        let mut e = grad.to_vec();
        for idx in (0..self.layers.len()).rev() {
            let cache = std::mem::replace(&mut self.cache[idx], FpCache::None);
            let first = idx == 0;
            match (&self.layers[idx], cache) {
                (FpLayer::Conv { geom: g, w, .. }, FpCache::Input(a)) => {
                    let (o, p, k) = (g.out_channels, g.positions(), g.patch_len());
                    let per_in = g.in_channels * g.input_h * g.input_w;
                    let mut gw = vec![0.0; o * k];
                    let mut next = if first { Vec::new() } else { vec![0.0; n * per_in] };
                    let wt = transpose(w, o, k);
                    for b in 0..n {
                        let cols = im2col_f(&a[b * per_in..(b + 1) * per_in], g);
                        let eb = &e[b * o * p..(b + 1) * o * p];
                        let cols_t = transpose(&cols, k, p);
                        matmul_acc(eb, &cols_t, &mut gw, o, p, k);
                        if !first {
                            let mut dcols = vec![0.0; k * p];
                            matmul_acc(&wt, eb, &mut dcols, k, o, p);
                            col2im_f(&dcols, g, &mut next[b * per_in..(b + 1) * per_in]);
                        }
                    }
                    out[idx] = Some(gw);
                    e = next;
                }
                (&FpLayer::Fc { inputs: i, outputs: o, ref w, .. }, FpCache::Input(a)) => {
                    let et = transpose(&e, n, o);
                    let mut gw = vec![0.0; o * i];
                    matmul_acc(&et, &a, &mut gw, o, n, i);
                    let mut next = Vec::new();
                    if !first {
                        next = vec![0.0; n * i];
                        matmul_acc(&e, w, &mut next, n, o, i);
                    }
                    out[idx] = Some(gw);
                    e = next;
                }
                (FpLayer::Relu, FpCache::Mask(mask)) => {
                    for (v, m) in e.iter_mut().zip(mask) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                }
                (FpLayer::MaxPool2 { .. }, FpCache::Pool { argmax, input_len }) => {
                    let mut next = vec![0.0; input_len];
                    for (&v, &i) in e.iter().zip(&argmax) {
                        next[i] = v;
                    }
                    e = next;
                }
                _ => {}
            }
            if e.is_empty() {
                break;
            }
        }
        out
    }
}

/// Mean-gradient SGD with momentum: `v ← μv + g/n`, `w ← w − ηv`.
fn sgd(w: &mut [f64], v: &mut [f64], g: &[f64], n: usize, cfg: &ShadowConfig) {
    let inv = 1.0 / n as f64;
    for ((wv, vv), &gv) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *vv = cfg.momentum * *vv + gv * inv;
        *wv -= cfg.learning_rate * *vv;
    }
}

fn to_input(ds: &Dataset, indices: &[usize]) -> Vec<f64> {
    indices.iter().flat_map(|&i| ds.image(i).iter().map(|&p| pixel_value(p))).collect()
}

fn accuracy(net: &mut FpNetwork, ds: &Dataset, classes: usize, batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch) {
        let logits = net.forward(&to_input(ds, chunk), chunk.len())?;
        for (row, &i) in logits.chunks_exact(classes).zip(chunk) {
            if argmax_f(row) == ds.label(i) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len().max(1) as f64)
}

fn argmax_f(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Trains an fp64 twin of `spec` and returns one record per epoch.
pub fn shadow_train_fp(
    spec: &NetworkSpec,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &ShadowConfig,
) -> Result<Vec<ShadowEpoch>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let classes = spec.num_classes;
    let mut net = FpNetwork::new(spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let logits = net.forward(&to_input(train, chunk), n)?;
            let mut grad = Vec::with_capacity(logits.len());
            for (row, &i) in logits.chunks_exact(classes).zip(chunk) {
                let label = train.label(i);
                loss_sum += cross_entropy_fp(row, label);
                correct += usize::from(argmax_f(row) == label);
                grad.extend(softmax_grad_fp(row, label));
            }
            net.backward_step(&grad, n, cfg);
        }
        let val_acc = val.map(|v| accuracy(&mut net, v, classes, cfg.batch_size)).transpose()?;
        curve.push(ShadowEpoch {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len().max(1) as f64,
            train_acc: correct as f64 / train.len().max(1) as f64,
            val_acc,
        });
    }
    Ok(curve)
}
