//! Integer forward pass, backward pass and discrete weight update.
//!
//! Every weighted layer accumulates in int32, applies a following ReLU
//! directly on the accumulator, and narrows the result back to 7 effective
//! bits. Errors are narrowed the same way; their scales are dropped because
//! the update rule only looks at gradient bit patterns relative to their own
//! effective bitwidth.

mod init;
mod spec;

pub use init::{init_weights, sample_weights, weight_scale, InitScheme, NORMAL_SIGMA};
pub use spec::{LayerKind, LayerSpec, NetworkSpec, PRESETS};

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::activation::{
    dropout_pow2, maxpool2, maxpool2_backward, relu, relu_acc, relu_backward, Mode, PoolIndices,
};
use crate::kernels::conv::{conv_forward, conv_grad_input, conv_grad_weight};
use crate::kernels::fc::{fc_forward, fc_grad_input, fc_grad_weight};
use crate::loss::loss_gradient;
use crate::qtensor::{
    effective_bitwidth, fraction_halves, narrow_to, narrowing_shift, shift_and_round, AccTensor, QTensor,
    RoundingScheme, ACT_BITS,
};

/// Largest permitted update magnitude in bits.
pub const MAX_UPDATE_BITS: u32 = 5;

/// Rounding scheme used at each kind of rounding site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundingConfig {
    /// Forward activations and backward errors.
    pub activations: RoundingScheme,
    /// Weight updates.
    pub gradients: RoundingScheme,
    /// Loss-layer error.
    pub loss: RoundingScheme,
}

impl Default for RoundingConfig {
    fn default() -> Self {
        Self {
            activations: RoundingScheme::Nearest,
            gradients: RoundingScheme::PseudoStochastic,
            loss: RoundingScheme::Stochastic,
        }
    }
}

enum Cache {
    /// Input to a weighted layer.
    Input(QTensor),
    Mask(Vec<bool>),
    Pool(PoolIndices),
    Dropout(Option<Vec<bool>>),
}

/// Histogram of the low fraction half seen by pseudo stochastic rounding of
/// one layer's weight updates. Each sample contributes its top 4 bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FractionProbe {
    pub layer: usize,
    pub bins: [u64; 16],
    /// Nonzero values whose fraction half was narrower than 4 bits.
    pub skipped: u64,
}

impl FractionProbe {
    pub fn new(layer: usize) -> Self {
        Self { layer, bins: [0; 16], skipped: 0 }
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }

    fn record(&mut self, g32: &AccTensor, bp: u32) {
        for &v in g32.data() {
            if v == 0 {
                continue;
            }
            let h = fraction_halves(v.unsigned_abs() as u64, bp);
            if h.half_bits < 4 {
                self.skipped += 1;
            } else {
                self.bins[(h.bottom >> (h.half_bits - 4)) as usize] += 1;
            }
        }
    }
}

/// Weight gradients of one backward pass, indexed like the layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub per_layer: Vec<Option<AccTensor>>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = (usize, &AccTensor)> {
        self.per_layer.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Final-layer int8 logits from the training-mode forward pass.
    pub logits: QTensor,
    /// Rounded update applied to each weighted layer.
    pub updates: Vec<Option<QTensor>>,
}

pub struct Network {
    spec: NetworkSpec,
    rounding: RoundingConfig,
    batch_limit: usize,
    cache: Vec<Option<Cache>>,
    probe: Option<FractionProbe>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("name", &self.spec.name)
            .field("layers", &self.spec.layers.len())
            .field("rounding", &self.rounding)
            .field("batch_limit", &self.batch_limit)
            .finish()
    }
}

impl Network {
    /// Validates the layer graph and that a batch of `max_batch` samples
    /// cannot overflow any int32 weight-gradient accumulator.
    pub fn new(spec: NetworkSpec, rounding: RoundingConfig, max_batch: usize) -> Result<Self> {
        spec.output_shape()?;
        let limit = spec.max_batch();
        if max_batch == 0 || max_batch > limit {
            return Err(Error::Config(format!(
                "batch size {max_batch} not in 1..={limit} for `{}` (int32 gradient bound)",
                spec.name
            )));
        }
        let n = spec.layers.len();
        Ok(Self {
            spec,
            rounding,
            batch_limit: max_batch,
            cache: (0..n).map(|_| None).collect(),
            probe: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn into_spec(self) -> NetworkSpec {
        self.spec
    }

    pub fn rounding(&self) -> RoundingConfig {
        self.rounding
    }

    pub fn set_rounding(&mut self, rounding: RoundingConfig) {
        self.rounding = rounding;
    }

    pub fn batch_limit(&self) -> usize {
        self.batch_limit
    }

    pub fn weights(&self, layer: usize) -> Option<&QTensor> {
        self.spec.layers.get(layer).and_then(|l| l.weights.as_ref())
    }

    /// Starts histogramming the weight-update fraction bits of `layer`.
    pub fn attach_probe(&mut self, layer: usize) -> Result<()> {
        match self.spec.layers.get(layer) {
            Some(l) if l.kind.is_weighted() => {
                self.probe = Some(FractionProbe::new(layer));
                Ok(())
            }
            _ => Err(Error::Usage(format!("layer {layer} has no weights to probe"))),
        }
    }

    pub fn take_probe(&mut self) -> Option<FractionProbe> {
        self.probe.take()
    }

    fn check_input(&self, input: &QTensor) -> Result<usize> {
        let want = self.spec.input_shape;
        match input.shape() {
            [n, c, h, w] if [*c, *h, *w] == want => {
                if *n > self.batch_limit {
                    return Err(Error::Usage(format!(
                        "batch of {n} exceeds the configured limit {}",
                        self.batch_limit
                    )));
                }
                Ok(*n)
            }
            other => Err(Error::shape("network input", &[0, want[0], want[1], want[2]], other)),
        }
    }

    /// Runs the network on a quantized `[N, C, H, W]` batch and returns the
    /// int8 logits. Training mode keeps what the backward pass needs; in
    /// evaluation mode stochastic rounding is replaced by round-to-nearest
    /// and dropout is the identity.
    pub fn forward<R: Rng + ?Sized>(&mut self, input: &QTensor, mode: Mode, rng: &mut R) -> Result<QTensor> {
        self.check_input(input)?;
        let train = mode == Mode::Train;
        let scheme = match mode {
            Mode::Train => self.rounding.activations,
            Mode::Eval => self.rounding.activations.deterministic(),
        };
        for c in &mut self.cache {
            *c = None;
        }
        let mut a = input.clone();
        let mut i = 0;
        while i < self.spec.layers.len() {
            let layer = &self.spec.layers[i];
            match &layer.kind {
                LayerKind::Conv(_) | LayerKind::Fc { .. } => {
                    let w = layer.weights.as_ref().ok_or_else(|| Error::Network(format!("layer {i}: missing weights")))?;
                    let mut acc = match &layer.kind {
                        LayerKind::Conv(g) => conv_forward(&a, w, g)?,
                        _ => fc_forward(&a, w)?,
                    };
                    let fused = matches!(self.spec.layers.get(i + 1).map(|l| &l.kind), Some(LayerKind::Relu));
                    let mask = fused.then(|| relu_acc(&mut acc));
                    let out = narrow_to(&acc, ACT_BITS, scheme, rng);
                    if train {
                        self.cache[i] = Some(Cache::Input(a));
                        if let Some(mask) = mask {
                            self.cache[i + 1] = Some(Cache::Mask(mask));
                        }
                    }
                    a = out;
                    if fused {
                        i += 1;
                    }
                }
                LayerKind::Relu => {
                    let mask = relu(&mut a);
                    if train {
                        self.cache[i] = Some(Cache::Mask(mask));
                    }
                }
                LayerKind::MaxPool2 => {
                    let (out, idx) = maxpool2(&a)?;
                    if train {
                        self.cache[i] = Some(Cache::Pool(idx));
                    }
                    a = out;
                }
                LayerKind::Dropout { keep_log2 } => {
                    let mask = dropout_pow2(&mut a, *keep_log2, mode, rng)?;
                    if train {
                        self.cache[i] = Some(Cache::Dropout(mask));
                    }
                }
            }
            i += 1;
        }
        Ok(a)
    }

    /// Propagates the loss error back through the cached training forward
    /// pass and returns the raw int32 weight gradients.
    pub fn backward<R: Rng + ?Sized>(&mut self, e_last: &QTensor, rng: &mut R) -> Result<Gradients> {
        let first_weighted = self
            .spec
            .weighted_layers()
            .map(|(i, _)| i)
            .next()
            .ok_or_else(|| Error::Network("network has no weighted layer".into()))?;
        if self.cache[first_weighted].is_none() {
            return Err(Error::Usage("backward called without a training-mode forward pass".into()));
        }
        let scheme = self.rounding.activations;
        let mut per_layer: Vec<Option<AccTensor>> = (0..self.spec.layers.len()).map(|_| None).collect();
        let mut e = e_last.clone();
        for i in (first_weighted..self.spec.layers.len()).rev() {
            let cache = self.cache[i].take();
            let layer = &self.spec.layers[i];
            match (&layer.kind, cache) {
                (LayerKind::Conv(_) | LayerKind::Fc { .. }, Some(Cache::Input(a))) => {
                    let w = layer.weights.as_ref().expect("validated weights");
                    let g32 = match &layer.kind {
                        LayerKind::Conv(g) => {
                            let e4 = e.reshape(g.output_shape(a.shape()[0]))?;
                            let g32 = conv_grad_weight(&a, &e4, g)?;
                            e = e4;
                            g32
                        }
                        _ => fc_grad_weight(&a, &e)?,
                    };
                    per_layer[i] = Some(g32);
                    if i > first_weighted {
                        let e32 = match &layer.kind {
                            LayerKind::Conv(g) => conv_grad_input(&e, w, g)?,
                            _ => fc_grad_input(&e, w)?,
                        };
                        let mut next = narrow_to(&e32, ACT_BITS, scheme, rng).reshape(a.shape().to_vec())?;
                        next.set_scale(0);
                        e = next;
                    }
                }
                (LayerKind::Relu, Some(Cache::Mask(mask))) => relu_backward(&mut e, &mask),
                (LayerKind::MaxPool2, Some(Cache::Pool(idx))) => {
                    let pooled = e.reshape(pool_output_shape(&idx))?;
                    e = maxpool2_backward(&pooled, &idx)?;
                }
                (LayerKind::Dropout { .. }, Some(Cache::Dropout(mask))) => {
                    if let Some(mask) = mask {
                        relu_backward(&mut e, &mask);
                    }
                }
                _ => {
                    return Err(Error::Usage(format!(
                        "layer {i}: backward called without a matching training forward pass"
                    )))
                }
            }
        }
        Ok(Gradients { per_layer })
    }

    /// Applies `w ← clamp(w − g)` where `g` is each raw gradient narrowed to
    /// `m_u` effective bits. Weight scales never change.
    pub fn update_weights<R: Rng + ?Sized>(
        &mut self,
        grads: &Gradients,
        m_u: u32,
        rng: &mut R,
    ) -> Result<Vec<Option<QTensor>>> {
        if !(1..=MAX_UPDATE_BITS).contains(&m_u) {
            return Err(Error::Config(format!("m_u = {m_u} outside 1..={MAX_UPDATE_BITS}")));
        }
        if grads.per_layer.len() != self.spec.layers.len() {
            return Err(Error::shape("update_weights", &[self.spec.layers.len()], &[grads.per_layer.len()]));
        }
        let mut applied: Vec<Option<QTensor>> = (0..grads.per_layer.len()).map(|_| None).collect();
        for (i, g32) in grads.iter() {
            let Some(w) = self.spec.layers[i].weights.as_mut() else {
                return Err(Error::Network(format!("layer {i}: gradient for unweighted layer")));
            };
            if g32.shape() != w.shape() {
                return Err(Error::shape("update_weights", w.shape(), g32.shape()));
            }
            let bp = narrowing_shift(effective_bitwidth(g32), m_u);
            if let Some(probe) = self.probe.as_mut().filter(|p| p.layer == i) {
                probe.record(g32, bp);
            }
            let g = shift_and_round(g32, bp, self.rounding.gradients, rng);
            apply_update(w, &g);
            applied[i] = Some(g);
        }
        Ok(applied)
    }

    /// Forward, integer loss gradient, backward and update on one batch.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        input: &QTensor,
        labels: &[usize],
        m_u: u32,
        rng: &mut R,
    ) -> Result<StepOutput> {
        let logits = self.forward(input, Mode::Train, rng)?;
        let e = loss_gradient(&logits, labels, self.rounding.loss, rng)?;
        let grads = self.backward(&e, rng)?;
        let updates = self.update_weights(&grads, m_u, rng)?;
        Ok(StepOutput { logits, updates })
    }

    /// Evaluation-mode logits. Uses no randomness.
    pub fn logits(&mut self, input: &QTensor) -> Result<QTensor> {
        // Evaluation never draws from the stream: dropout is off and the
        // rounding scheme is deterministic.
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        self.forward(input, Mode::Eval, &mut unused)
    }

    /// Arg-max class per sample; ties go to the lowest index.
    pub fn predict(&mut self, input: &QTensor) -> Result<Vec<usize>> {
        let logits = self.logits(input)?;
        Ok(argmax_rows(&logits))
    }
}

fn pool_output_shape(idx: &PoolIndices) -> Vec<usize> {
    let s = &idx.input_shape;
    vec![s[0], s[1], s[2] / 2, s[3] / 2]
}

/// `w ← clamp(w − g, −127, 127)`.
pub fn apply_update(w: &mut QTensor, g: &QTensor) {
    for (wv, &gv) in w.data_mut().iter_mut().zip(g.data()) {
        *wv = (*wv as i32 - gv as i32).clamp(-127, 127) as i8;
    }
}

/// Row-wise arg-max of a `[N, classes]` tensor, lowest index on ties.
pub fn argmax_rows(logits: &QTensor) -> Vec<usize> {
    let classes = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::conv::ConvGeometry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_layer(kind: LayerKind, weights: QTensor, input_shape: [usize; 3]) -> Network {
        let spec = NetworkSpec {
            name: "test".into(),
            input_shape,
            num_classes: weights.shape()[0],
            layers: vec![LayerSpec { kind, weights: Some(weights) }],
        };
        Network::new(spec, RoundingConfig::default(), 16).unwrap()
    }

    fn fc_net(w: QTensor) -> Network {
        let (o, i) = (w.shape()[0], w.shape()[1]);
        single_layer(LayerKind::Fc { in_features: i, out_features: o }, w, [1, 1, i])
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut net = fc_net(QTensor::zeros(vec![3, 4], -9));
        let x = QTensor::new(vec![2, 1, 1, 4], vec![5; 8], -7).unwrap();
        let logits = net.logits(&x).unwrap();
        assert_eq!(logits.data(), &[0; 6]);
        assert_eq!(logits.scale(), -16);
        assert_eq!(net.predict(&x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn conv_pointwise_no_shift() {
        // the conv is the final layer here only for the test; wrap as 1 class
        let g = ConvGeometry::new(1, 1, (1, 1), 1, 0, (1, 1)).unwrap();
        let spec = NetworkSpec {
            name: "t".into(),
            input_shape: [1, 1, 1],
            num_classes: 1,
            layers: vec![
                LayerSpec { kind: LayerKind::Conv(g), weights: Some(QTensor::new(vec![1, 1, 1, 1], vec![2], -4).unwrap()) },
                LayerSpec {
                    kind: LayerKind::Fc { in_features: 1, out_features: 1 },
                    weights: Some(QTensor::new(vec![1, 1], vec![1], 0).unwrap()),
                },
            ],
        };
        let mut net = Network::new(spec, RoundingConfig::default(), 1).unwrap();
        let x = QTensor::new(vec![1, 1, 1, 1], vec![3], -3).unwrap();
        let out = net.logits(&x).unwrap();
        // 3*2 = 6 at scale -7, then times 1 at scale 0
        assert_eq!(out.data(), &[6]);
        assert_eq!(out.scale(), -7);
    }

    #[test]
    fn wide_accumulator_is_shifted() {
        // 300 = 3 * 100 has 9 bits, so 2 bits are shifted out
        let mut net = fc_net(QTensor::new(vec![1, 1], vec![100], 0).unwrap());
        let x = QTensor::new(vec![1, 1, 1, 1], vec![3], 0).unwrap();
        let out = net.logits(&x).unwrap();
        assert_eq!(out.data(), &[75]);
        assert_eq!(out.scale(), 2);
    }

    #[test]
    fn zero_error_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = NetworkSpec::preset("lenet-mnist").unwrap();
        init_weights(&mut spec, InitScheme::Uniform, &mut rng);
        let mut net = Network::new(spec, RoundingConfig::default(), 4).unwrap();
        let x = QTensor::new(vec![2, 1, 28, 28], (0..1568).map(|i| (i % 200 - 100) as i8).collect(), -7).unwrap();
        net.forward(&x, Mode::Train, &mut rng).unwrap();
        let grads = net.backward(&QTensor::zeros(vec![2, 10], 0), &mut rng).unwrap();
        assert_eq!(grads.iter().count(), 5);
        assert!(grads.iter().all(|(_, g)| g.data().iter().all(|&v| v == 0)));
        let before = net.spec().clone();
        net.update_weights(&grads, 3, &mut rng).unwrap();
        assert_eq!(net.spec(), &before);
    }

    #[test]
    fn single_layer_gradient_is_grad_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = QTensor::new(vec![2, 3], vec![10, -20, 30, 5, 6, -7], -8).unwrap();
        let mut net = fc_net(w.clone());
        let x = QTensor::new(vec![2, 1, 1, 3], vec![1, 2, 3, -4, 5, -6], -7).unwrap();
        net.forward(&x, Mode::Train, &mut rng).unwrap();
        let e = QTensor::new(vec![2, 2], vec![3, -3, -1, 1], 0).unwrap();
        let grads = net.backward(&e, &mut rng).unwrap();
        let want = fc_grad_weight(&x.clone().reshape(vec![2, 3]).unwrap(), &e).unwrap();
        assert_eq!(grads.per_layer[0].as_ref().unwrap().data(), want.data());
    }

    #[test]
    fn two_layer_chain_rule() {
        // x (1x2) -> W1 (2x2) -> relu -> W2 (2x2)
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = NetworkSpec {
            name: "chain".into(),
            input_shape: [1, 1, 2],
            num_classes: 2,
            layers: vec![
                LayerSpec {
                    kind: LayerKind::Fc { in_features: 2, out_features: 2 },
                    weights: Some(QTensor::new(vec![2, 2], vec![3, 1, -2, 4], 0).unwrap()),
                },
                LayerSpec::new(LayerKind::Relu),
                LayerSpec {
                    kind: LayerKind::Fc { in_features: 2, out_features: 2 },
                    weights: Some(QTensor::new(vec![2, 2], vec![1, 2, 3, -1], 0).unwrap()),
                },
            ],
        };
        let mut net = Network::new(spec, RoundingConfig::default(), 1).unwrap();
        let x = QTensor::new(vec![1, 1, 1, 2], vec![2, 5], 0).unwrap();
        net.forward(&x, Mode::Train, &mut rng).unwrap();
        // h = relu([3*2+1*5, -2*2+4*5]) = [11, 16]
        let e = QTensor::new(vec![1, 2], vec![1, -2], 0).unwrap();
        let grads = net.backward(&e, &mut rng).unwrap();
        // g2 = e^T h
        assert_eq!(grads.per_layer[2].as_ref().unwrap().data(), &[11, 16, -22, -32]);
        // e1 = e W2 = [1 - 6, 2 + 2] = [-5, 4]; both units active
        // g1 = e1^T x
        assert_eq!(grads.per_layer[0].as_ref().unwrap().data(), &[-10, -25, 8, 20]);
    }

    #[test]
    fn update_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = fc_net(QTensor::new(vec![1, 1], vec![50], -7).unwrap());
        net.set_rounding(RoundingConfig { gradients: RoundingScheme::Nearest, ..Default::default() });
        let grads = Gradients { per_layer: vec![Some(AccTensor::new(vec![1, 1], vec![96], 0).unwrap())] };
        let applied = net.update_weights(&grads, 3, &mut rng).unwrap();
        assert_eq!(applied[0].as_ref().unwrap().data(), &[6]);
        assert_eq!(net.weights(0).unwrap().data(), &[44]);
        assert_eq!(net.weights(0).unwrap().scale(), -7);
        assert!(net.update_weights(&grads, 0, &mut rng).is_err());
        assert!(net.update_weights(&grads, 6, &mut rng).is_err());
    }

    #[test]
    fn update_saturates() {
        let mut w = QTensor::new(vec![2], vec![-120, 125], 0).unwrap();
        apply_update(&mut w, &QTensor::new(vec![2], vec![31, -31], 0).unwrap());
        assert_eq!(w.data(), &[-127, 127]);
    }

    #[test]
    fn backward_requires_training_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = fc_net(QTensor::new(vec![2, 2], vec![1, 2, 3, 4], 0).unwrap());
        let e = QTensor::zeros(vec![1, 2], 0);
        assert!(net.backward(&e, &mut rng).is_err());
        let x = QTensor::new(vec![1, 1, 1, 2], vec![1, 1], 0).unwrap();
        net.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert!(net.backward(&e, &mut rng).is_err());
    }

    #[test]
    fn oversize_batch_rejected() {
        let spec = NetworkSpec::preset("vgg7-cifar10").unwrap();
        let mut spec_w = spec.clone();
        init_weights(&mut spec_w, InitScheme::Uniform, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(Network::new(spec_w.clone(), RoundingConfig::default(), 256).is_err());
        assert!(Network::new(spec_w, RoundingConfig::default(), 128).is_ok());
    }

    #[test]
    fn argmax_ties_lowest() {
        let t = QTensor::new(vec![3, 3], vec![1, 5, 5, 0, 0, 0, -3, -1, -2], 0).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0, 1]);
    }
}
