//! Declarative layer graphs and the named architecture presets.

use crate::error::{Error, Result};
use crate::kernels::conv::ConvGeometry;
use crate::qtensor::QTensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv(ConvGeometry),
    Fc { in_features: usize, out_features: usize },
    Relu,
    MaxPool2,
    /// Inverted dropout keeping each element with probability `2^keep_log2`.
    Dropout { keep_log2: i32 },
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv(_) | LayerKind::Fc { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerKind::Conv(g) => Some(g.weight_shape()),
            LayerKind::Fc { in_features, out_features } => Some(vec![*out_features, *in_features]),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> Option<usize> {
        match self {
            LayerKind::Conv(g) => Some(g.fan_in()),
            LayerKind::Fc { in_features, .. } => Some(*in_features),
            _ => None,
        }
    }
}

/// One layer; weighted layers carry int8 weights whose scale is the static
/// `s_w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub weights: Option<QTensor>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        let weights = kind.weight_shape().map(|s| QTensor::zeros(s, 0));
        Self { kind, weights }
    }

    pub fn weight_scale(&self) -> Option<i8> {
        self.weights.as_ref().map(QTensor::scale)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    /// `[channels, height, width]` of one input sample.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Builder used by the presets: tracks the running activation shape.
struct Stack {
    shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

impl Stack {
    fn new(input: [usize; 3]) -> Self {
        Self { shape: input.to_vec(), layers: Vec::new() }
    }

    fn conv(mut self, out: usize, kernel: usize, padding: usize) -> Result<Self> {
        let [c, h, w] = self.shape[..] else {
            return Err(Error::Network("conv after flatten".into()));
        };
        let g = ConvGeometry::new(c, out, (kernel, kernel), 1, padding, (h, w))?;
        self.shape = vec![out, g.output_h(), g.output_w()];
        self.layers.push(LayerSpec::new(LayerKind::Conv(g)));
        Ok(self)
    }

    fn conv3(self, out: usize) -> Result<Self> {
        self.conv(out, 3, 1)
    }

    fn relu(mut self) -> Self {
        self.layers.push(LayerSpec::new(LayerKind::Relu));
        self
    }

    fn pool(mut self) -> Self {
        if let [c, h, w] = self.shape[..] {
            self.shape = vec![c, h / 2, w / 2];
        }
        self.layers.push(LayerSpec::new(LayerKind::MaxPool2));
        self
    }

    fn dropout(mut self, keep_log2: i32) -> Self {
        self.layers.push(LayerSpec::new(LayerKind::Dropout { keep_log2 }));
        self
    }

    fn fc(mut self, out: usize) -> Self {
        let in_features = self.shape.iter().product();
        self.shape = vec![out];
        self.layers.push(LayerSpec::new(LayerKind::Fc { in_features, out_features: out }));
        self
    }
}

pub const PRESETS: &[&str] = &[
    "lenet-mnist",
    "mlp-mnist",
    "cnn4-cifar10",
    "vgg7-cifar10",
    "vgg8-cifar10",
    "vgg9-cifar10",
];

impl NetworkSpec {
    /// Named architectures. Weights are zero until initialized.
    pub fn preset(name: &str) -> Result<Self> {
        let mnist = [1, 28, 28];
        let cifar = [3, 32, 32];
        let (input, stack) = match name {
            // LeNet-5 on 28x28 inputs (first convolution padded to keep 28x28)
            "lenet-mnist" | "lenet5" => (
                mnist,
                Stack::new(mnist)
                    .conv(6, 5, 2)?
                    .relu()
                    .pool()
                    .conv(16, 5, 0)?
                    .relu()
                    .pool()
                    .fc(120)
                    .relu()
                    .fc(84)
                    .relu()
                    .fc(10),
            ),
            "mlp-mnist" => (mnist, Stack::new(mnist).fc(64).relu().fc(10)),
            "cnn4-cifar10" => (
                cifar,
                Stack::new(cifar)
                    .conv3(32)?
                    .relu()
                    .pool()
                    .conv3(64)?
                    .relu()
                    .pool()
                    .conv3(128)?
                    .relu()
                    .pool()
                    .conv3(256)?
                    .relu()
                    .pool()
                    .fc(10),
            ),
            "vgg7-cifar10" | "vgg8-cifar10" | "vgg9-cifar10" => {
                let depth = match name {
                    "vgg7-cifar10" => [2, 2],
                    "vgg8-cifar10" => [3, 2],
                    _ => [3, 3],
                };
                let mut s = Stack::new(cifar);
                for _ in 0..depth[0] {
                    s = s.conv3(128)?.relu();
                }
                s = s.pool();
                for _ in 0..depth[1] {
                    s = s.conv3(256)?.relu();
                }
                s = s.pool();
                for _ in 0..2 {
                    s = s.conv3(512)?.relu();
                }
                (cifar, s.pool().dropout(-1).fc(10))
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown architecture `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        let canonical = if name == "lenet5" { "lenet-mnist" } else { name };
        let spec = NetworkSpec {
            name: canonical.to_string(),
            input_shape: input,
            num_classes: 10,
            layers: stack.layers,
        };
        spec.output_shape()?;
        Ok(spec)
    }

    /// Custom stack of fully connected layers with ReLU between them.
    pub fn mlp(name: &str, input_shape: [usize; 3], hidden: &[usize], num_classes: usize) -> Self {
        let mut s = Stack::new(input_shape);
        for &h in hidden {
            s = s.fc(h).relu();
        }
        s = s.fc(num_classes);
        NetworkSpec { name: name.into(), input_shape, num_classes, layers: s.layers }
    }

    pub fn weighted_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.kind.is_weighted())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.weights.as_ref())
            .map(QTensor::len)
            .sum()
    }

    /// Per-sample activation shape entering each layer, plus the final output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut all = vec![shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match &layer.kind {
                LayerKind::Conv(g) => {
                    let want = vec![g.in_channels, g.input_h, g.input_w];
                    if shape != want {
                        return Err(Error::Network(format!(
                            "layer {i}: conv expects input {want:?}, got {shape:?}"
                        )));
                    }
                    vec![g.out_channels, g.output_h(), g.output_w()]
                }
                LayerKind::Fc { in_features, out_features } => {
                    let n: usize = shape.iter().product();
                    if n != *in_features {
                        return Err(Error::Network(format!(
                            "layer {i}: fc expects {in_features} features, got {n}"
                        )));
                    }
                    vec![*out_features]
                }
                LayerKind::MaxPool2 => match shape[..] {
                    [c, h, w] if h >= 2 && w >= 2 => vec![c, h / 2, w / 2],
                    _ => {
                        return Err(Error::Network(format!(
                            "layer {i}: maxpool needs a [C, H>=2, W>=2] input, got {shape:?}"
                        )))
                    }
                },
                LayerKind::Relu => shape,
                LayerKind::Dropout { keep_log2 } => {
                    if !(-16..=0).contains(keep_log2) {
                        return Err(Error::Network(format!("layer {i}: dropout keep_log2 {keep_log2}")));
                    }
                    shape
                }
            };
            if let (Some(w), Some(want)) = (&layer.weights, layer.kind.weight_shape()) {
                if w.shape() != want.as_slice() {
                    return Err(Error::Network(format!(
                        "layer {i}: weights {:?} do not match {want:?}",
                        w.shape()
                    )));
                }
            } else if layer.kind.is_weighted() {
                return Err(Error::Network(format!("layer {i}: missing weights")));
            }
            all.push(shape.clone());
        }
        Ok(all)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let shapes = self.shapes()?;
        let out = shapes.last().cloned().unwrap_or_default();
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Fc { out_features, .. }) if *out_features == self.num_classes => Ok(out),
            _ => Err(Error::Network(format!(
                "final layer must be fc with {} outputs",
                self.num_classes
            ))),
        }
    }

    /// Worst-case number of nonzero terms summed into one weight-gradient
    /// element of layer `index` for a batch of `batch` samples.
    ///
    /// A convolution followed (through ReLU/dropout) by 2x2 max pooling sees
    /// at most one nonzero error per pooling window.
    pub fn grad_weight_terms(&self, index: usize, batch: usize) -> usize {
        match &self.layers[index].kind {
            LayerKind::Conv(g) => {
                let pooled = self.layers[index + 1..]
                    .iter()
                    .map(|l| &l.kind)
                    .find(|k| !matches!(k, LayerKind::Relu | LayerKind::Dropout { .. }))
                    .is_some_and(|k| matches!(k, LayerKind::MaxPool2));
                let per_sample = if pooled {
                    (g.output_h() / 2) * (g.output_w() / 2)
                } else {
                    g.positions()
                };
                batch * per_sample
            }
            LayerKind::Fc { .. } => batch,
            _ => 0,
        }
    }

    /// Largest batch for which every weight gradient provably fits in int32.
    pub fn max_batch(&self) -> usize {
        use crate::kernels::gemm::MAX_REDUCTION;
        self.weighted_layers()
            .map(|(i, _)| MAX_REDUCTION / self.grad_weight_terms(i, 1).max(1))
            .min()
            .unwrap_or(usize::MAX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_compose() {
        for name in PRESETS {
            let spec = NetworkSpec::preset(name).unwrap();
            assert_eq!(spec.output_shape().unwrap(), vec![10], "{name}");
        }
        assert!(NetworkSpec::preset("resnet").is_err());
    }

    #[test]
    fn vgg7_parameter_count() {
        // conv3-128 x2, conv3-256 x2, conv3-512 x2, fc 8192 -> 10
        let spec = NetworkSpec::preset("vgg7-cifar10").unwrap();
        let expected = 3 * 128 * 9
            + 128 * 128 * 9
            + 128 * 256 * 9
            + 256 * 256 * 9
            + 256 * 512 * 9
            + 512 * 512 * 9
            + 512 * 4 * 4 * 10;
        assert_eq!(spec.parameter_count(), expected);
        assert_eq!(spec.parameter_count(), 4_656_512);
    }

    #[test]
    fn lenet_batch_bound() {
        let spec = NetworkSpec::preset("lenet-mnist").unwrap();
        // first conv: 28x28 outputs, but at most 14x14 nonzero errors after pooling
        assert_eq!(spec.grad_weight_terms(0, 1), 196);
        assert!(spec.max_batch() >= 256);
        let vgg = NetworkSpec::preset("vgg7-cifar10").unwrap();
        // unpooled 32x32 conv bounds the batch at 130
        assert_eq!(vgg.grad_weight_terms(0, 1), 1024);
        assert_eq!(vgg.max_batch(), 130);
    }

    #[test]
    fn mismatched_layers_rejected() {
        let mut spec = NetworkSpec::preset("mlp-mnist").unwrap();
        spec.layers.remove(0);
        assert!(spec.shapes().is_err());
        let mut spec = NetworkSpec::preset("mlp-mnist").unwrap();
        spec.layers.pop();
        assert!(spec.output_shape().is_err());
    }
}
