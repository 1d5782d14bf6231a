//! The fixed-topology CNN: forward pass, input-gradients and bias-gradients.
//!
//! Every convolution is 3x3, stride 1, zero padding 1. Every convolution and
//! linear layer carries a bias, and all nonlinearities are ReLU or pooling, so
//! the network is piecewise linear in its input and biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax_slice, Tensor};

/// Channels, height, width of the classifier input.
pub const INPUT_SHAPE: [usize; 3] = [3, 64, 64];

/// Convolution channel widths of the reference classifier.
pub const REFERENCE_CONV_CHANNELS: [usize; 3] = [8, 16, 32];

pub const REFERENCE_CLASSES: [&str; 2] = ["safe", "unsafe"];

/// Index of the class the obfuscation pipeline tries to flip.
pub const FLAGGED_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][3][3]`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    /// Position of tap `(ky, kx)` of filter `out` over input channel `input`.
    pub fn weight_index(&self, out: usize, input: usize, ky: usize, kx: usize) -> usize {
        ((out * self.in_channels + input) * 3 + ky) * 3 + kx
    }
}

impl Linear {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![0.0; out_features * in_features],
            bias: vec![0.0; out_features],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Linear(Linear),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2 => LayerKind::MaxPool2,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::Linear(_) => LayerKind::Linear,
        }
    }

    pub fn bias(&self) -> Option<&[f32]> {
        match self {
            Layer::Conv2d(c) => Some(&c.bias),
            Layer::Linear(l) => Some(&l.bias),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<f32>> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.bias),
            Layer::Linear(l) => Some(&mut l.bias),
            _ => None,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::InvalidNetwork(msg));
        match self {
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_channels {
                    return bad(format!("conv expects {} channels, got {input:?}", c.in_channels));
                }
                if c.weight.len() != c.out_channels * c.in_channels * 9 || c.bias.len() != c.out_channels {
                    return bad("conv parameter sizes do not match channel counts".into());
                }
                Ok(vec![c.out_channels, input[1], input[2]])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2 => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return bad(format!("maxpool needs a spatial input, got {input:?}"));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            Layer::GlobalAvgPool => {
                if input.len() != 3 {
                    return bad(format!("global pool needs a spatial input, got {input:?}"));
                }
                Ok(vec![input[0]])
            }
            Layer::Linear(l) => {
                let n: usize = input.iter().product();
                if n != l.in_features {
                    return bad(format!("linear expects {} features, got {input:?}", l.in_features));
                }
                if l.weight.len() != l.out_features * l.in_features || l.bias.len() != l.out_features {
                    return bad("linear parameter sizes do not match feature counts".into());
                }
                Ok(vec![l.out_features])
            }
        }
    }
}

/// Immutable classifier: layer list plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the logits shape.
    shapes: Vec<Vec<usize>>,
    class_names: Vec<String>,
    channel_means: [f32; 3],
}

/// Cached activations of one forward pass. `activations[0]` is the input and
/// `activations[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    activations: Vec<Tensor>,
}

impl ForwardPass {
    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("forward pass has an input")
    }

    /// Output of layer `index`.
    pub fn layer_output(&self, index: usize) -> &Tensor {
        &self.activations[index + 1]
    }

    pub fn probabilities(&self) -> Vec<f32> {
        softmax_slice(self.logits().data())
    }

    pub fn predicted_class(&self) -> usize {
        argmax(self.logits().data())
    }
}

/// Gradients of one target logit.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub target: usize,
    input: Tensor,
    /// Gradient with respect to the output of each layer.
    outputs: Vec<Tensor>,
}

/// Bias-gradient of one biased layer.
#[derive(Debug, Clone)]
pub struct BiasGradient {
    pub layer: usize,
    /// Shaped like the layer's bias.
    pub grad: Tensor,
    /// Gradient with respect to the bias broadcast at every output location:
    /// `[C, H, W]` for a convolution, `[C]` for a linear layer. Summing over
    /// space yields `grad`.
    pub spatial: Tensor,
}

impl Gradients {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn layer_output(&self, index: usize) -> &Tensor {
        &self.outputs[index]
    }

    pub fn bias_gradients(&self, network: &Network) -> Vec<BiasGradient> {
        network
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, layer)| {
                let channels = layer.bias()?.len();
                let spatial = self.outputs[i].clone();
                let per_channel = spatial.len() / channels;
                let grad = spatial
                    .data()
                    .chunks(per_channel)
                    .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect();
                Some(BiasGradient {
                    layer: i,
                    grad: Tensor::from_parts(vec![channels], grad),
                    spatial,
                })
            })
            .collect()
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("no layers".into()));
        }
        let mut shapes = vec![input_shape];
        for layer in &layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out.len() != 1 || out[0] != class_names.len() {
            return Err(Error::InvalidNetwork(format!(
                "network emits {out:?} but {} class names were given",
                class_names.len()
            )));
        }
        Ok(Self {
            layers,
            shapes,
            class_names,
            channel_means: [0.5; 3],
        })
    }

    /// Builds the fixed classifier topology from its biased layers: each
    /// convolution is followed by ReLU and a 2x2 max-pool, except the last,
    /// which is followed by ReLU and global average pooling; linear layers are
    /// separated by ReLU.
    pub fn from_biased_layers(convs: Vec<Conv2d>, linears: Vec<Linear>, input_shape: Vec<usize>) -> Result<Self> {
        if convs.is_empty() || linears.is_empty() {
            return Err(Error::InvalidNetwork(
                "expected at least one convolution followed by at least one linear layer".into(),
            ));
        }
        let n_convs = convs.len();
        let n_linears = linears.len();
        let classes = linears.last().unwrap().out_features;
        let mut layers = Vec::new();
        for (i, conv) in convs.into_iter().enumerate() {
            layers.push(Layer::Conv2d(conv));
            layers.push(Layer::Relu);
            layers.push(if i + 1 < n_convs {
                Layer::MaxPool2
            } else {
                Layer::GlobalAvgPool
            });
        }
        for (i, linear) in linears.into_iter().enumerate() {
            layers.push(Layer::Linear(linear));
            if i + 1 < n_linears {
                layers.push(Layer::Relu);
            }
        }
        let names = if classes == REFERENCE_CLASSES.len() {
            REFERENCE_CLASSES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..classes).map(|i| format!("class{i}")).collect()
        };
        Network::new(layers, input_shape, names)
    }

    /// Reference architecture with He-initialised weights and small random biases.
    pub fn seeded_random(seed: u64) -> Self {
        Self::seeded_random_with(seed, &REFERENCE_CONV_CHANNELS, INPUT_SHAPE.to_vec())
    }

    pub fn seeded_random_with(seed: u64, conv_channels: &[usize], input_shape: Vec<usize>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut in_ch = input_shape[0];
        for &out_ch in conv_channels {
            let std = (2.0 / (in_ch * 9) as f32).sqrt();
            let normal = Normal::new(0.0f32, std).unwrap();
            convs.push(Conv2d {
                in_channels: in_ch,
                out_channels: out_ch,
                weight: (0..out_ch * in_ch * 9).map(|_| normal.sample(&mut rng)).collect(),
                bias: (0..out_ch).map(|_| rng.random_range(-0.1..0.1)).collect(),
            });
            in_ch = out_ch;
        }
        let classes = REFERENCE_CLASSES.len();
        let normal = Normal::new(0.0f32, (1.0 / in_ch as f32).sqrt()).unwrap();
        let linear = Linear {
            in_features: in_ch,
            out_features: classes,
            weight: (0..classes * in_ch).map(|_| normal.sample(&mut rng)).collect(),
            bias: (0..classes).map(|_| rng.random_range(-0.1..0.1)).collect(),
        };
        Network::from_biased_layers(convs, vec![linear], input_shape).expect("reference topology is valid")
    }

    pub fn with_channel_means(mut self, means: [f32; 3]) -> Self {
        self.channel_means = means;
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn layer_input_shape(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Training-set per-channel means, used as the default obfuscation fill.
    pub fn channel_means(&self) -> [f32; 3] {
        self.channel_means
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardPass> {
        if x.shape() != self.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape().to_vec(),
                actual: x.shape().to_vec(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = activations.last().unwrap();
            let out_shape = self.shapes[i + 1].clone();
            let data = match layer {
                Layer::Conv2d(c) => conv_forward(c, input.data(), &self.shapes[i]),
                Layer::Relu => input.data().iter().map(|&v| v.max(0.0)).collect(),
                Layer::MaxPool2 => maxpool_forward(input.data(), &self.shapes[i]),
                Layer::GlobalAvgPool => {
                    let plane = self.shapes[i][1] * self.shapes[i][2];
                    input
                        .data()
                        .chunks(plane)
                        .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
                        .collect()
                }
                Layer::Linear(l) => linear_forward(l, input.data()),
            };
            activations.push(Tensor::from_parts(out_shape, data));
        }
        Ok(ForwardPass { activations })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.logits().clone())
    }

    /// Backpropagates the pre-softmax logit `target` through a cached pass.
    pub fn backward(&self, pass: &ForwardPass, target: usize) -> Result<Gradients> {
        let classes = self.num_classes();
        if target >= classes {
            return Err(Error::TargetOutOfRange { index: target, classes });
        }
        if pass.activations.len() != self.layers.len() + 1 {
            return Err(Error::InvalidNetwork(
                "forward pass belongs to a different network".into(),
            ));
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut grad = vec![0.0f32; classes];
        grad[target] = 1.0;
        let mut upstream = Tensor::from_parts(vec![classes], grad);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let in_shape = &self.shapes[i];
            let input = &pass.activations[i];
            let dy = upstream.data();
            let dx = match layer {
                Layer::Conv2d(c) => conv_backward_input(c, dy, in_shape),
                Layer::Relu => input
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
                Layer::MaxPool2 => maxpool_backward(input.data(), dy, in_shape),
                Layer::GlobalAvgPool => {
                    let plane = in_shape[1] * in_shape[2];
                    dy.iter()
                        .flat_map(|&g| std::iter::repeat_n(g / plane as f32, plane))
                        .collect()
                }
                Layer::Linear(l) => linear_backward_input(l, dy),
            };
            let next = Tensor::from_parts(in_shape.clone(), dx);
            outputs.push(upstream);
            upstream = next;
        }
        outputs.reverse();
        Ok(Gradients {
            target,
            input: upstream,
            outputs,
        })
    }

    /// Forward and backward in one call.
    pub fn gradients(&self, x: &Tensor, target: usize) -> Result<(ForwardPass, Gradients)> {
        let pass = self.forward(x)?;
        let grads = self.backward(&pass, target)?;
        Ok((pass, grads))
    }
}

fn conv_forward(conv: &Conv2d, input: &[f32], in_shape: &[usize]) -> Vec<f32> {
    let (h, w) = (in_shape[1], in_shape[2]);
    let plane = h * w;
    let mut out = vec![0.0f32; conv.out_channels * plane];
    for co in 0..conv.out_channels {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        out_plane.fill(conv.bias[co]);
        for ci in 0..conv.in_channels {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            let kernel = &conv.weight[(co * conv.in_channels + ci) * 9..][..9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = kernel[ky * 3 + kx];
                    let (lo, hi) = valid_range(w, kx);
                    for oy in 0..h {
                        let Some(iy) = (oy + ky).checked_sub(1).filter(|&iy| iy < h) else {
                            continue;
                        };
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        let out_row = &mut out_plane[oy * w..(oy + 1) * w];
                        for ox in lo..hi {
                            out_row[ox] += wv * in_row[ox + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(conv: &Conv2d, dy: &[f32], in_shape: &[usize]) -> Vec<f32> {
    let (h, w) = (in_shape[1], in_shape[2]);
    let plane = h * w;
    let mut dx = vec![0.0f32; conv.in_channels * plane];
    for ci in 0..conv.in_channels {
        let dx_plane = &mut dx[ci * plane..(ci + 1) * plane];
        for co in 0..conv.out_channels {
            let dy_plane = &dy[co * plane..(co + 1) * plane];
            let kernel = &conv.weight[(co * conv.in_channels + ci) * 9..][..9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = kernel[ky * 3 + kx];
                    let (lo, hi) = valid_range(w, kx);
                    for oy in 0..h {
                        let Some(iy) = (oy + ky).checked_sub(1).filter(|&iy| iy < h) else {
                            continue;
                        };
                        let dy_row = &dy_plane[oy * w..(oy + 1) * w];
                        let dx_row = &mut dx_plane[iy * w..(iy + 1) * w];
                        for ox in lo..hi {
                            dx_row[ox + kx - 1] += wv * dy_row[ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Output columns `ox` for which `ox + kx - 1` is a valid input column.
fn valid_range(w: usize, kx: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(kx);
    let hi = (w + 1 - kx).min(w);
    (lo, hi)
}

fn maxpool_window(input: &[f32], base: usize, w: usize, oy: usize, ox: usize) -> usize {
    let candidates = [
        base + 2 * oy * w + 2 * ox,
        base + 2 * oy * w + 2 * ox + 1,
        base + (2 * oy + 1) * w + 2 * ox,
        base + (2 * oy + 1) * w + 2 * ox + 1,
    ];
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if input[c] > input[best] {
            best = c;
        }
    }
    best
}

fn maxpool_forward(input: &[f32], in_shape: &[usize]) -> Vec<f32> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(input[maxpool_window(input, ch * h * w, w, oy, ox)]);
            }
        }
    }
    out
}

fn maxpool_backward(input: &[f32], dy: &[f32], in_shape: &[usize]) -> Vec<f32> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; input.len()];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = maxpool_window(input, ch * h * w, w, oy, ox);
                dx[src] += dy[(ch * oh + oy) * ow + ox];
            }
        }
    }
    dx
}

fn linear_forward(l: &Linear, input: &[f32]) -> Vec<f32> {
    l.weight
        .chunks(l.in_features)
        .zip(&l.bias)
        .map(|(row, &b)| b + row.iter().zip(input).map(|(&w, &x)| w * x).sum::<f32>())
        .collect()
}

fn linear_backward_input(l: &Linear, dy: &[f32]) -> Vec<f32> {
    let mut dx = vec![0.0f32; l.in_features];
    for (row, &g) in l.weight.chunks(l.in_features).zip(dy) {
        for (d, &w) in dx.iter_mut().zip(row) {
            *d += w * g;
        }
    }
    dx
}
