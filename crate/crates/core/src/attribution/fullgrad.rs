use super::{min_max_normalize, psi, AttributionMap, AttributionMethod};
use crate::error::Result;
use crate::imaging::ImageRgb;
use crate::network::Network;
use crate::tensor::Tensor;

/// FullGrad map for the predicted class.
pub fn fullgrad(network: &Network, image: &ImageRgb) -> Result<AttributionMap> {
    let x = image.to_tensor();
    let class = network.forward(&x)?.predicted_class();
    fullgrad_for_class(network, image, class)
}

/// `psi(input_grad * input)` summed over colour channels, plus
/// `psi(bias_grad * bias)` over every channel of every biased layer, each
/// bias-gradient taken at every spatial location of that layer's output.
/// Linear-layer bias terms are spatially constant and vanish under `psi`.
pub fn fullgrad_for_class(network: &Network, image: &ImageRgb, class: usize) -> Result<AttributionMap> {
    let x = image.to_tensor();
    let (_, grads) = network.gradients(&x, class)?;
    let (w, h) = (image.width(), image.height());
    let plane = w * h;
    let mut total = vec![0.0f32; plane];
    let mut accumulate = |map: Vec<f32>| {
        for (t, v) in total.iter_mut().zip(map) {
            *t += v;
        }
    };

    // One psi over the whole input term, rescaled jointly across the colour
    // channels, which are then summed.
    let mut input_term: Vec<f32> = grads
        .input()
        .data()
        .iter()
        .zip(x.data())
        .map(|(g, v)| (g * v).abs())
        .collect();
    min_max_normalize(&mut input_term);
    accumulate(input_term.chunks(plane).fold(vec![0.0; plane], |mut acc, channel| {
        for (a, v) in acc.iter_mut().zip(channel) {
            *a += v;
        }
        acc
    }));

    for bias_grad in grads.bias_gradients(network) {
        let bias = network.layers()[bias_grad.layer].bias().expect("biased layer");
        let shape = bias_grad.spatial.shape();
        let (bw, bh) = if shape.len() == 3 { (shape[2], shape[1]) } else { (1, 1) };
        for (c, &b) in bias.iter().enumerate() {
            let map: Vec<f32> = bias_grad.spatial.data()[c * bw * bh..(c + 1) * bw * bh]
                .iter()
                .map(|g| g * b)
                .collect();
            accumulate(psi(&map, bw, bh, w, h));
        }
    }

    min_max_normalize(&mut total);
    AttributionMap::new(w, h, total, class, AttributionMethod::FullGrad)
}

/// The two sides of the FullGrad completeness identity for one logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Completeness {
    pub output: f64,
    /// `<grad_x f, x>`
    pub input_term: f64,
    /// Sum over biased layers of `<grad_b f, b>`.
    pub bias_term: f64,
}

impl Completeness {
    pub fn residual(&self) -> f64 {
        self.output - self.input_term - self.bias_term
    }
}

pub fn fullgrad_completeness(network: &Network, x: &Tensor, class: usize) -> Result<Completeness> {
    let (pass, grads) = network.gradients(x, class)?;
    let input_term = grads.input().dot(x);
    let bias_term = grads
        .bias_gradients(network)
        .iter()
        .map(|bg| {
            let bias = network.layers()[bg.layer].bias().expect("biased layer");
            bg.grad
                .data()
                .iter()
                .zip(bias)
                .map(|(&g, &b)| g as f64 * b as f64)
                .sum::<f64>()
        })
        .sum();
    Ok(Completeness {
        output: pass.logits().data()[class] as f64,
        input_term,
        bias_term,
    })
}
