use super::{min_max_normalize, AttributionMap, AttributionMethod};
use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, ImageRgb};
use crate::network::{Layer, Network};

/// Index of the last convolution.
pub fn default_gradcam_layer(network: &Network) -> Option<usize> {
    network.layers().iter().rposition(|l| matches!(l, Layer::Conv2d(_)))
}

/// Grad-CAM for the predicted class at convolution `layer`, using the
/// rectified feature maps when the convolution is followed by a ReLU.
pub fn gradcam(network: &Network, image: &ImageRgb, layer: usize) -> Result<AttributionMap> {
    if !matches!(network.layers().get(layer), Some(Layer::Conv2d(_))) {
        return Err(Error::NotConvLayer(layer));
    }
    let tap = if matches!(network.layers().get(layer + 1), Some(Layer::Relu)) {
        layer + 1
    } else {
        layer
    };
    let x = image.to_tensor();
    let pass = network.forward(&x)?;
    let class = pass.predicted_class();
    let grads = network.backward(&pass, class)?;
    let activations = pass.layer_output(tap);
    let shape = activations.shape();
    let values = gradcam_from_parts(
        activations.data(),
        grads.layer_output(tap).data(),
        shape[0],
        shape[2],
        shape[1],
        image.width(),
        image.height(),
    );
    AttributionMap::new(image.width(), image.height(), values, class, AttributionMethod::GradCam)
}

/// `ReLU(sum_c mean(grad_c) * A_c)`, upsampled and min-max rescaled. An
/// identically zero map is returned as zeros without rescaling.
pub fn gradcam_from_parts(
    activations: &[f32],
    gradients: &[f32],
    channels: usize,
    width: usize,
    height: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f32> {
    let plane = width * height;
    let mut cam = vec![0.0f32; plane];
    for c in 0..channels {
        let g = &gradients[c * plane..(c + 1) * plane];
        let weight = (g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32;
        for (out, &a) in cam.iter_mut().zip(&activations[c * plane..(c + 1) * plane]) {
            *out += weight * a;
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    if cam.iter().all(|&v| v == 0.0) {
        return vec![0.0; out_w * out_h];
    }
    let mut up = resize_bilinear(&cam, width, height, out_w, out_h);
    for v in up.iter_mut() {
        *v = v.max(0.0);
    }
    min_max_normalize(&mut up);
    up
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_activations_give_zero_map() {
        let out = gradcam_from_parts(&[0.0; 32], &[1.0; 32], 2, 4, 4, 8, 8);
        assert_eq!(out, vec![0.0; 64]);
    }

    #[test]
    fn single_channel_is_rectified_activation() {
        let act: Vec<f32> = (0..16).map(|i| (i as f32 - 5.0) * 0.5).collect();
        let out = gradcam_from_parts(&act, &[0.3; 16], 1, 4, 4, 4, 4);
        let relu: Vec<f32> = act.iter().map(|v| v.max(0.0)).collect();
        let max = relu.iter().copied().fold(0.0f32, f32::max);
        for (o, r) in out.iter().zip(&relu) {
            assert!((o - r / max).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_non_conv_layers() {
        let net = Network::seeded_random(0);
        let image = ImageRgb::filled(64, 64, [0.5; 3]).unwrap();
        assert!(matches!(gradcam(&net, &image, 1), Err(Error::NotConvLayer(1))));
        assert!(matches!(gradcam(&net, &image, 99), Err(Error::NotConvLayer(99))));
        assert_eq!(default_gradcam_layer(&net), Some(6));
        let map = gradcam(&net, &image, 6).unwrap();
        assert!(map.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
