//! Shared test oracles.
#![allow(dead_code)]

use cse_core::network::{Layer, Network};
use cse_core::segmentation::LabelMap;
use cse_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent double-precision forward pass over the same layer list.
/// Besides the logits it returns the activation pattern (ReLU signs and
/// max-pool winners) so callers can tell when a finite-difference step
/// crosses a kink.
#[derive(Clone)]
pub struct ReferenceNet {
    layers: Vec<RefLayer>,
    input_shape: [usize; 3],
}

#[derive(Clone)]
enum RefLayer {
    Conv {
        cin: usize,
        cout: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    MaxPool,
    GlobalAvg,
    Linear {
        fin: usize,
        fout: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
}

pub struct Evaluation {
    pub logits: Vec<f64>,
    pub pattern: Vec<u32>,
}

impl ReferenceNet {
    pub fn new(network: &Network) -> Self {
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let layers = network
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => RefLayer::Conv {
                    cin: c.in_channels,
                    cout: c.out_channels,
                    weight: widen(&c.weight),
                    bias: widen(&c.bias),
                },
                Layer::Relu => RefLayer::Relu,
                Layer::MaxPool2 => RefLayer::MaxPool,
                Layer::GlobalAvgPool => RefLayer::GlobalAvg,
                Layer::Linear(lin) => RefLayer::Linear {
                    fin: lin.in_features,
                    fout: lin.out_features,
                    weight: widen(&lin.weight),
                    bias: widen(&lin.bias),
                },
            })
            .collect();
        let s = network.input_shape();
        Self {
            layers,
            input_shape: [s[0], s[1], s[2]],
        }
    }

    /// Mutable access to entry `index` of the bias of layer `layer`.
    pub fn bias_mut(&mut self, layer: usize, index: usize) -> &mut f64 {
        match &mut self.layers[layer] {
            RefLayer::Conv { bias, .. } | RefLayer::Linear { bias, .. } => &mut bias[index],
            _ => panic!("layer {layer} has no bias"),
        }
    }

    pub fn evaluate(&self, input: &[f64]) -> Evaluation {
        let [mut c, mut h, mut w] = self.input_shape;
        let mut x = input.to_vec();
        let mut pattern = Vec::new();
        for layer in &self.layers {
            match layer {
                RefLayer::Conv {
                    cin,
                    cout,
                    weight,
                    bias,
                } => {
                    assert_eq!(*cin, c);
                    let mut y = vec![0.0; cout * h * w];
                    for o in 0..*cout {
                        let out = &mut y[o * h * w..(o + 1) * h * w];
                        out.iter_mut().for_each(|v| *v = bias[o]);
                        for i in 0..*cin {
                            let plane = &x[i * h * w..(i + 1) * h * w];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let tap = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                                    // output (yy, xx) reads input (yy + ky - 1, xx + kx - 1)
                                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                                    for yy in y0..y1 {
                                        let src =
                                            &plane[(yy + ky - 1) * w + x0 + kx - 1..(yy + ky - 1) * w + x1 + kx - 1];
                                        let dst = &mut out[yy * w + x0..yy * w + x1];
                                        for (d, s) in dst.iter_mut().zip(src) {
                                            *d += tap * s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    x = y;
                    c = *cout;
                }
                RefLayer::Relu => {
                    for v in x.iter_mut() {
                        pattern.push(u32::from(*v > 0.0));
                        *v = v.max(0.0);
                    }
                }
                RefLayer::MaxPool => {
                    let (oh, ow) = (h / 2, w / 2);
                    let mut y = vec![0.0; c * oh * ow];
                    for ch in 0..c {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                let mut best = (f64::NEG_INFINITY, 0u32);
                                for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                                    let v = x[(ch * h + 2 * yy + dy) * w + 2 * xx + dx];
                                    if v > best.0 {
                                        best = (v, k as u32);
                                    }
                                }
                                y[(ch * oh + yy) * ow + xx] = best.0;
                                pattern.push(best.1);
                            }
                        }
                    }
                    x = y;
                    h = oh;
                    w = ow;
                }
                RefLayer::GlobalAvg => {
                    x = x
                        .chunks(h * w)
                        .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
                        .collect();
                    h = 1;
                    w = 1;
                }
                RefLayer::Linear {
                    fin,
                    fout,
                    weight,
                    bias,
                } => {
                    assert_eq!(*fin, x.len());
                    x = (0..*fout)
                        .map(|o| bias[o] + (0..*fin).map(|i| weight[o * fin + i] * x[i]).sum::<f64>())
                        .collect();
                    c = *fout;
                }
            }
        }
        Evaluation { logits: x, pattern }
    }
}

/// Outcome of comparing one analytic derivative with a central difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdCheck {
    Match,
    Mismatch {
        analytic: f64,
        numeric: f64,
    },
    /// The activation pattern differs between the two probes, so the
    /// function is not linear over the step and the difference means nothing.
    Kink,
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;

/// Relative comparison with an absolute floor for derivatives that are zero
/// up to float32 rounding of the analytic value.
pub fn compare(analytic: f64, numeric: f64, scale: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_REL_TOL * analytic.abs().max(numeric.abs()) || diff <= 1e-6 * scale
}

/// Central difference of logit `target` along `probe`, which perturbs a
/// copy of the network or input by the given signed step.
pub fn central_difference(
    analytic: f64,
    scale: f64,
    target: usize,
    mut probe: impl FnMut(f64) -> Evaluation,
) -> FdCheck {
    let plus = probe(FD_STEP);
    let minus = probe(-FD_STEP);
    if plus.pattern != minus.pattern {
        return FdCheck::Kink;
    }
    let numeric = (plus.logits[target] - minus.logits[target]) / (2.0 * FD_STEP);
    if compare(analytic, numeric, scale) {
        FdCheck::Match
    } else {
        FdCheck::Mismatch { analytic, numeric }
    }
}

/// Partition checks on a label map: one in-range label per pixel (cover and
/// disjointness), every label used, every region 4-connected, and at least
/// two regions when the image is not flat.
pub fn check_partition(map: &LabelMap, flat_image: bool) -> Result<(), String> {
    let (w, h, k) = (map.width(), map.height(), map.region_count());
    if map.labels().len() != w * h {
        return Err(format!("{} labels for {w}x{h} pixels", map.labels().len()));
    }
    let mut seen = vec![0usize; k];
    for &l in map.labels() {
        let l = l as usize;
        if l >= k {
            return Err(format!("label {l} out of range 0..{k}"));
        }
        seen[l] += 1;
    }
    if let Some(empty) = seen.iter().position(|&n| n == 0) {
        return Err(format!("label {empty} of {k} is empty"));
    }
    if !map.is_connected() {
        return Err("a region is not 4-connected".into());
    }
    if !flat_image && k < 2 {
        return Err("single region on a non-flat image".into());
    }
    Ok(())
}

pub const COORDS_PER_MODEL: usize = 64;
const INPUT_COORDS: usize = 48;

pub fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect()).unwrap()
}

pub struct GradientTally {
    pub checked: usize,
    pub kinks: usize,
    pub failures: Vec<String>,
}

/// Checks 48 input and 16 bias derivatives of the flagged logit, drawing a
/// fresh coordinate whenever the step crosses a ReLU or max-pool boundary.
pub fn check_gradients(seed: u64) -> GradientTally {
    let network = Network::seeded_random(seed);
    let reference = ReferenceNet::new(&network);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let x = random_input(&mut rng, network.input_shape());
    let target = 1;
    let (_, grads) = network.gradients(&x, target).unwrap();
    let input_grad = grads.input().data();
    let bias_grads = grads.bias_gradients(&network);
    let scale = input_grad.iter().fold(0f32, |m, g| m.max(g.abs())) as f64;
    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();

    let mut tally = GradientTally {
        checked: 0,
        kinks: 0,
        failures: Vec::new(),
    };
    let mut attempts = 0;
    while tally.checked < COORDS_PER_MODEL {
        attempts += 1;
        assert!(attempts < 20 * COORDS_PER_MODEL, "too many kinks for seed {seed}");
        let (label, outcome) = if tally.checked < INPUT_COORDS {
            let i = rng.random_range(0..base.len());
            let outcome = central_difference(input_grad[i] as f64, scale, target, |step| {
                let mut probe = base.clone();
                probe[i] += step;
                reference.evaluate(&probe)
            });
            (format!("input[{i}]"), outcome)
        } else {
            let bg = &bias_grads[rng.random_range(0..bias_grads.len())];
            let c = rng.random_range(0..bg.grad.len());
            let outcome = central_difference(bg.grad.data()[c] as f64, scale, target, |step| {
                let mut probe = reference.clone();
                *probe.bias_mut(bg.layer, c) += step;
                probe.evaluate(&base)
            });
            (format!("bias[{}][{c}]", bg.layer), outcome)
        };
        match outcome {
            FdCheck::Kink => tally.kinks += 1,
            FdCheck::Match => tally.checked += 1,
            FdCheck::Mismatch { analytic, numeric } => {
                tally.checked += 1;
                tally.failures.push(format!(
                    "seed {seed} {label}: analytic {analytic:e} numeric {numeric:e}"
                ));
            }
        }
    }
    tally
}
