//! Shared fixtures and independent brute-force oracles for the acceptance
//! suite. Everything here is deliberately written against the raw
//! definitions (explicit padding, nested scalar loops, f64 throughout) and
//! never calls the engine's layer ops.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use unit_atlas_core::graph::{Layer, LayerKind, LayerParams, LayerSpec, ModelGraph, INPUT_ID};
use unit_atlas_core::store::Dataset;
use unit_atlas_core::tensor::Tensor;

pub fn rng(seed: u64, name: &str) -> ChaCha8Rng {
    unit_atlas_core::rng::stream(seed, "acceptance", name)
}

pub fn random_tensor<R: Rng>(r: &mut R, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// `|a - b| <= rtol * max(|a|, |b|) + atol`
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + atol
}

pub fn assert_tensor_close(got: &Tensor, want: &[f64], rtol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (&g, &w)) in got.data().iter().zip(want).enumerate() {
        assert!(
            close(f64::from(g), w, rtol, 1e-9),
            "element {i}: got {g}, oracle {w}"
        );
    }
}

/// Direct convolution over an explicitly zero-padded f64 copy of the input.
pub fn conv_oracle(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let (in_ch, in_y, in_x) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (out_ch, _, ky, kx) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let py = in_y + 2 * padding;
    let px = in_x + 2 * padding;
    let mut padded = vec![0.0f64; in_ch * py * px];
    for c in 0..in_ch {
        for y in 0..in_y {
            for x in 0..in_x {
                padded[(c * py + y + padding) * px + x + padding] =
                    f64::from(input.data()[(c * in_y + y) * in_x + x]);
            }
        }
    }
    let out_y = (py - ky) / stride + 1;
    let out_x = (px - kx) / stride + 1;
    let mut out = vec![0.0f64; out_ch * out_y * out_x];
    for dy in 0..ky {
        for dx in 0..kx {
            for ic in 0..in_ch {
                for oc in 0..out_ch {
                    let w = f64::from(kernel.data()[((oc * in_ch + ic) * ky + dy) * kx + dx]);
                    for oy in 0..out_y {
                        for ox in 0..out_x {
                            out[(oc * out_y + oy) * out_x + ox] +=
                                w * padded[(ic * py + oy * stride + dy) * px + ox * stride + dx];
                        }
                    }
                }
            }
        }
    }
    for oc in 0..out_ch {
        for k in 0..out_y * out_x {
            out[oc * out_y * out_x + k] += f64::from(bias[oc]);
        }
    }
    out
}

pub fn dense_oracle(input: &Tensor, weights: &Tensor, bias: &[f32]) -> Vec<f64> {
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    (0..m)
        .map(|i| {
            let mut acc = f64::from(bias[i]);
            for j in 0..n {
                acc += f64::from(weights.data()[i * n + j]) * f64::from(input.data()[j]);
            }
            acc
        })
        .collect()
}

pub fn maxpool_oracle(input: &Tensor, window: usize, stride: usize) -> Vec<f64> {
    let (ch, in_y, in_x) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let out_y = (in_y - window) / stride + 1;
    let out_x = (in_x - window) / stride + 1;
    let mut out = Vec::with_capacity(ch * out_y * out_x);
    for c in 0..ch {
        for oy in 0..out_y {
            for ox in 0..out_x {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..window {
                    for dx in 0..window {
                        let v = f64::from(
                            input.data()[(c * in_y + oy * stride + dy) * in_x + ox * stride + dx],
                        );
                        best = best.max(v);
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

pub fn batchnorm_oracle(
    input: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Vec<f64> {
    let ch = input.shape()[0];
    let span: usize = input.shape()[1..].iter().product::<usize>().max(1);
    let mut out = Vec::with_capacity(input.len());
    for c in 0..ch {
        for k in 0..span {
            let x = f64::from(input.data()[c * span + k]);
            out.push(
                f64::from(gamma[c]) * (x - f64::from(mean[c]))
                    / (f64::from(var[c]) + f64::from(eps)).sqrt()
                    + f64::from(beta[c]),
            );
        }
    }
    out
}

/// Softmax in f64 without max-subtraction; valid for bounded logits.
pub fn softmax_oracle(logits: &[f32]) -> Vec<f64> {
    let exps: Vec<f64> = logits.iter().map(|&v| f64::from(v).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Planted-indicator network: conv1 channel 0 is a perfect target detector
/// (post-relu 0.5 on target images, 0 otherwise) wired to the target logit
/// with a large positive weight; all other channels are dead. A competitor
/// logit bias of 1.0 guarantees the target falls at least one rank when the
/// indicator is ablated.
pub fn planted_network(n_channels: usize, n_classes: usize, target: u16) -> (ModelGraph, Dataset) {
    let side = 4usize;
    let mut conv_w = vec![0.0f32; n_channels];
    conv_w[0] = 1.0;
    let mut conv_b = vec![0.0f32; n_channels];
    conv_b[0] = -0.5;

    let flat = n_channels * side * side;
    let mut dense_w = vec![0.0f32; n_classes * flat];
    for k in 0..side * side {
        dense_w[target as usize * flat + k] = 10.0 / (side * side) as f32;
    }
    let mut dense_b = vec![0.0f32; n_classes];
    let competitor = if target == 0 { 1 } else { 0 };
    dense_b[competitor] = 1.0;

    let unary = |id: &str, input: &str, kind: LayerKind| Layer {
        spec: LayerSpec {
            id: id.into(),
            kind,
            inputs: vec![input.into()],
        },
        params: LayerParams::None,
    };
    let layers = vec![
        Layer {
            spec: LayerSpec {
                id: "conv1".into(),
                kind: LayerKind::Conv2d {
                    out_channels: n_channels,
                    in_channels: 1,
                    kernel: [1, 1],
                    stride: 1,
                    padding: 0,
                },
                inputs: vec![INPUT_ID.into()],
            },
            params: LayerParams::Conv {
                weight: Tensor::new(vec![n_channels, 1, 1, 1], conv_w).unwrap(),
                bias: conv_b,
            },
        },
        unary("relu1", "conv1", LayerKind::Relu),
        unary("flat", "relu1", LayerKind::Flatten),
        Layer {
            spec: LayerSpec {
                id: "logits".into(),
                kind: LayerKind::Dense {
                    out_features: n_classes,
                    in_features: flat,
                },
                inputs: vec!["flat".into()],
            },
            params: LayerParams::Dense {
                weight: Tensor::new(vec![n_classes, flat], dense_w).unwrap(),
                bias: dense_b,
            },
        },
    ];
    let model = ModelGraph::new(vec![1, side, side], layers).unwrap();

    let per_class = 10usize;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for class in 0..n_classes as u16 {
        let pixel = if class == target { 255u8 } else { 76u8 };
        for _ in 0..per_class {
            images.extend(std::iter::repeat_n(pixel, side * side));
            labels.push(class);
        }
    }
    let class_names = (0..n_classes).map(|c| format!("class_{c:02}")).collect();
    let dataset = Dataset::new([1, side, side], images, labels, class_names).unwrap();
    (model, dataset)
}
