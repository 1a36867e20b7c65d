//! Dense tensors and the layer operations of the inference engine.
//!
//! Storage is 32-bit, row-major, with a canonical `[channel, y, x]` layout
//! for feature maps. Every reduction accumulates in 64-bit in a fixed index
//! order, so results are bit-identical across runs and worker counts.

use crate::error::{Error, Result};

/// Dense multi-dimensional array of `f32` with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, checking that `product(shape) == data.len()` and all
    /// dims are positive.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("dims must be positive, got {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {expect} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reshape to a flat vector, preserving row-major order.
    pub fn flattened(&self) -> Tensor {
        Tensor {
            shape: vec![self.data.len()],
            data: self.data.clone(),
        }
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0`; `NaN == NaN`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(format!(
            "{what} must be rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// 2-D cross-correlation over a `[ch, y, x]` input with a
/// `[out, in, ky, kx]` kernel, zero padding, and 64-bit accumulation.
///
/// Output spatial dims are `floor((in + 2*padding - k) / stride) + 1`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    expect_rank(input, 3, "conv2d input")?;
    expect_rank(kernel, 4, "conv2d kernel")?;
    if stride == 0 {
        return Err(Error::shape("conv2d stride must be >= 1"));
    }
    let (in_ch, in_y, in_x) = (input.shape[0], input.shape[1], input.shape[2]);
    let (out_ch, k_in, ky, kx) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if k_in != in_ch {
        return Err(Error::shape(format!(
            "kernel expects {k_in} input channels, input has {in_ch}"
        )));
    }
    if bias.len() != out_ch {
        return Err(Error::shape(format!(
            "bias length {} != output channels {out_ch}",
            bias.len()
        )));
    }
    if ky > in_y + 2 * padding || kx > in_x + 2 * padding {
        return Err(Error::shape(format!(
            "kernel {ky}x{kx} larger than padded input {}x{}",
            in_y + 2 * padding,
            in_x + 2 * padding
        )));
    }
    let out_y = (in_y + 2 * padding - ky) / stride + 1;
    let out_x = (in_x + 2 * padding - kx) / stride + 1;

    let mut out = vec![0.0f32; out_ch * out_y * out_x];
    let idata = &input.data;
    let kdata = &kernel.data;
    for oc in 0..out_ch {
        for oy in 0..out_y {
            for ox in 0..out_x {
                let mut acc = f64::from(bias[oc]);
                for ic in 0..in_ch {
                    for dy in 0..ky {
                        let y = (oy * stride + dy) as isize - padding as isize;
                        if y < 0 || y as usize >= in_y {
                            continue;
                        }
                        for dx in 0..kx {
                            let x = (ox * stride + dx) as isize - padding as isize;
                            if x < 0 || x as usize >= in_x {
                                continue;
                            }
                            let iv = idata[(ic * in_y + y as usize) * in_x + x as usize];
                            let kv = kdata[((oc * in_ch + ic) * ky + dy) * kx + dx];
                            acc += f64::from(iv) * f64::from(kv);
                        }
                    }
                }
                out[(oc * out_y + oy) * out_x + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![out_ch, out_y, out_x], out)
}

/// Fully connected layer: `out[i] = sum_j W[i,j] * x[j] + b[i]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &[f32]) -> Result<Tensor> {
    expect_rank(input, 1, "dense input")?;
    expect_rank(weights, 2, "dense weights")?;
    let n = input.shape[0];
    let (m, wn) = (weights.shape[0], weights.shape[1]);
    if wn != n {
        return Err(Error::shape(format!(
            "weights expect {wn} inputs, input has {n}"
        )));
    }
    if bias.len() != m {
        return Err(Error::shape(format!(
            "bias length {} != output length {m}",
            bias.len()
        )));
    }
    let mut out = vec![0.0f32; m];
    for i in 0..m {
        let mut acc = f64::from(bias[i]);
        let row = &weights.data[i * n..(i + 1) * n];
        for j in 0..n {
            acc += f64::from(row[j]) * f64::from(input.data[j]);
        }
        out[i] = acc as f32;
    }
    Tensor::new(vec![m], out)
}

/// Per-channel window max over a `[ch, y, x]` input.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    expect_rank(input, 3, "maxpool2d input")?;
    if window == 0 || stride == 0 {
        return Err(Error::shape("maxpool2d window and stride must be >= 1"));
    }
    let (ch, in_y, in_x) = (input.shape[0], input.shape[1], input.shape[2]);
    if window > in_y || window > in_x {
        return Err(Error::shape(format!(
            "window {window} larger than input {in_y}x{in_x}"
        )));
    }
    let out_y = (in_y - window) / stride + 1;
    let out_x = (in_x - window) / stride + 1;
    let mut out = vec![0.0f32; ch * out_y * out_x];
    for c in 0..ch {
        for oy in 0..out_y {
            for ox in 0..out_x {
                let mut best = f32::NEG_INFINITY;
                for dy in 0..window {
                    for dx in 0..window {
                        let v = input.data[(c * in_y + oy * stride + dy) * in_x + ox * stride + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(c * out_y + oy) * out_x + ox] = best;
            }
        }
    }
    Tensor::new(vec![ch, out_y, out_x], out)
}

/// Inference-mode batch normalization over the leading (channel) dimension:
/// `out = gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batchnorm_infer(
    input: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let ch = input.shape[0];
    for (name, v) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if v.len() != ch {
            return Err(Error::shape(format!(
                "{name} length {} != channel count {ch}",
                v.len()
            )));
        }
    }
    if let Some(v) = var.iter().find(|v| **v < 0.0) {
        return Err(Error::validation(format!("negative variance {v}")));
    }
    if !(eps > 0.0) {
        return Err(Error::validation(format!("eps must be > 0, got {eps}")));
    }
    let per_ch: usize = input.shape[1..].iter().product::<usize>().max(1);
    let mut out = vec![0.0f32; input.data.len()];
    for c in 0..ch {
        let scale = f64::from(gamma[c]) / (f64::from(var[c]) + f64::from(eps)).sqrt();
        let m = f64::from(mean[c]);
        let b = f64::from(beta[c]);
        for i in 0..per_ch {
            let idx = c * per_ch + i;
            out[idx] = (scale * (f64::from(input.data[idx]) - m) + b) as f32;
        }
    }
    Tensor::new(input.shape.clone(), out)
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data.iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: input.shape.clone(),
        data,
    }
}

/// Elementwise sum of two same-shape tensors (64-bit adds).
pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "residual_add shapes differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| (f64::from(x) + f64::from(y)) as f32)
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Numerically stable softmax over a slice of finite logits.
///
/// Computed with max-subtraction and 64-bit accumulation; outputs are
/// positive and sum to 1 within 1e-6, and preserve the ordering of the
/// logits.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    if logits.is_empty() {
        return Vec::new();
    }
    let mut max = f64::NEG_INFINITY;
    for &v in logits {
        let v = f64::from(v);
        if v > max {
            max = v;
        }
    }
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let mut sum = 0.0f64;
    for &e in &exps {
        sum += e;
    }
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

/// Softmax over a rank-1 tensor.
pub fn softmax_tensor(logits: &Tensor) -> Result<Tensor> {
    expect_rank(logits, 1, "softmax input")?;
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: softmax(&logits.data),
    })
}
