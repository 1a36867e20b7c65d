//! Deterministic minibatch SGD trainer for desk-scale CNNs.
//!
//! Training math runs in f64 end to end (weights, activations, gradients);
//! finished weights are stored back as f32. Shuffles and weight init come
//! from named RNG streams, so `(seed, config)` fully determines the trained
//! weights bit-for-bit. Training is single-threaded by contract.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerKind, LayerParams, LayerSpec, ModelGraph, INPUT_ID};
use crate::rng;
use crate::store::Dataset;
use crate::tensor::Tensor;

/// Architecture templates for [`build_model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchTemplate {
    /// conv(16,3x3)-relu-pool — conv(32,3x3)-relu-pool — flatten —
    /// dense(64)-relu — dense(C).
    Desk,
    /// Desk plus a conv-batchnorm-relu residual block after the second pool.
    DeskResidual,
}

impl std::str::FromStr for ArchTemplate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(ArchTemplate::Desk),
            "desk-residual" => Ok(ArchTemplate::DeskResidual),
            other => Err(Error::validation(format!(
                "unknown architecture `{other}` (expected `desk` or `desk-residual`)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    /// Train fraction of the stratified train/eval split.
    pub split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            l2: 1e-4,
            seed: 1,
            split: 0.8,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::validation("learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be >= 1"));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::validation("split fraction must be in (0, 1)"));
        }
        if self.l2 < 0.0 {
            return Err(Error::validation("l2 coefficient must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub final_eval_accuracy: f64,
}

// ---------------------------------------------------------------------------
// Architecture construction
// ---------------------------------------------------------------------------

fn glorot_init(name: &str, dims: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Vec<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut r = rng::stream(seed, "init", name);
    let n: usize = dims.iter().product();
    (0..n).map(|_| r.random_range(-bound..bound) as f32).collect()
}

fn conv(id: &str, input: &str, out_ch: usize, in_ch: usize, seed: u64) -> Layer {
    let dims = vec![out_ch, in_ch, 3, 3];
    let weight = glorot_init(
        &format!("{id}.weight"),
        &dims,
        in_ch * 9,
        out_ch * 9,
        seed,
    );
    Layer {
        spec: LayerSpec {
            id: id.into(),
            kind: LayerKind::Conv2d {
                out_channels: out_ch,
                in_channels: in_ch,
                kernel: [3, 3],
                stride: 1,
                padding: 1,
            },
            inputs: vec![input.into()],
        },
        params: LayerParams::Conv {
            weight: Tensor::new(dims, weight).expect("init dims"),
            bias: vec![0.0; out_ch],
        },
    }
}

fn dense(id: &str, input: &str, out_f: usize, in_f: usize, seed: u64) -> Layer {
    let dims = vec![out_f, in_f];
    let weight = glorot_init(&format!("{id}.weight"), &dims, in_f, out_f, seed);
    Layer {
        spec: LayerSpec {
            id: id.into(),
            kind: LayerKind::Dense {
                out_features: out_f,
                in_features: in_f,
            },
            inputs: vec![input.into()],
        },
        params: LayerParams::Dense {
            weight: Tensor::new(dims, weight).expect("init dims"),
            bias: vec![0.0; out_f],
        },
    }
}

fn unary(id: &str, input: &str, kind: LayerKind) -> Layer {
    Layer {
        spec: LayerSpec {
            id: id.into(),
            kind,
            inputs: vec![input.into()],
        },
        params: LayerParams::None,
    }
}

fn pooled(dim: usize) -> usize {
    (dim - 2) / 2 + 1
}

/// Build a freshly initialized model for one of the architecture templates.
pub fn build_model(
    arch: ArchTemplate,
    input_shape: [usize; 3],
    n_classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    let [ch, h, w] = input_shape;
    if h < 8 || w < 8 {
        return Err(Error::validation(format!(
            "input {h}x{w} too small for the desk architectures (minimum 8x8)"
        )));
    }
    if n_classes < 2 {
        return Err(Error::validation("need at least 2 classes"));
    }
    let (h2, w2) = (pooled(pooled(h)), pooled(pooled(w)));
    let flat = 32 * h2 * w2;

    let mut layers = vec![
        conv("conv1", INPUT_ID, 16, ch, seed),
        unary("relu1", "conv1", LayerKind::Relu),
        unary(
            "pool1",
            "relu1",
            LayerKind::Maxpool2d {
                window: 2,
                stride: 2,
            },
        ),
        conv("conv2", "pool1", 32, 16, seed),
        unary("relu2", "conv2", LayerKind::Relu),
        unary(
            "pool2",
            "relu2",
            LayerKind::Maxpool2d {
                window: 2,
                stride: 2,
            },
        ),
    ];
    let trunk = match arch {
        ArchTemplate::Desk => "pool2".to_string(),
        ArchTemplate::DeskResidual => {
            layers.push(conv("conv3", "pool2", 32, 32, seed));
            layers.push(Layer {
                spec: LayerSpec {
                    id: "bn3".into(),
                    kind: LayerKind::Batchnorm { epsilon: 1e-5 },
                    inputs: vec!["conv3".into()],
                },
                params: LayerParams::Batchnorm {
                    gamma: vec![1.0; 32],
                    beta: vec![0.0; 32],
                    mean: vec![0.0; 32],
                    variance: vec![1.0; 32],
                },
            });
            layers.push(unary("relu3", "bn3", LayerKind::Relu));
            layers.push(Layer {
                spec: LayerSpec {
                    id: "res".into(),
                    kind: LayerKind::ResidualAdd,
                    inputs: vec!["relu3".into(), "pool2".into()],
                },
                params: LayerParams::None,
            });
            "res".to_string()
        }
    };
    layers.push(unary("flat", &trunk, LayerKind::Flatten));
    layers.push(dense("dense1", "flat", 64, flat, seed));
    layers.push(unary("relu_d1", "dense1", LayerKind::Relu));
    layers.push(dense("dense2", "relu_d1", n_classes, 64, seed));

    ModelGraph::new(input_shape.to_vec(), layers)
}

// ---------------------------------------------------------------------------
// f64 forward/backward
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct Arr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Arr {
    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Arr {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Trainable f64 view of a model: layer structure plus a named parameter
/// store. Buffers (batchnorm mean/variance) are kept but not trained.
pub struct Trainer {
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    topo: Vec<usize>,
    output_layer: usize,
    id_to_index: BTreeMap<String, usize>,
    params: BTreeMap<String, Arr>,
    trainable: Vec<String>,
}

impl Trainer {
    /// Capture a model's structure and parameters for training.
    pub fn from_model(model: &ModelGraph) -> Result<Self> {
        let mut params = BTreeMap::new();
        let mut trainable = Vec::new();
        for layer in model.layers() {
            let id = &layer.spec.id;
            if matches!(layer.spec.kind, LayerKind::Softmax) {
                return Err(Error::validation(
                    "trainer expects logits output; remove the softmax layer",
                ));
            }
            match &layer.params {
                LayerParams::Conv { weight, bias } | LayerParams::Dense { weight, bias } => {
                    params.insert(
                        format!("{id}.weight"),
                        Arr {
                            shape: weight.shape().to_vec(),
                            data: weight.data().iter().map(|&v| f64::from(v)).collect(),
                        },
                    );
                    params.insert(
                        format!("{id}.bias"),
                        Arr {
                            shape: vec![bias.len()],
                            data: bias.iter().map(|&v| f64::from(v)).collect(),
                        },
                    );
                    trainable.push(format!("{id}.weight"));
                    trainable.push(format!("{id}.bias"));
                }
                LayerParams::Batchnorm {
                    gamma,
                    beta,
                    mean,
                    variance,
                } => {
                    for (suffix, values) in [
                        ("gamma", gamma),
                        ("beta", beta),
                        ("mean", mean),
                        ("variance", variance),
                    ] {
                        params.insert(
                            format!("{id}.{suffix}"),
                            Arr {
                                shape: vec![values.len()],
                                data: values.iter().map(|&v| f64::from(v)).collect(),
                            },
                        );
                    }
                    trainable.push(format!("{id}.gamma"));
                    trainable.push(format!("{id}.beta"));
                }
                LayerParams::None => {}
            }
        }
        let id_to_index = model
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| (l.spec.id.clone(), i))
            .collect();
        Ok(Trainer {
            specs: model.layers().iter().map(|l| l.spec.clone()).collect(),
            input_shape: model.input_shape().to_vec(),
            topo: model.topo_order().to_vec(),
            output_layer: model
                .topo_order()
                .iter()
                .copied()
                .find(|&i| {
                    let id = &model.layers()[i].spec.id;
                    !model
                        .layers()
                        .iter()
                        .any(|l| l.spec.inputs.iter().any(|inp| inp == id))
                })
                .expect("validated model has a sink"),
            id_to_index,
            params,
            trainable,
        })
    }

    /// Trainable parameter names in deterministic order.
    pub fn trainable_names(&self) -> &[String] {
        &self.trainable
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).map(|a| a.data.as_slice())
    }

    pub fn set_param_value(&mut self, name: &str, index: usize, value: f64) -> Result<()> {
        let arr = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::validation(format!("unknown parameter `{name}`")))?;
        if index >= arr.data.len() {
            return Err(Error::validation(format!(
                "index {index} out of range for `{name}`"
            )));
        }
        arr.data[index] = value;
        Ok(())
    }

    fn image_to_arr(&self, image: &Tensor) -> Arr {
        Arr {
            shape: image.shape().to_vec(),
            data: image.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    /// Forward pass storing every layer output (plus maxpool argmaxes).
    fn forward_all(&self, image: &Arr) -> Result<(Vec<Arr>, Vec<Vec<usize>>)> {
        let mut outputs: Vec<Arr> = vec![Arr::zeros(vec![1]); self.specs.len()];
        let mut pool_args: Vec<Vec<usize>> = vec![Vec::new(); self.specs.len()];
        for &i in &self.topo {
            let spec = &self.specs[i];
            let input_of = |id: &String| -> &Arr {
                if id == INPUT_ID {
                    image
                } else {
                    &outputs[self.id_to_index[id]]
                }
            };
            let out = match &spec.kind {
                LayerKind::Conv2d {
                    stride, padding, ..
                } => {
                    let x = input_of(&spec.inputs[0]);
                    let w = &self.params[&format!("{}.weight", spec.id)];
                    let b = &self.params[&format!("{}.bias", spec.id)];
                    conv_fwd(x, w, &b.data, *stride, *padding)
                }
                LayerKind::Dense { .. } => {
                    let x = input_of(&spec.inputs[0]);
                    let w = &self.params[&format!("{}.weight", spec.id)];
                    let b = &self.params[&format!("{}.bias", spec.id)];
                    dense_fwd(x, w, &b.data)
                }
                LayerKind::Relu => {
                    let x = input_of(&spec.inputs[0]);
                    Arr {
                        shape: x.shape.clone(),
                        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                    }
                }
                LayerKind::Maxpool2d { window, stride } => {
                    let x = input_of(&spec.inputs[0]);
                    let (out, args) = maxpool_fwd(x, *window, *stride);
                    pool_args[i] = args;
                    out
                }
                LayerKind::Batchnorm { epsilon } => {
                    let x = input_of(&spec.inputs[0]);
                    let gamma = &self.params[&format!("{}.gamma", spec.id)];
                    let beta = &self.params[&format!("{}.beta", spec.id)];
                    let mean = &self.params[&format!("{}.mean", spec.id)];
                    let var = &self.params[&format!("{}.variance", spec.id)];
                    bn_fwd(x, &gamma.data, &beta.data, &mean.data, &var.data, f64::from(*epsilon))
                }
                LayerKind::ResidualAdd => {
                    let a = input_of(&spec.inputs[0]);
                    let b = input_of(&spec.inputs[1]);
                    Arr {
                        shape: a.shape.clone(),
                        data: a
                            .data
                            .iter()
                            .zip(b.data.iter())
                            .map(|(&x, &y)| x + y)
                            .collect(),
                    }
                }
                LayerKind::Flatten => {
                    let x = input_of(&spec.inputs[0]);
                    Arr {
                        shape: vec![x.data.len()],
                        data: x.data.clone(),
                    }
                }
                LayerKind::Softmax => unreachable!("rejected in from_model"),
            };
            outputs[i] = out;
        }
        Ok((outputs, pool_args))
    }

    /// Logits for one image.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        let (outputs, _) = self.forward_all(&self.image_to_arr(image))?;
        Ok(outputs[self.output_layer].data.clone())
    }

    /// Mean softmax cross-entropy over a batch plus the L2 penalty
    /// `0.5 * l2 * sum(weight^2)` over weight matrices.
    pub fn loss(&self, images: &[Tensor], labels: &[u16], l2: f64) -> Result<f64> {
        let mut total = 0.0f64;
        for (image, &label) in images.iter().zip(labels) {
            let logits = self.logits(image)?;
            total += cross_entropy(&logits, label as usize);
        }
        let mut loss = total / images.len() as f64;
        loss += 0.5 * l2 * self.weight_norm_sq();
        Ok(loss)
    }

    fn weight_norm_sq(&self) -> f64 {
        let mut acc = 0.0;
        for name in &self.trainable {
            if name.ends_with(".weight") {
                for &v in &self.params[name].data {
                    acc += v * v;
                }
            }
        }
        acc
    }

    /// Loss plus analytic gradients for every trainable parameter.
    pub fn loss_and_gradient(
        &self,
        images: &[Tensor],
        labels: &[u16],
        l2: f64,
    ) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let mut grads: BTreeMap<String, Vec<f64>> = self
            .trainable
            .iter()
            .map(|n| (n.clone(), vec![0.0; self.params[n].data.len()]))
            .collect();
        let scale = 1.0 / images.len() as f64;
        let mut total = 0.0f64;

        for (image, &label) in images.iter().zip(labels) {
            let image = self.image_to_arr(image);
            let (outputs, pool_args) = self.forward_all(&image)?;
            let logits = &outputs[self.output_layer];
            total += cross_entropy(&logits.data, label as usize);

            // dL/dlogits for the mean loss.
            let probs = softmax64(&logits.data);
            let mut grad_out: Vec<Vec<f64>> =
                self.specs.iter().map(|_| Vec::new()).collect();
            grad_out[self.output_layer] = probs
                .iter()
                .enumerate()
                .map(|(i, &p)| (p - if i == label as usize { 1.0 } else { 0.0 }) * scale)
                .collect();

            // Reverse topological accumulation.
            for &i in self.topo.iter().rev() {
                if grad_out[i].is_empty() {
                    continue;
                }
                let spec = &self.specs[i];
                let g = std::mem::take(&mut grad_out[i]);
                let input_arr = |id: &String| -> &Arr {
                    if id == INPUT_ID {
                        &image
                    } else {
                        &outputs[self.id_to_index[id]]
                    }
                };
                let push = |grad_out: &mut Vec<Vec<f64>>, id: &String, g: Vec<f64>| {
                    if id == INPUT_ID {
                        return;
                    }
                    let j = self.id_to_index[id];
                    if grad_out[j].is_empty() {
                        grad_out[j] = g;
                    } else {
                        for (a, b) in grad_out[j].iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                };
                match &spec.kind {
                    LayerKind::Conv2d {
                        stride, padding, ..
                    } => {
                        let x = input_arr(&spec.inputs[0]);
                        let w = &self.params[&format!("{}.weight", spec.id)];
                        let (gx, gw, gb) = conv_bwd(x, w, &outputs[i].shape, &g, *stride, *padding);
                        accumulate(grads.get_mut(&format!("{}.weight", spec.id)).unwrap(), &gw);
                        accumulate(grads.get_mut(&format!("{}.bias", spec.id)).unwrap(), &gb);
                        push(&mut grad_out, &spec.inputs[0], gx);
                    }
                    LayerKind::Dense { .. } => {
                        let x = input_arr(&spec.inputs[0]);
                        let w = &self.params[&format!("{}.weight", spec.id)];
                        let (gx, gw, gb) = dense_bwd(x, w, &g);
                        accumulate(grads.get_mut(&format!("{}.weight", spec.id)).unwrap(), &gw);
                        accumulate(grads.get_mut(&format!("{}.bias", spec.id)).unwrap(), &gb);
                        push(&mut grad_out, &spec.inputs[0], gx);
                    }
                    LayerKind::Relu => {
                        let y = &outputs[i];
                        let gx = y
                            .data
                            .iter()
                            .zip(&g)
                            .map(|(&v, &gy)| if v > 0.0 { gy } else { 0.0 })
                            .collect();
                        push(&mut grad_out, &spec.inputs[0], gx);
                    }
                    LayerKind::Maxpool2d { .. } => {
                        let x = input_arr(&spec.inputs[0]);
                        let mut gx = vec![0.0; x.data.len()];
                        for (o, &src) in pool_args[i].iter().enumerate() {
                            gx[src] += g[o];
                        }
                        push(&mut grad_out, &spec.inputs[0], gx);
                    }
                    LayerKind::Batchnorm { epsilon } => {
                        let x = input_arr(&spec.inputs[0]);
                        let gamma = &self.params[&format!("{}.gamma", spec.id)];
                        let mean = &self.params[&format!("{}.mean", spec.id)];
                        let var = &self.params[&format!("{}.variance", spec.id)];
                        let ch = x.shape[0];
                        let span = x.data.len() / ch;
                        let mut gx = vec![0.0; x.data.len()];
                        let mut ggamma = vec![0.0; ch];
                        let mut gbeta = vec![0.0; ch];
                        for c in 0..ch {
                            let inv = 1.0 / (var.data[c] + f64::from(*epsilon)).sqrt();
                            for k in 0..span {
                                let idx = c * span + k;
                                gx[idx] = g[idx] * gamma.data[c] * inv;
                                ggamma[c] += g[idx] * (x.data[idx] - mean.data[c]) * inv;
                                gbeta[c] += g[idx];
                            }
                        }
                        accumulate(grads.get_mut(&format!("{}.gamma", spec.id)).unwrap(), &ggamma);
                        accumulate(grads.get_mut(&format!("{}.beta", spec.id)).unwrap(), &gbeta);
                        push(&mut grad_out, &spec.inputs[0], gx);
                    }
                    LayerKind::ResidualAdd => {
                        push(&mut grad_out, &spec.inputs[0], g.clone());
                        push(&mut grad_out, &spec.inputs[1], g);
                    }
                    LayerKind::Flatten => {
                        push(&mut grad_out, &spec.inputs[0], g);
                    }
                    LayerKind::Softmax => unreachable!(),
                }
            }
        }

        let mut loss = total / images.len() as f64;
        loss += 0.5 * l2 * self.weight_norm_sq();
        for name in &self.trainable {
            if name.ends_with(".weight") {
                let w = &self.params[name].data;
                let g = grads.get_mut(name).unwrap();
                for (gi, &wi) in g.iter_mut().zip(w) {
                    *gi += l2 * wi;
                }
            }
        }
        Ok((loss, grads))
    }

    /// Minibatch SGD over the train split of `dataset`.
    pub fn train(&mut self, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
        cfg.validate()?;
        let (train_rows, eval_rows) = stratified_split(dataset, cfg.split, cfg.seed);
        if train_rows.is_empty() {
            return Err(Error::validation("train split is empty"));
        }
        let images: Vec<Tensor> = (0..dataset.n_images())
            .map(|i| dataset.image_tensor(i))
            .collect();

        let mut log = TrainLog::default();
        for epoch in 0..cfg.epochs {
            let mut order = train_rows.clone();
            order.shuffle(&mut rng::stream_indexed(cfg.seed, "train-shuffle", epoch as u64));

            let mut epoch_loss = 0.0f64;
            for batch in order.chunks(cfg.batch_size) {
                let batch_images: Vec<Tensor> =
                    batch.iter().map(|&i| images[i].clone()).collect();
                let batch_labels: Vec<u16> = batch.iter().map(|&i| dataset.label(i)).collect();
                let (loss, grads) =
                    self.loss_and_gradient(&batch_images, &batch_labels, cfg.l2)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                for (name, grad) in &grads {
                    let p = self.params.get_mut(name).expect("trainable exists");
                    for (w, &g) in p.data.iter_mut().zip(grad) {
                        *w -= cfg.learning_rate * g;
                    }
                }
                epoch_loss += loss * batch.len() as f64;
            }

            let eval_accuracy = self.accuracy(dataset, &eval_rows)?;
            log.epochs.push(EpochStats {
                epoch,
                train_loss: epoch_loss / train_rows.len() as f64,
                eval_accuracy,
            });
        }
        log.final_eval_accuracy = if cfg.epochs == 0 {
            self.accuracy(dataset, &eval_rows)?
        } else {
            log.epochs.last().map(|e| e.eval_accuracy).unwrap_or(0.0)
        };
        Ok(log)
    }

    /// Argmax accuracy over the given rows (ties -> lowest class index).
    pub fn accuracy(&self, dataset: &Dataset, rows: &[usize]) -> Result<f64> {
        if rows.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for &row in rows {
            let logits = self.logits(&dataset.image_tensor(row))?;
            if argmax(&logits) == dataset.label(row) as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / rows.len() as f64)
    }

    /// Build the finished f32 model.
    pub fn into_model(self) -> Result<ModelGraph> {
        let mut layers = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            let id = &spec.id;
            let params = match spec.kind {
                LayerKind::Conv2d { .. } => {
                    let w = &self.params[&format!("{id}.weight")];
                    LayerParams::Conv {
                        weight: Tensor::new(
                            w.shape.clone(),
                            w.data.iter().map(|&v| v as f32).collect(),
                        )?,
                        bias: self.params[&format!("{id}.bias")]
                            .data
                            .iter()
                            .map(|&v| v as f32)
                            .collect(),
                    }
                }
                LayerKind::Dense { .. } => {
                    let w = &self.params[&format!("{id}.weight")];
                    LayerParams::Dense {
                        weight: Tensor::new(
                            w.shape.clone(),
                            w.data.iter().map(|&v| v as f32).collect(),
                        )?,
                        bias: self.params[&format!("{id}.bias")]
                            .data
                            .iter()
                            .map(|&v| v as f32)
                            .collect(),
                    }
                }
                LayerKind::Batchnorm { .. } => LayerParams::Batchnorm {
                    gamma: self.params[&format!("{id}.gamma")]
                        .data
                        .iter()
                        .map(|&v| v as f32)
                        .collect(),
                    beta: self.params[&format!("{id}.beta")]
                        .data
                        .iter()
                        .map(|&v| v as f32)
                        .collect(),
                    mean: self.params[&format!("{id}.mean")]
                        .data
                        .iter()
                        .map(|&v| v as f32)
                        .collect(),
                    variance: self.params[&format!("{id}.variance")]
                        .data
                        .iter()
                        .map(|&v| v as f32)
                        .collect(),
                },
                _ => LayerParams::None,
            };
            layers.push(Layer {
                spec: spec.clone(),
                params,
            });
        }
        ModelGraph::new(self.input_shape.clone(), layers)
    }
}

/// Stratified train/eval row split; per-class shuffle from a named stream.
pub fn stratified_split(dataset: &Dataset, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for class in 0..dataset.n_classes() as u16 {
        let mut rows = dataset.class_rows(class);
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(&mut rng::stream(seed, "split", &class.to_string()));
        let mut n_train = (rows.len() as f64 * train_fraction).floor() as usize;
        if rows.len() >= 2 {
            n_train = n_train.clamp(1, rows.len() - 1);
        } else {
            n_train = rows.len();
        }
        train.extend_from_slice(&rows[..n_train]);
        eval.extend_from_slice(&rows[n_train..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    (train, eval)
}

/// Convenience wrapper: build, train, and return the finished model.
pub fn train_model(
    arch: ArchTemplate,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelGraph, TrainLog)> {
    let [ch, h, w] = dataset.shape();
    let model = build_model(arch, [ch, h, w], dataset.n_classes(), cfg.seed)?;
    let mut trainer = Trainer::from_model(&model)?;
    let log = trainer.train(dataset, cfg)?;
    Ok((trainer.into_model()?, log))
}

fn accumulate(acc: &mut [f64], g: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    (max + sum.ln()) - logits[label]
}

fn conv_fwd(x: &Arr, w: &Arr, bias: &[f64], stride: usize, padding: usize) -> Arr {
    let (in_ch, in_y, in_x) = (x.shape[0], x.shape[1], x.shape[2]);
    let (out_ch, _, ky, kx) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let out_y = (in_y + 2 * padding - ky) / stride + 1;
    let out_x = (in_x + 2 * padding - kx) / stride + 1;
    let mut out = Arr::zeros(vec![out_ch, out_y, out_x]);
    for oc in 0..out_ch {
        for oy in 0..out_y {
            for ox in 0..out_x {
                let mut acc = bias[oc];
                for ic in 0..in_ch {
                    for dy in 0..ky {
                        let y = (oy * stride + dy) as isize - padding as isize;
                        if y < 0 || y as usize >= in_y {
                            continue;
                        }
                        for dx in 0..kx {
                            let xx = (ox * stride + dx) as isize - padding as isize;
                            if xx < 0 || xx as usize >= in_x {
                                continue;
                            }
                            acc += x.data[(ic * in_y + y as usize) * in_x + xx as usize]
                                * w.data[((oc * in_ch + ic) * ky + dy) * kx + dx];
                        }
                    }
                }
                out.data[(oc * out_y + oy) * out_x + ox] = acc;
            }
        }
    }
    out
}

fn conv_bwd(
    x: &Arr,
    w: &Arr,
    out_shape: &[usize],
    g: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (in_ch, in_y, in_x) = (x.shape[0], x.shape[1], x.shape[2]);
    let (out_ch, _, ky, kx) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let (out_y, out_x) = (out_shape[1], out_shape[2]);
    let mut gx = vec![0.0; x.data.len()];
    let mut gw = vec![0.0; w.data.len()];
    let mut gb = vec![0.0; out_ch];
    for oc in 0..out_ch {
        for oy in 0..out_y {
            for ox in 0..out_x {
                let go = g[(oc * out_y + oy) * out_x + ox];
                gb[oc] += go;
                for ic in 0..in_ch {
                    for dy in 0..ky {
                        let y = (oy * stride + dy) as isize - padding as isize;
                        if y < 0 || y as usize >= in_y {
                            continue;
                        }
                        for dx in 0..kx {
                            let xx = (ox * stride + dx) as isize - padding as isize;
                            if xx < 0 || xx as usize >= in_x {
                                continue;
                            }
                            let xi = (ic * in_y + y as usize) * in_x + xx as usize;
                            let wi = ((oc * in_ch + ic) * ky + dy) * kx + dx;
                            gw[wi] += go * x.data[xi];
                            gx[xi] += go * w.data[wi];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn dense_fwd(x: &Arr, w: &Arr, bias: &[f64]) -> Arr {
    let (m, n) = (w.shape[0], w.shape[1]);
    let mut out = Arr::zeros(vec![m]);
    for i in 0..m {
        let mut acc = bias[i];
        for j in 0..n {
            acc += w.data[i * n + j] * x.data[j];
        }
        out.data[i] = acc;
    }
    out
}

fn dense_bwd(x: &Arr, w: &Arr, g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (m, n) = (w.shape[0], w.shape[1]);
    let mut gx = vec![0.0; n];
    let mut gw = vec![0.0; m * n];
    let gb = g.to_vec();
    for i in 0..m {
        for j in 0..n {
            gw[i * n + j] = g[i] * x.data[j];
            gx[j] += g[i] * w.data[i * n + j];
        }
    }
    (gx, gw, gb)
}

fn maxpool_fwd(x: &Arr, window: usize, stride: usize) -> (Arr, Vec<usize>) {
    let (ch, in_y, in_x) = (x.shape[0], x.shape[1], x.shape[2]);
    let out_y = (in_y - window) / stride + 1;
    let out_x = (in_x - window) / stride + 1;
    let mut out = Arr::zeros(vec![ch, out_y, out_x]);
    let mut args = vec![0usize; ch * out_y * out_x];
    for c in 0..ch {
        for oy in 0..out_y {
            for ox in 0..out_x {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = (c * in_y + oy * stride + dy) * in_x + ox * stride + dx;
                        if x.data[idx] > best {
                            best = x.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * out_y + oy) * out_x + ox;
                out.data[o] = best;
                args[o] = best_idx;
            }
        }
    }
    (out, args)
}

fn bn_fwd(x: &Arr, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Arr {
    let ch = x.shape[0];
    let span = x.data.len() / ch;
    let mut out = Arr::zeros(x.shape.clone());
    for c in 0..ch {
        let inv = 1.0 / (var[c] + eps).sqrt();
        for k in 0..span {
            let idx = c * span + k;
            out.data[idx] = gamma[c] * (x.data[idx] - mean[c]) * inv + beta[c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatagenConfig};

    fn tiny_dataset() -> Dataset {
        generate_dataset(&DatagenConfig {
            n_classes: 2,
            per_class: 4,
            shape: [1, 8, 8],
            noise: 0.2,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let ds = tiny_dataset();
        let model = build_model(ArchTemplate::Desk, [1, 8, 8], 2, 3).unwrap();
        let mut trainer = Trainer::from_model(&model).unwrap();
        let before: Vec<(String, Vec<u64>)> = trainer
            .trainable_names()
            .to_vec()
            .iter()
            .map(|n| {
                (
                    n.clone(),
                    trainer.param(n).unwrap().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect();
        trainer
            .train(
                &ds,
                &TrainConfig {
                    learning_rate: 0.0,
                    epochs: 3,
                    batch_size: 4,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
        for (name, bits) in before {
            let after: Vec<u64> = trainer.param(&name).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, after, "{name} changed under lr=0");
        }
    }

    #[test]
    fn single_example_memorization() {
        // A single training example; 200 full-batch steps drive the loss
        // below 0.01, non-increasing after the first epoch.
        let ds = tiny_dataset();
        let single = Dataset::new(
            [1, 8, 8],
            ds.image_bytes(0).to_vec(),
            vec![0],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let model = build_model(ArchTemplate::Desk, [1, 8, 8], 2, 11).unwrap();
        let mut trainer = Trainer::from_model(&model).unwrap();
        let log = trainer
            .train(
                &single,
                &TrainConfig {
                    learning_rate: 0.2,
                    epochs: 200,
                    batch_size: 1,
                    l2: 0.0,
                    seed: 11,
                    split: 0.5,
                },
            )
            .unwrap();
        let losses: Vec<f64> = log.epochs.iter().map(|e| e.train_loss).collect();
        assert!(losses.last().unwrap() < &0.01, "final loss {losses:?}");
        for pair in losses.windows(2).skip(1) {
            assert!(pair[1] <= pair[0] + 1e-12, "loss increased: {pair:?}");
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let (a, log_a) = train_model(ArchTemplate::Desk, &ds, &cfg).unwrap();
        let (b, log_b) = train_model(ArchTemplate::Desk, &ds, &cfg).unwrap();
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la.params, lb.params);
        }
        assert_eq!(
            serde_json::to_string(&log_a).unwrap(),
            serde_json::to_string(&log_b).unwrap()
        );
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        // Random 2-layer net: conv -> relu -> flatten -> dense on a small
        // input; central differences at h=1e-3 in f64.
        let mut r = crate::rng::stream(21, "train-test", "fd");
        use rand::Rng;
        let layers = vec![
            conv("c", INPUT_ID, 3, 1, 21),
            unary("r", "c", LayerKind::Relu),
            unary("f", "r", LayerKind::Flatten),
            dense("d", "f", 3, 3 * 6 * 6, 21),
        ];
        let model = ModelGraph::new(vec![1, 6, 6], layers).unwrap();
        let mut trainer = Trainer::from_model(&model).unwrap();

        let images: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::new(
                    vec![1, 6, 6],
                    (0..36).map(|_| r.random_range(0.05f32..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let labels = vec![0u16, 1, 2];
        let l2 = 1e-3;

        let (_, grads) = trainer.loss_and_gradient(&images, &labels, l2).unwrap();

        let names: Vec<String> = trainer.trainable_names().to_vec();
        let mut checked = 0usize;
        let h = 1e-3;
        for k in 0..60 {
            let name = &names[k % names.len()];
            let len = trainer.param(name).unwrap().len();
            let idx = (k * 2654435761) % len;
            let orig = trainer.param(name).unwrap()[idx];

            trainer.set_param_value(name, idx, orig + h).unwrap();
            let up = trainer.loss(&images, &labels, l2).unwrap();
            trainer.set_param_value(name, idx, orig - h).unwrap();
            let down = trainer.loss(&images, &labels, l2).unwrap();
            trainer.set_param_value(name, idx, orig).unwrap();

            let fd = (up - down) / (2.0 * h);
            let analytic = grads[name][idx];
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                ((fd - analytic) / denom).abs() < 1e-4,
                "{name}[{idx}]: fd {fd} vs analytic {analytic}"
            );
            checked += 1;
        }
        assert!(checked >= 50);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let ds = tiny_dataset();
        let model = build_model(ArchTemplate::Desk, [1, 8, 8], 2, 3).unwrap();
        let mut trainer = Trainer::from_model(&model).unwrap();
        trainer.set_param_value("conv1.weight", 0, f64::NAN).unwrap();
        let err = trainer
            .train(
                &ds,
                &TrainConfig {
                    epochs: 5,
                    batch_size: 8,
                    ..TrainConfig::default()
                },
            )
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0 }), "{err}");
    }

    #[test]
    fn residual_arch_builds_and_trains_a_step() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (model, _) = train_model(ArchTemplate::DeskResidual, &ds, &cfg).unwrap();
        assert!(model.layer("bn3").is_some());
        assert!(model.layer("res").is_some());
        // Capture of the branch conv sits on the relu before the merge.
        assert_eq!(model.capture_point_of("conv3"), Some("relu3"));
    }
}
