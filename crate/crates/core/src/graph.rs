//! Layer DAG, ablation masks, and the forward pass with activation taps.
//!
//! A unit is one output channel of a conv layer or one neuron of a dense
//! layer. Ablating a unit zeroes its outgoing activation at the unit's
//! capture point: the relu following the layer (reached through an optional
//! batchnorm), or the layer's own output if no relu follows. Tapped
//! activations are read at the same point, after masking, so captured values
//! always reflect the ablation state.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Reserved id for the model input inside `LayerSpec::inputs`.
pub const INPUT_ID: &str = "input";

/// Layer kind plus its structural hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        in_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    },
    Dense {
        out_features: usize,
        in_features: usize,
    },
    Relu,
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    Batchnorm {
        epsilon: f32,
    },
    ResidualAdd,
    Flatten,
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool2d { .. } => "maxpool2d",
            LayerKind::Batchnorm { .. } => "batchnorm",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::Flatten => "flatten",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Units of this layer can be ablated (conv channels, dense neurons).
    pub fn is_maskable(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::ResidualAdd => 2,
            _ => 1,
        }
    }
}

/// One node of the model DAG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

/// Learned parameters attached to a layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Conv { weight: Tensor, bias: Vec<f32> },
    Dense { weight: Tensor, bias: Vec<f32> },
    Batchnorm {
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        variance: Vec<f32>,
    },
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

/// Identifier of a maskable unit: layer id plus channel/neuron index.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: String,
    pub index: usize,
}

impl UnitId {
    pub fn new(layer: impl Into<String>, index: usize) -> Self {
        UnitId {
            layer: layer.into(),
            index,
        }
    }
}

/// Set of units whose outgoing activation is zeroed during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    units: BTreeSet<UnitId>,
}

impl AblationMask {
    pub fn empty() -> Self {
        AblationMask::default()
    }

    pub fn from_units<I: IntoIterator<Item = UnitId>>(units: I) -> Self {
        AblationMask {
            units: units.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, unit: UnitId) {
        self.units.insert(unit);
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> impl Iterator<Item = &UnitId> {
        self.units.iter()
    }

    pub fn contains(&self, unit: &UnitId) -> bool {
        self.units.contains(unit)
    }

    /// Indices masked within one layer, ascending.
    pub fn indices_for_layer<'a>(&'a self, layer: &'a str) -> impl Iterator<Item = usize> + 'a {
        self.units
            .iter()
            .filter(move |u| u.layer == layer)
            .map(|u| u.index)
    }

    /// Check every unit against the model's maskable layers and ranges.
    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        for unit in &self.units {
            let count = model.unit_count(&unit.layer).ok_or_else(|| {
                Error::validation(format!(
                    "mask names `{}` which is not a maskable layer",
                    unit.layer
                ))
            })?;
            if unit.index >= count {
                return Err(Error::validation(format!(
                    "mask index {} out of range for layer `{}` with {count} units",
                    unit.index, unit.layer
                )));
            }
        }
        Ok(())
    }
}

/// Zero masked units of `layer_id` in an activation tensor.
///
/// Rank-3 activations (`[ch, y, x]`) lose whole channels; rank-1 activations
/// lose single elements. Unmasked values are returned bit-identical.
pub fn apply_mask(activation: &Tensor, layer_id: &str, mask: &AblationMask) -> Result<Tensor> {
    let mut out = activation.clone();
    apply_mask_in_place(&mut out, layer_id, mask)?;
    Ok(out)
}

fn apply_mask_in_place(activation: &mut Tensor, layer_id: &str, mask: &AblationMask) -> Result<()> {
    let shape = activation.shape().to_vec();
    let units = shape[0];
    let span: usize = shape[1..].iter().product::<usize>().max(1);
    for index in mask.indices_for_layer(layer_id) {
        if index >= units {
            return Err(Error::validation(format!(
                "mask index {index} out of range for layer `{layer_id}` with {units} units"
            )));
        }
        let data = activation.data_mut();
        for v in &mut data[index * span..(index + 1) * span] {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Output of [`ModelGraph::forward`].
#[derive(Clone, Debug)]
pub struct ForwardResult {
    /// Output of the final layer (logits for classifier models).
    pub output: Tensor,
    /// Post-mask activation at the capture point of each tapped layer.
    pub taps: BTreeMap<String, Tensor>,
}

impl ForwardResult {
    /// Final output as a flat vector; errors if it is not rank 1.
    pub fn logits(&self) -> Result<&[f32]> {
        if self.output.rank() != 1 {
            return Err(Error::validation(format!(
                "model output has shape {:?}, expected a vector",
                self.output.shape()
            )));
        }
        Ok(self.output.data())
    }
}

/// Ordered layer DAG with weights; immutable once built.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    id_to_index: HashMap<String, usize>,
    topo_order: Vec<usize>,
    output_layer: usize,
    output_shapes: Vec<Vec<usize>>,
    /// layer index -> maskable layer index whose capture point it is.
    capture_owner: HashMap<usize, usize>,
    /// maskable layer index -> layer index of its capture point.
    capture_point: HashMap<usize, usize>,
    /// Maskable layer ids in declaration order with unit counts.
    maskable: Vec<(String, usize)>,
}

impl ModelGraph {
    /// Validate the DAG, infer shapes, and precompute capture points.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::validation(format!(
                "input shape dims must be positive, got {input_shape:?}"
            )));
        }
        if layers.is_empty() {
            return Err(Error::validation("model has no layers"));
        }

        let mut id_to_index = HashMap::new();
        for (i, layer) in layers.iter().enumerate() {
            let id = &layer.spec.id;
            if id.is_empty() || id == INPUT_ID {
                return Err(Error::validation(format!("illegal layer id `{id}`")));
            }
            if id_to_index.insert(id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate layer id `{id}`")));
            }
        }

        // Arity and dangling-input checks.
        for layer in &layers {
            let arity = layer.spec.kind.arity();
            if layer.spec.inputs.len() != arity {
                return Err(Error::validation(format!(
                    "layer `{}` ({}) takes {arity} input(s), got {}",
                    layer.spec.id,
                    layer.spec.kind.name(),
                    layer.spec.inputs.len()
                )));
            }
            for input in &layer.spec.inputs {
                if input != INPUT_ID && !id_to_index.contains_key(input) {
                    return Err(Error::validation(format!(
                        "layer `{}` references unknown input `{input}`",
                        layer.spec.id
                    )));
                }
            }
        }

        // Kahn topological sort, iterating layers in declaration order so the
        // resulting evaluation order is deterministic.
        let mut indegree = vec![0usize; layers.len()];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); layers.len()];
        for (i, layer) in layers.iter().enumerate() {
            for input in &layer.spec.inputs {
                if input != INPUT_ID {
                    let j = id_to_index[input];
                    indegree[i] += 1;
                    consumers[j].push(i);
                }
            }
        }
        let mut ready: Vec<usize> = (0..layers.len()).filter(|&i| indegree[i] == 0).collect();
        let mut topo_order = Vec::with_capacity(layers.len());
        let mut cursor = 0;
        while cursor < ready.len() {
            let i = ready[cursor];
            cursor += 1;
            topo_order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        if topo_order.len() != layers.len() {
            return Err(Error::validation("layer graph contains a cycle"));
        }

        // Exactly one sink.
        let sinks: Vec<usize> = (0..layers.len()).filter(|&i| consumers[i].is_empty()).collect();
        if sinks.len() != 1 {
            let names: Vec<&str> = sinks.iter().map(|&i| layers[i].spec.id.as_str()).collect();
            return Err(Error::validation(format!(
                "model must have exactly one output layer, found {names:?}"
            )));
        }
        let output_layer = sinks[0];

        // Shape inference + parameter consistency.
        let mut output_shapes: Vec<Vec<usize>> = vec![Vec::new(); layers.len()];
        for &i in &topo_order {
            let layer = &layers[i];
            let in_shapes: Vec<&[usize]> = layer
                .spec
                .inputs
                .iter()
                .map(|id| {
                    if id == INPUT_ID {
                        input_shape.as_slice()
                    } else {
                        output_shapes[id_to_index[id]].as_slice()
                    }
                })
                .collect();
            output_shapes[i] = infer_shape(layer, &in_shapes)?;
        }

        // Maskable layers and capture points.
        let mut maskable = Vec::new();
        let mut capture_owner = HashMap::new();
        let mut capture_point = HashMap::new();
        for (i, layer) in layers.iter().enumerate() {
            let units = match layer.spec.kind {
                LayerKind::Conv2d { out_channels, .. } => out_channels,
                LayerKind::Dense { out_features, .. } => out_features,
                _ => continue,
            };
            maskable.push((layer.spec.id.clone(), units));
            // Walk forward through a single-consumer chain of batchnorms; if
            // it ends at a relu, that relu is the capture point.
            let mut point = i;
            let mut cur = i;
            loop {
                if consumers[cur].len() != 1 {
                    break;
                }
                let next = consumers[cur][0];
                match layers[next].spec.kind {
                    LayerKind::Batchnorm { .. } => {
                        cur = next;
                    }
                    LayerKind::Relu => {
                        point = next;
                        break;
                    }
                    _ => break,
                }
            }
            if capture_owner.insert(point, i).is_some() {
                return Err(Error::validation(format!(
                    "layer `{}` is the capture point of two maskable layers",
                    layers[point].spec.id
                )));
            }
            capture_point.insert(i, point);
        }

        Ok(ModelGraph {
            input_shape,
            layers,
            id_to_index,
            topo_order,
            output_layer,
            output_shapes,
            capture_owner,
            capture_point,
            maskable,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.id_to_index.get(id).map(|&i| &self.layers[i])
    }

    /// Evaluation order as layer indices.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    pub fn output_shape(&self, id: &str) -> Option<&[usize]> {
        self.id_to_index
            .get(id)
            .map(|&i| self.output_shapes[i].as_slice())
    }

    /// Maskable layer ids with unit counts, in declaration order.
    pub fn maskable_layers(&self) -> &[(String, usize)] {
        &self.maskable
    }

    /// Unit count of a maskable layer, `None` for other ids.
    pub fn unit_count(&self, layer_id: &str) -> Option<usize> {
        self.maskable
            .iter()
            .find(|(id, _)| id == layer_id)
            .map(|&(_, n)| n)
    }

    /// Id of the layer whose output is `layer_id`'s capture point.
    pub fn capture_point_of(&self, layer_id: &str) -> Option<&str> {
        let idx = *self.id_to_index.get(layer_id)?;
        let point = *self.capture_point.get(&idx)?;
        Some(self.layers[point].spec.id.as_str())
    }

    /// Every unit of the model in (declaration order, ascending index) order.
    pub fn all_units(&self) -> Vec<UnitId> {
        let mut out = Vec::new();
        for (layer, count) in &self.maskable {
            for index in 0..*count {
                out.push(UnitId::new(layer.clone(), index));
            }
        }
        out
    }

    /// Topological evaluation of the DAG with ablation masks applied at each
    /// maskable layer's capture point.
    pub fn forward(
        &self,
        image: &Tensor,
        mask: &AblationMask,
        taps: &BTreeSet<String>,
    ) -> Result<ForwardResult> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::validation(format!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                self.input_shape
            )));
        }
        mask.validate(self)?;
        for tap in taps {
            if self.unit_count(tap).is_none() {
                return Err(Error::validation(format!(
                    "tap `{tap}` is not a maskable layer"
                )));
            }
        }

        let mut outputs: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        let mut tapped = BTreeMap::new();
        for &i in &self.topo_order {
            let layer = &self.layers[i];
            let fetch = |id: &String| -> &Tensor {
                if id == INPUT_ID {
                    image
                } else {
                    outputs[self.id_to_index[id]]
                        .as_ref()
                        .expect("topological order guarantees inputs are ready")
                }
            };
            let mut value = eval_layer(layer, &layer.spec.inputs.iter().map(fetch).collect::<Vec<_>>())
                .map_err(|e| e.in_layer(&layer.spec.id))?;

            if let Some(&owner) = self.capture_owner.get(&i) {
                let owner_id = &self.layers[owner].spec.id;
                apply_mask_in_place(&mut value, owner_id, mask)?;
                if taps.contains(owner_id) {
                    tapped.insert(owner_id.clone(), value.clone());
                }
            }
            outputs[i] = Some(value);
        }

        let output = outputs[self.output_layer]
            .take()
            .expect("output layer evaluated");
        Ok(ForwardResult {
            output,
            taps: tapped,
        })
    }
}

fn infer_shape(layer: &Layer, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let id = &layer.spec.id;
    let fail = |msg: String| Err(Error::Shape {
        layer: Some(id.clone()),
        message: msg,
    });
    match &layer.spec.kind {
        LayerKind::Conv2d {
            out_channels,
            in_channels,
            kernel,
            stride,
            padding,
        } => {
            let shape = inputs[0];
            if shape.len() != 3 {
                return fail(format!("conv2d input must be [ch, y, x], got {shape:?}"));
            }
            if shape[0] != *in_channels {
                return fail(format!(
                    "conv2d declares {in_channels} input channels, input has {}",
                    shape[0]
                ));
            }
            if *stride == 0 {
                return fail("conv2d stride must be >= 1".into());
            }
            let (ky, kx) = (kernel[0], kernel[1]);
            if ky > shape[1] + 2 * padding || kx > shape[2] + 2 * padding {
                return fail(format!(
                    "kernel {ky}x{kx} larger than padded input {}x{}",
                    shape[1] + 2 * padding,
                    shape[2] + 2 * padding
                ));
            }
            match &layer.params {
                LayerParams::Conv { weight, bias } => {
                    let want = [*out_channels, *in_channels, ky, kx];
                    if weight.shape() != want {
                        return fail(format!(
                            "conv2d weight shape {:?} != declared {want:?}",
                            weight.shape()
                        ));
                    }
                    if bias.len() != *out_channels {
                        return fail(format!(
                            "conv2d bias length {} != out channels {out_channels}",
                            bias.len()
                        ));
                    }
                }
                _ => return fail("conv2d layer is missing conv parameters".into()),
            }
            Ok(vec![
                *out_channels,
                (shape[1] + 2 * padding - ky) / stride + 1,
                (shape[2] + 2 * padding - kx) / stride + 1,
            ])
        }
        LayerKind::Dense {
            out_features,
            in_features,
        } => {
            let shape = inputs[0];
            if shape.len() != 1 {
                return fail(format!("dense input must be a vector, got {shape:?}"));
            }
            if shape[0] != *in_features {
                return fail(format!(
                    "dense declares {in_features} inputs, input has {}",
                    shape[0]
                ));
            }
            match &layer.params {
                LayerParams::Dense { weight, bias } => {
                    if weight.shape() != [*out_features, *in_features] {
                        return fail(format!(
                            "dense weight shape {:?} != declared [{out_features}, {in_features}]",
                            weight.shape()
                        ));
                    }
                    if bias.len() != *out_features {
                        return fail(format!(
                            "dense bias length {} != out features {out_features}",
                            bias.len()
                        ));
                    }
                }
                _ => return fail("dense layer is missing dense parameters".into()),
            }
            Ok(vec![*out_features])
        }
        LayerKind::Relu => Ok(inputs[0].to_vec()),
        LayerKind::Maxpool2d { window, stride } => {
            let shape = inputs[0];
            if shape.len() != 3 {
                return fail(format!("maxpool2d input must be [ch, y, x], got {shape:?}"));
            }
            if *window == 0 || *stride == 0 {
                return fail("maxpool2d window and stride must be >= 1".into());
            }
            if *window > shape[1] || *window > shape[2] {
                return fail(format!(
                    "window {window} larger than input {}x{}",
                    shape[1], shape[2]
                ));
            }
            Ok(vec![
                shape[0],
                (shape[1] - window) / stride + 1,
                (shape[2] - window) / stride + 1,
            ])
        }
        LayerKind::Batchnorm { epsilon } => {
            let shape = inputs[0];
            if !(*epsilon > 0.0) {
                return fail(format!("batchnorm epsilon must be > 0, got {epsilon}"));
            }
            match &layer.params {
                LayerParams::Batchnorm {
                    gamma,
                    beta,
                    mean,
                    variance,
                } => {
                    let ch = shape[0];
                    for (name, v) in [
                        ("gamma", gamma),
                        ("beta", beta),
                        ("mean", mean),
                        ("variance", variance),
                    ] {
                        if v.len() != ch {
                            return fail(format!(
                                "batchnorm {name} length {} != channel count {ch}",
                                v.len()
                            ));
                        }
                    }
                    if variance.iter().any(|&v| v < 0.0) {
                        return fail("batchnorm variance must be >= 0".into());
                    }
                }
                _ => return fail("batchnorm layer is missing parameters".into()),
            }
            Ok(shape.to_vec())
        }
        LayerKind::ResidualAdd => {
            if inputs[0] != inputs[1] {
                return fail(format!(
                    "residual_add inputs differ: {:?} vs {:?}",
                    inputs[0], inputs[1]
                ));
            }
            Ok(inputs[0].to_vec())
        }
        LayerKind::Flatten => Ok(vec![inputs[0].iter().product()]),
        LayerKind::Softmax => {
            let shape = inputs[0];
            if shape.len() != 1 {
                return fail(format!("softmax input must be a vector, got {shape:?}"));
            }
            Ok(shape.to_vec())
        }
    }
}

fn eval_layer(layer: &Layer, inputs: &[&Tensor]) -> Result<Tensor> {
    match (&layer.spec.kind, &layer.params) {
        (
            LayerKind::Conv2d { stride, padding, .. },
            LayerParams::Conv { weight, bias },
        ) => tensor::conv2d(inputs[0], weight, bias, *stride, *padding),
        (LayerKind::Dense { .. }, LayerParams::Dense { weight, bias }) => {
            tensor::dense(inputs[0], weight, bias)
        }
        (LayerKind::Relu, _) => Ok(tensor::relu(inputs[0])),
        (LayerKind::Maxpool2d { window, stride }, _) => {
            tensor::maxpool2d(inputs[0], *window, *stride)
        }
        (
            LayerKind::Batchnorm { epsilon },
            LayerParams::Batchnorm {
                gamma,
                beta,
                mean,
                variance,
            },
        ) => tensor::batchnorm_infer(inputs[0], gamma, beta, mean, variance, *epsilon),
        (LayerKind::ResidualAdd, _) => tensor::residual_add(inputs[0], inputs[1]),
        (LayerKind::Flatten, _) => Ok(inputs[0].flattened()),
        (LayerKind::Softmax, _) => tensor::softmax_tensor(inputs[0]),
        _ => Err(Error::validation(format!(
            "layer `{}` has parameters inconsistent with its kind",
            layer.spec.id
        ))),
    }
}
