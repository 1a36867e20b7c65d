//! Bit-exact persistence for models and datasets.
//!
//! Model directory layout:
//! - `manifest.json`: format version, input shape, layer specs, and tensor
//!   descriptors (name, dims, byte offset into the weights blob).
//! - `weights.bin`: raw little-endian `f32`, tensors concatenated in
//!   manifest order (conv dims `[out, in, ky, kx]`, dense `[out, in]`).
//! - `checksum.txt`: hex SHA-256 of `weights.bin`.
//!
//! Dataset directory layout:
//! - `index.json`: shape, class names, counts.
//! - `images.bin`: `u8`, `[n, ch, y, x]` row-major.
//! - `labels.bin`: `u16` little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerKind, LayerParams, LayerSpec, ModelGraph};
use crate::tensor::Tensor;

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

// ---------------------------------------------------------------------------
// Model persistence
// ---------------------------------------------------------------------------

/// Location and dims of one tensor inside the weights blob.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorDesc {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorDesc>,
}

fn layer_tensors(layer: &Layer) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let id = &layer.spec.id;
    match &layer.params {
        LayerParams::Conv { weight, bias } | LayerParams::Dense { weight, bias } => vec![
            (
                format!("{id}.weight"),
                weight.shape().to_vec(),
                weight.data().to_vec(),
            ),
            (format!("{id}.bias"), vec![bias.len()], bias.clone()),
        ],
        LayerParams::Batchnorm {
            gamma,
            beta,
            mean,
            variance,
        } => vec![
            (format!("{id}.gamma"), vec![gamma.len()], gamma.clone()),
            (format!("{id}.beta"), vec![beta.len()], beta.clone()),
            (format!("{id}.mean"), vec![mean.len()], mean.clone()),
            (
                format!("{id}.variance"),
                vec![variance.len()],
                variance.clone(),
            ),
        ],
        LayerParams::None => Vec::new(),
    }
}

/// Serialize a model to a directory. Round-trips bit-identically.
pub fn save_model(model: &ModelGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for layer in model.layers() {
        for (name, dims, data) in layer_tensors(layer) {
            tensors.push(TensorDesc {
                name,
                dims,
                offset: blob.len() as u64,
            });
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        input_shape: model.input_shape().to_vec(),
        layers: model.layers().iter().map(|l| l.spec.clone()).collect(),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    fs::write(dir.join("weights.bin"), &blob)?;
    fs::write(dir.join("checksum.txt"), sha256_hex(&blob))?;
    Ok(())
}

/// Load a model directory, verifying version, blob tiling, and checksum
/// before constructing anything.
pub fn load_model(dir: &Path) -> Result<ModelGraph> {
    let manifest: ModelManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: MODEL_FORMAT_VERSION,
            found: manifest.format_version,
        });
    }

    // Descriptors must tile the blob: ascending, non-overlapping, exact.
    let mut expected: u64 = 0;
    for desc in &manifest.tensors {
        if desc.offset != expected {
            return Err(Error::SizeMismatch(format!(
                "tensor `{}` at offset {}, expected {expected}",
                desc.name, desc.offset
            )));
        }
        let elems: usize = desc.dims.iter().product();
        expected += 4 * elems as u64;
    }

    let blob = fs::read(dir.join("weights.bin"))?;
    let found = blob.len() as u64;
    if found < expected {
        return Err(Error::TruncatedBlob { expected, found });
    }
    if found > expected {
        return Err(Error::SizeMismatch(format!(
            "weights blob has {found} bytes, manifest describes {expected}"
        )));
    }

    let recorded = fs::read_to_string(dir.join("checksum.txt"))?
        .trim()
        .to_string();
    let computed = sha256_hex(&blob);
    if recorded != computed {
        return Err(Error::ChecksumMismatch { recorded, computed });
    }

    // Slice tensors back out in manifest order.
    let mut values: std::collections::HashMap<&str, (Vec<usize>, Vec<f32>)> =
        std::collections::HashMap::new();
    for desc in &manifest.tensors {
        let elems: usize = desc.dims.iter().product();
        let start = desc.offset as usize;
        let mut data = Vec::with_capacity(elems);
        for k in 0..elems {
            let b = &blob[start + 4 * k..start + 4 * k + 4];
            data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        values.insert(desc.name.as_str(), (desc.dims.clone(), data));
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for spec in &manifest.layers {
        let mut take = |suffix: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            let key = format!("{}.{suffix}", spec.id);
            values
                .remove(key.as_str())
                .ok_or_else(|| Error::SizeMismatch(format!("manifest lacks tensor `{key}`")))
        };
        let params = match spec.kind {
            LayerKind::Conv2d { .. } => {
                let (dims, data) = take("weight")?;
                let (_, bias) = take("bias")?;
                LayerParams::Conv {
                    weight: Tensor::new(dims, data)?,
                    bias,
                }
            }
            LayerKind::Dense { .. } => {
                let (dims, data) = take("weight")?;
                let (_, bias) = take("bias")?;
                LayerParams::Dense {
                    weight: Tensor::new(dims, data)?,
                    bias,
                }
            }
            LayerKind::Batchnorm { .. } => LayerParams::Batchnorm {
                gamma: take("gamma")?.1,
                beta: take("beta")?.1,
                mean: take("mean")?.1,
                variance: take("variance")?.1,
            },
            _ => LayerParams::None,
        };
        layers.push(Layer {
            spec: spec.clone(),
            params,
        });
    }

    ModelGraph::new(manifest.input_shape, layers)
}

/// Hex SHA-256 of a stored model's weights blob (reads `checksum.txt`).
pub fn model_checksum(dir: &Path) -> Result<String> {
    Ok(fs::read_to_string(dir.join("checksum.txt"))?.trim().to_string())
}

/// Checksum of an in-memory model's weight bytes.
pub fn model_checksum_in_memory(model: &ModelGraph) -> String {
    let mut blob: Vec<u8> = Vec::new();
    for layer in model.layers() {
        for (_, _, data) in layer_tensors(layer) {
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    sha256_hex(&blob)
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Labeled image set: `u8` pixels in `[n, ch, y, x]` row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    images: Vec<u8>,
    labels: Vec<u16>,
    class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    format_version: u32,
    shape: [usize; 3],
    n_images: usize,
    n_classes: usize,
    class_names: Vec<String>,
    per_class_counts: Vec<usize>,
}

impl Dataset {
    pub fn new(
        shape: [usize; 3],
        images: Vec<u8>,
        labels: Vec<u16>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let per_image: usize = shape.iter().product();
        if labels.is_empty() {
            return Err(Error::validation("dataset must contain at least one image"));
        }
        if images.len() != per_image * labels.len() {
            return Err(Error::validation(format!(
                "image blob has {} bytes, {} labels x {per_image} bytes expected",
                images.len(),
                labels.len()
            )));
        }
        let n_classes = class_names.len();
        if n_classes == 0 {
            return Err(Error::validation("dataset needs at least one class name"));
        }
        if let Some(bad) = labels.iter().find(|&&l| (l as usize) >= n_classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Dataset {
            shape,
            images,
            labels,
            class_names,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn n_images(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, image: usize) -> u16 {
        self.labels[image]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_name(&self, class: u16) -> &str {
        &self.class_names[class as usize]
    }

    /// Resolve a class given either its name or its decimal index.
    pub fn resolve_class(&self, name_or_index: &str) -> Result<u16> {
        if let Some(i) = self.class_names.iter().position(|n| n == name_or_index) {
            return Ok(i as u16);
        }
        if let Ok(i) = name_or_index.parse::<u16>() {
            if (i as usize) < self.n_classes() {
                return Ok(i);
            }
        }
        Err(Error::validation(format!(
            "unknown class `{name_or_index}` (classes: {:?})",
            self.class_names
        )))
    }

    pub fn image_bytes(&self, image: usize) -> &[u8] {
        let per_image: usize = self.shape.iter().product();
        &self.images[image * per_image..(image + 1) * per_image]
    }

    /// Image as a `[ch, y, x]` tensor with pixels scaled to `[0, 1]`.
    pub fn image_tensor(&self, image: usize) -> Tensor {
        let data = self
            .image_bytes(image)
            .iter()
            .map(|&b| f32::from(b) / 255.0)
            .collect();
        Tensor::new(self.shape.to_vec(), data).expect("dataset invariant")
    }

    /// Row indices belonging to one class, ascending.
    pub fn class_rows(&self, class: u16) -> Vec<usize> {
        (0..self.n_images())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Hex SHA-256 over image and label bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(&self.images);
        for l in &self.labels {
            hasher.update(l.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let index = DatasetIndex {
            format_version: DATASET_FORMAT_VERSION,
            shape: self.shape,
            n_images: self.n_images(),
            n_classes: self.n_classes(),
            class_names: self.class_names.clone(),
            per_class_counts: self.per_class_counts(),
        };
        fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        fs::write(dir.join("images.bin"), &self.images)?;
        let mut labels = Vec::with_capacity(self.labels.len() * 2);
        for l in &self.labels {
            labels.extend_from_slice(&l.to_le_bytes());
        }
        fs::write(dir.join("labels.bin"), labels)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: DatasetIndex = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
        if index.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: DATASET_FORMAT_VERSION,
                found: index.format_version,
            });
        }
        let images = fs::read(dir.join("images.bin"))?;
        let per_image: usize = index.shape.iter().product();
        let expected = (per_image * index.n_images) as u64;
        if (images.len() as u64) < expected {
            return Err(Error::TruncatedBlob {
                expected,
                found: images.len() as u64,
            });
        }
        if images.len() as u64 > expected {
            return Err(Error::SizeMismatch(format!(
                "images.bin has {} bytes, index describes {expected}",
                images.len()
            )));
        }
        let label_bytes = fs::read(dir.join("labels.bin"))?;
        if label_bytes.len() != 2 * index.n_images {
            return Err(Error::SizeMismatch(format!(
                "labels.bin has {} bytes, expected {}",
                label_bytes.len(),
                2 * index.n_images
            )));
        }
        let labels: Vec<u16> = label_bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Dataset::new(index.shape, images, labels, index.class_names)
    }
}
