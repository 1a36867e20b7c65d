//! Activation capture, per-unit selectivity/magnitude statistics, and the
//! equal-count grid partition of each layer's activation space.
//!
//! Selectivity is the difference between a unit's mean activation on
//! target-class images and the unweighted mean of its per-class means over
//! the comparison classes. Magnitude is the orthogonal rotated coordinate
//! `(a_target + a_other) / 2` by default, or the literal all-image mean in
//! `global_mean` mode. Each layer's units are cut into S strips along
//! selectivity, then each strip into M bands along magnitude, every cut
//! equal-count with the first remainder strips/bands taking the extra unit.

use std::collections::BTreeSet;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AblationMask, ModelGraph, UnitId};
use crate::rng;
use crate::store::Dataset;

/// Per-image, per-unit scalar activations for every maskable unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    /// `[n_images x n_units]` row-major.
    values: Vec<f32>,
    units: Vec<UnitId>,
    /// Contiguous column span of each layer, in model declaration order.
    layer_spans: Vec<(String, Range<usize>)>,
    /// Row map: (image id, label).
    images: Vec<(usize, u16)>,
    n_classes: usize,
    class_names: Vec<String>,
}

impl ActivationMatrix {
    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
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
            if (i as usize) < self.n_classes {
                return Ok(i);
            }
        }
        Err(Error::validation(format!(
            "unknown class `{name_or_index}` (classes: {:?})",
            self.class_names
        )))
    }

    pub fn units(&self) -> &[UnitId] {
        &self.units
    }

    pub fn images(&self) -> &[(usize, u16)] {
        &self.images
    }

    pub fn labels(&self) -> Vec<u16> {
        self.images.iter().map(|&(_, l)| l).collect()
    }

    pub fn layer_spans(&self) -> &[(String, Range<usize>)] {
        &self.layer_spans
    }

    pub fn row(&self, image: usize) -> &[f32] {
        let u = self.n_units();
        &self.values[image * u..(image + 1) * u]
    }

    pub fn value(&self, image: usize, unit: usize) -> f32 {
        self.values[image * self.n_units() + unit]
    }

    /// Column index of a unit id.
    pub fn column_of(&self, unit: &UnitId) -> Option<usize> {
        let span = self
            .layer_spans
            .iter()
            .find(|(l, _)| *l == unit.layer)?
            .1
            .clone();
        let col = span.start + unit.index;
        if col < span.end {
            Some(col)
        } else {
            None
        }
    }

    /// Bare single-layer matrix for tests.
    #[cfg(test)]
    pub(crate) fn test_fixture(
        values: Vec<f32>,
        n_units: usize,
        labels: Vec<u16>,
        n_classes: usize,
    ) -> Self {
        ActivationMatrix {
            values,
            units: (0..n_units).map(|i| UnitId::new("l", i)).collect(),
            layer_spans: vec![("l".to_string(), 0..n_units)],
            images: labels.iter().enumerate().map(|(i, &l)| (i, l)).collect(),
            n_classes,
            class_names: (0..n_classes).map(|c| format!("class_{c:02}")).collect(),
        }
    }

    /// Write `activations.bin` (f32 LE row-major) plus `units.json` and
    /// `images.json` sidecars.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join("activations.bin"), blob)?;
        let units: Vec<serde_json::Value> = self
            .units
            .iter()
            .map(|u| serde_json::json!({ "layer": u.layer, "index": u.index }))
            .collect();
        fs::write(
            dir.join("units.json"),
            serde_json::to_vec_pretty(&units)?,
        )?;
        let images: Vec<serde_json::Value> = self
            .images
            .iter()
            .map(|(id, label)| serde_json::json!({ "image": id, "label": label }))
            .collect();
        let doc = serde_json::json!({
            "n_classes": self.n_classes,
            "class_names": self.class_names,
            "rows": images,
        });
        fs::write(dir.join("images.json"), serde_json::to_vec_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct UnitRow {
            layer: String,
            index: usize,
        }
        #[derive(Deserialize)]
        struct ImageRow {
            image: usize,
            label: u16,
        }
        #[derive(Deserialize)]
        struct ImagesDoc {
            n_classes: usize,
            #[serde(default)]
            class_names: Vec<String>,
            rows: Vec<ImageRow>,
        }
        let unit_rows: Vec<UnitRow> =
            serde_json::from_slice(&fs::read(dir.join("units.json"))?)?;
        let images_doc: ImagesDoc =
            serde_json::from_slice(&fs::read(dir.join("images.json"))?)?;
        let blob = fs::read(dir.join("activations.bin"))?;
        let expected = (unit_rows.len() * images_doc.rows.len() * 4) as u64;
        if (blob.len() as u64) < expected {
            return Err(Error::TruncatedBlob {
                expected,
                found: blob.len() as u64,
            });
        }
        if blob.len() as u64 > expected {
            return Err(Error::SizeMismatch(format!(
                "activations.bin has {} bytes, sidecars describe {expected}",
                blob.len()
            )));
        }
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let mut layer_spans: Vec<(String, Range<usize>)> = Vec::new();
        let mut units = Vec::with_capacity(unit_rows.len());
        for (col, row) in unit_rows.iter().enumerate() {
            match layer_spans.last_mut() {
                Some((layer, span)) if *layer == row.layer => {
                    if row.index != span.len() {
                        return Err(Error::validation(format!(
                            "units.json column {col}: expected index {} for layer `{}`",
                            span.len(),
                            row.layer
                        )));
                    }
                    span.end = col + 1;
                }
                _ => {
                    if layer_spans.iter().any(|(l, _)| *l == row.layer) {
                        return Err(Error::validation(format!(
                            "units.json: layer `{}` columns are not contiguous",
                            row.layer
                        )));
                    }
                    if row.index != 0 {
                        return Err(Error::validation(format!(
                            "units.json: layer `{}` does not start at index 0",
                            row.layer
                        )));
                    }
                    layer_spans.push((row.layer.clone(), col..col + 1));
                }
            }
            units.push(UnitId::new(row.layer.clone(), row.index));
        }
        let class_names = if images_doc.class_names.len() == images_doc.n_classes {
            images_doc.class_names
        } else {
            (0..images_doc.n_classes)
                .map(|c| format!("class_{c:02}"))
                .collect()
        };
        Ok(ActivationMatrix {
            values,
            units,
            layer_spans,
            images: images_doc.rows.iter().map(|r| (r.image, r.label)).collect(),
            n_classes: images_doc.n_classes,
            class_names,
        })
    }
}

/// Forward every image (optionally under a mask) and record one scalar per
/// maskable unit: the spatial mean of a conv channel's post-nonlinearity
/// map, or a dense neuron's post-nonlinearity value. Parallel per image.
pub fn capture_activations(
    model: &ModelGraph,
    dataset: &Dataset,
    mask: &AblationMask,
) -> Result<ActivationMatrix> {
    let [ch, h, w] = dataset.shape();
    if model.input_shape() != [ch, h, w] {
        return Err(Error::validation(format!(
            "dataset images {:?} do not match model input {:?}",
            [ch, h, w],
            model.input_shape()
        )));
    }
    mask.validate(model)?;

    let maskable = model.maskable_layers().to_vec();
    let mut units = Vec::new();
    let mut layer_spans = Vec::new();
    for (layer, count) in &maskable {
        let start = units.len();
        for index in 0..*count {
            units.push(UnitId::new(layer.clone(), index));
        }
        layer_spans.push((layer.clone(), start..units.len()));
    }
    let n_units = units.len();
    let taps: BTreeSet<String> = maskable.iter().map(|(l, _)| l.clone()).collect();

    let n = dataset.n_images();
    let mut values = vec![0.0f32; n * n_units];
    values
        .par_chunks_mut(n_units)
        .enumerate()
        .try_for_each(|(i, row)| -> Result<()> {
            let image = dataset.image_tensor(i);
            let result = model.forward(&image, mask, &taps)?;
            let mut col = 0usize;
            for (layer, count) in &maskable {
                let tap = &result.taps[layer];
                match tap.shape().len() {
                    3 => {
                        let span = tap.shape()[1] * tap.shape()[2];
                        for c in 0..*count {
                            let mut acc = 0.0f64;
                            for &v in &tap.data()[c * span..(c + 1) * span] {
                                acc += f64::from(v);
                            }
                            row[col] = (acc / span as f64) as f32;
                            col += 1;
                        }
                    }
                    _ => {
                        for c in 0..*count {
                            row[col] = tap.data()[c];
                            col += 1;
                        }
                    }
                }
            }
            Ok(())
        })?;

    Ok(ActivationMatrix {
        values,
        units,
        layer_spans,
        images: (0..n).map(|i| (i, dataset.label(i))).collect(),
        n_classes: dataset.n_classes(),
        class_names: dataset.class_names().to_vec(),
    })
}

/// How the magnitude coordinate is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeMode {
    /// `(a_target + a_other) / 2`, the rotated coordinate.
    Rotated,
    /// Mean activation over all images.
    GlobalMean,
}

impl std::str::FromStr for MagnitudeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotated" => Ok(MagnitudeMode::Rotated),
            "global_mean" => Ok(MagnitudeMode::GlobalMean),
            other => Err(Error::validation(format!(
                "unknown magnitude mode `{other}` (expected `rotated` or `global_mean`)"
            ))),
        }
    }
}

/// Which non-target classes enter the `a_other` average.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComparisonClasses {
    AllOthers,
    /// Seeded random subset of the given size.
    Subsample(usize),
}

/// Per-unit activation statistics in selectivity/magnitude space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnitStats {
    pub unit: UnitId,
    pub a_target: f64,
    pub a_other: f64,
    pub selectivity: f64,
    pub magnitude: f64,
}

/// Statistics plus the comparison classes that were actually used.
#[derive(Clone, Debug)]
pub struct UnitStatsResult {
    pub stats: Vec<UnitStats>,
    pub comparison_classes: Vec<u16>,
}

/// Compute per-unit stats for one target class.
///
/// `a_target` is the mean over target rows; `a_other` is the unweighted mean
/// of per-class means over the comparison classes. All accumulation is 64-bit
/// in ascending row order.
pub fn unit_stats(
    acts: &ActivationMatrix,
    target: u16,
    comparison: ComparisonClasses,
    seed: u64,
    mode: MagnitudeMode,
) -> Result<UnitStatsResult> {
    let n_classes = acts.n_classes();
    if (target as usize) >= n_classes {
        return Err(Error::validation(format!(
            "target class {target} out of range ({n_classes} classes)"
        )));
    }
    let mut class_counts = vec![0usize; n_classes];
    for &(_, label) in acts.images() {
        class_counts[label as usize] += 1;
    }
    if class_counts[target as usize] == 0 {
        return Err(Error::validation(format!(
            "target class {target} has zero images"
        )));
    }

    let comparison_classes: Vec<u16> = match comparison {
        ComparisonClasses::AllOthers => (0..n_classes as u16).filter(|&c| c != target).collect(),
        ComparisonClasses::Subsample(k) => {
            let mut others: Vec<u16> =
                (0..n_classes as u16).filter(|&c| c != target).collect();
            if k == 0 || k > others.len() {
                return Err(Error::validation(format!(
                    "comparison subsample {k} outside [1, {}]",
                    others.len()
                )));
            }
            others.shuffle(&mut rng::stream(seed, "comparison", &target.to_string()));
            let mut picked: Vec<u16> = others.into_iter().take(k).collect();
            picked.sort_unstable();
            picked
        }
    };
    if comparison_classes.is_empty() {
        return Err(Error::validation("no comparison classes available"));
    }
    for &c in &comparison_classes {
        if class_counts[c as usize] == 0 {
            return Err(Error::validation(format!(
                "comparison class {c} has zero images"
            )));
        }
    }

    // Per-class per-unit sums, fixed row order.
    let n_units = acts.n_units();
    let mut sums = vec![0.0f64; n_classes * n_units];
    for (row_idx, &(_, label)) in acts.images().iter().enumerate() {
        let row = acts.row(row_idx);
        let base = label as usize * n_units;
        for (u, &v) in row.iter().enumerate() {
            sums[base + u] += f64::from(v);
        }
    }

    let total_rows = acts.n_images();
    let stats = (0..n_units)
        .map(|u| {
            let a_target = sums[target as usize * n_units + u] / class_counts[target as usize] as f64;
            let mut acc = 0.0f64;
            for &c in &comparison_classes {
                acc += sums[c as usize * n_units + u] / class_counts[c as usize] as f64;
            }
            let a_other = acc / comparison_classes.len() as f64;
            let selectivity = a_target - a_other + 0.0;
            let magnitude = match mode {
                MagnitudeMode::Rotated => (a_target + a_other) / 2.0,
                MagnitudeMode::GlobalMean => {
                    let mut total = 0.0f64;
                    for c in 0..n_classes {
                        total += sums[c * n_units + u];
                    }
                    total / total_rows as f64
                }
            };
            UnitStats {
                unit: acts.units()[u].clone(),
                a_target,
                a_other,
                selectivity,
                magnitude,
            }
        })
        .collect();

    Ok(UnitStatsResult {
        stats,
        comparison_classes,
    })
}

/// One unit's grid assignment inside a layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnitAssignment {
    pub index: usize,
    pub a_target: f64,
    pub a_other: f64,
    pub selectivity: f64,
    pub magnitude: f64,
    /// 0 = most selective against the target, S-1 = most selective for it.
    pub strip: usize,
    /// 0 = lowest magnitude within the strip, M-1 = highest.
    pub band: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerAtlas {
    pub layer: String,
    pub units: Vec<UnitAssignment>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkippedLayer {
    pub layer: String,
    pub n_units: usize,
    pub reason: String,
}

/// Per-layer assignment of every unit to one of S x M equal-count cells.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridAtlas {
    pub target_class: u16,
    pub target_name: String,
    pub s_strips: usize,
    pub m_bands: usize,
    pub magnitude_mode: MagnitudeMode,
    pub comparison_classes: Vec<u16>,
    pub layers: Vec<LayerAtlas>,
    pub skipped: Vec<SkippedLayer>,
}

impl GridAtlas {
    /// Layers that received a grid, in declaration order.
    pub fn eligible_layers(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.layer.as_str()).collect()
    }

    /// Units assigned to one cell, ascending index.
    pub fn cell_members(&self, layer: &str, strip: usize, band: usize) -> Vec<UnitId> {
        self.layers
            .iter()
            .find(|l| l.layer == layer)
            .map(|l| {
                l.units
                    .iter()
                    .filter(|u| u.strip == strip && u.band == band)
                    .map(|u| UnitId::new(layer.to_string(), u.index))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn mask_for_cell(&self, layer: &str, strip: usize, band: usize) -> AblationMask {
        AblationMask::from_units(self.cell_members(layer, strip, band))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Equal-count cut positions: `n` items into `parts` contiguous runs, the
/// first `n % parts` runs one longer.
fn cut_sizes(n: usize, parts: usize) -> Vec<usize> {
    let base = n / parts;
    let rem = n % parts;
    (0..parts).map(|i| base + usize::from(i < rem)).collect()
}

/// Sort-and-cut partition of one layer's stats into S x M cells.
///
/// Units are sorted ascending by `(selectivity, index)` and cut into S
/// strips; each strip is sorted ascending by `(magnitude, index)` and cut
/// into M bands. Ties break on the stable unit index, so assignments are
/// invariant to input order and to strictly increasing transforms of either
/// axis.
pub fn partition_layer(stats: &[&UnitStats], s: usize, m: usize) -> Vec<UnitAssignment> {
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| {
        stats[a]
            .selectivity
            .total_cmp(&stats[b].selectivity)
            .then(stats[a].unit.index.cmp(&stats[b].unit.index))
    });

    let mut assignments: Vec<UnitAssignment> = Vec::with_capacity(stats.len());
    let mut cursor = 0usize;
    for (strip, strip_size) in cut_sizes(stats.len(), s).into_iter().enumerate() {
        let mut strip_members: Vec<usize> = order[cursor..cursor + strip_size].to_vec();
        cursor += strip_size;
        strip_members.sort_by(|&a, &b| {
            stats[a]
                .magnitude
                .total_cmp(&stats[b].magnitude)
                .then(stats[a].unit.index.cmp(&stats[b].unit.index))
        });
        let mut band_cursor = 0usize;
        for (band, band_size) in cut_sizes(strip_size, m).into_iter().enumerate() {
            for &k in &strip_members[band_cursor..band_cursor + band_size] {
                let st = stats[k];
                assignments.push(UnitAssignment {
                    index: st.unit.index,
                    a_target: st.a_target,
                    a_other: st.a_other,
                    selectivity: st.selectivity,
                    magnitude: st.magnitude,
                    strip,
                    band,
                });
            }
            band_cursor += band_size;
        }
    }
    assignments.sort_by_key(|a| a.index);
    assignments
}

/// Partition every layer with at least S*M units; smaller layers are skipped
/// with a recorded warning.
pub fn partition_grid(stats: &[UnitStats], s: usize, m: usize) -> Result<(Vec<LayerAtlas>, Vec<SkippedLayer>)> {
    if s == 0 || m == 0 {
        return Err(Error::validation("grid dims must be >= 1"));
    }
    // Group by layer in first-appearance order.
    let mut layer_order: Vec<&str> = Vec::new();
    for st in stats {
        if layer_order.last() != Some(&st.unit.layer.as_str())
            && !layer_order.contains(&st.unit.layer.as_str())
        {
            layer_order.push(&st.unit.layer);
        }
    }

    let mut layers = Vec::new();
    let mut skipped = Vec::new();
    for layer in layer_order {
        let members: Vec<&UnitStats> = stats.iter().filter(|st| st.unit.layer == layer).collect();
        if members.len() < s * m {
            log::warn!(
                "layer `{layer}` has {} units, fewer than {} cells; skipped",
                members.len(),
                s * m
            );
            skipped.push(SkippedLayer {
                layer: layer.to_string(),
                n_units: members.len(),
                reason: format!("{} units < {} cells", members.len(), s * m),
            });
            continue;
        }
        layers.push(LayerAtlas {
            layer: layer.to_string(),
            units: partition_layer(&members, s, m),
        });
    }
    Ok((layers, skipped))
}

/// Stats plus partition for one target class, bundled for serialization.
#[allow(clippy::too_many_arguments)]
pub fn build_atlas(
    acts: &ActivationMatrix,
    target: u16,
    target_name: &str,
    comparison: ComparisonClasses,
    seed: u64,
    mode: MagnitudeMode,
    s: usize,
    m: usize,
) -> Result<GridAtlas> {
    let result = unit_stats(acts, target, comparison, seed, mode)?;
    let (layers, skipped) = partition_grid(&result.stats, s, m)?;
    Ok(GridAtlas {
        target_class: target,
        target_name: target_name.to_string(),
        s_strips: s,
        m_bands: m,
        magnitude_mode: mode,
        comparison_classes: result.comparison_classes,
        layers,
        skipped,
    })
}
