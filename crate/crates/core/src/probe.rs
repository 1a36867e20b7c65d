//! Linear probes, softmax class ranks, and per-cell ablation rank deficits.
//!
//! Rank 1 is the most likely class; ties yield to the lower class index.
//! A cell's rank-deficit score is the mean over target-class images of
//! (ablated rank - baseline rank). Probes are multinomial logistic
//! regressions trained full-batch in f64 on a seeded stratified split that is
//! shared by every cell of a run; the reported probe score is target-class
//! recall on the held-out rows.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{ActivationMatrix, GridAtlas};
use crate::error::{Error, Result};
use crate::graph::{AblationMask, ModelGraph};
use crate::rng;
use crate::store::Dataset;
use crate::tensor::softmax;

/// Rank of `class` in a softmax output: 1 plus the number of classes with
/// strictly greater probability plus the number of equal-probability classes
/// with a smaller index.
pub fn class_rank(probs: &[f32], class: usize) -> Result<u32> {
    if class >= probs.len() {
        return Err(Error::validation(format!(
            "class {class} out of range for {} outputs",
            probs.len()
        )));
    }
    let p = probs[class];
    let mut rank = 1u32;
    for (j, &q) in probs.iter().enumerate() {
        if q > p || (q == p && j < class) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Per-image rank bookkeeping for one cell ablation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankRecord {
    pub image: usize,
    pub baseline: u32,
    pub ablated: u32,
    pub deficit: i32,
}

/// Baseline (unablated) rank of every image's own class, cached per
/// (model, dataset) pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineRanks {
    pub model_checksum: String,
    pub dataset_checksum: String,
    pub ranks: Vec<u32>,
}

impl BaselineRanks {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Error unless the cache matches the given model/dataset checksums.
    pub fn verify(&self, model_checksum: &str, dataset_checksum: &str, n_images: usize) -> Result<()> {
        if self.model_checksum != model_checksum || self.dataset_checksum != dataset_checksum {
            return Err(Error::validation(
                "baseline rank cache does not match this model/dataset",
            ));
        }
        if self.ranks.len() != n_images {
            return Err(Error::validation(format!(
                "baseline cache has {} ranks, dataset has {n_images} images",
                self.ranks.len()
            )));
        }
        Ok(())
    }
}

fn rank_of_label(model: &ModelGraph, dataset: &Dataset, image: usize, mask: &AblationMask) -> Result<u32> {
    let result = model.forward(&dataset.image_tensor(image), mask, &BTreeSet::new())?;
    let probs = softmax(result.logits()?);
    class_rank(&probs, dataset.label(image) as usize)
}

/// Forward every image unablated and record its class rank. Parallel per
/// image; output order is image order.
pub fn baseline_ranks(model: &ModelGraph, dataset: &Dataset) -> Result<BaselineRanks> {
    let empty = AblationMask::empty();
    let ranks: Vec<u32> = (0..dataset.n_images())
        .into_par_iter()
        .map(|i| rank_of_label(model, dataset, i, &empty))
        .collect::<Result<_>>()?;
    Ok(BaselineRanks {
        model_checksum: crate::store::model_checksum_in_memory(model),
        dataset_checksum: dataset.checksum(),
        ranks,
    })
}

/// Mean rank deficit for ablating one cell, over target-class images.
#[derive(Clone, Debug)]
pub struct CellDeficit {
    pub mean_deficit: f64,
    pub n_images: usize,
    pub records: Vec<RankRecord>,
}

/// Ablate every unit of `(layer, strip, band)` and score the deficit against
/// precomputed baselines.
pub fn cell_rank_deficit(
    model: &ModelGraph,
    dataset: &Dataset,
    atlas: &GridAtlas,
    layer: &str,
    strip: usize,
    band: usize,
    target: u16,
    baseline: &BaselineRanks,
) -> Result<CellDeficit> {
    baseline.verify(
        &crate::store::model_checksum_in_memory(model),
        &dataset.checksum(),
        dataset.n_images(),
    )?;
    let rows = dataset.class_rows(target);
    if rows.is_empty() {
        return Err(Error::validation(format!(
            "target class {target} has zero images"
        )));
    }
    let members = atlas.cell_members(layer, strip, band);
    if members.is_empty() {
        log::warn!("cell ({layer}, {strip}, {band}) is empty; deficit scored 0");
        return Ok(CellDeficit {
            mean_deficit: 0.0,
            n_images: rows.len(),
            records: Vec::new(),
        });
    }
    let mask = AblationMask::from_units(members);
    let records: Vec<RankRecord> = rows
        .par_iter()
        .map(|&image| -> Result<RankRecord> {
            let ablated = rank_of_label(model, dataset, image, &mask)?;
            let baseline_rank = baseline.ranks[image];
            Ok(RankRecord {
                image,
                baseline: baseline_rank,
                ablated,
                deficit: ablated as i32 - baseline_rank as i32,
            })
        })
        .collect::<Result<_>>()?;
    let mut acc = 0.0f64;
    for r in &records {
        acc += f64::from(r.deficit);
    }
    Ok(CellDeficit {
        mean_deficit: acc / records.len() as f64,
        n_images: records.len(),
        records,
    })
}

// ---------------------------------------------------------------------------
// Linear probes
// ---------------------------------------------------------------------------

/// Probe training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Train fraction of the stratified split.
    pub split: f64,
    pub seed: u64,
    pub l2: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            split: 0.8,
            seed: 0,
            l2: 1e-3,
            iterations: 500,
            learning_rate: 0.1,
        }
    }
}

/// A fitted per-cell linear classifier.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeModel {
    /// `[C x n_kept]` row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_classes: usize,
    /// Columns of the cell that survived standardization (std > 0).
    pub kept_columns: Vec<usize>,
    /// Train-split mean/std per kept column.
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub train_rows: Vec<usize>,
    pub eval_rows: Vec<usize>,
    pub meta: ProbeMeta,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub iterations: usize,
    pub final_loss: f64,
    pub seed: u64,
    pub split: f64,
    /// Learning rate actually used after any non-increase fallbacks.
    pub learning_rate: f64,
    pub lr_fallbacks: usize,
    /// True when every feature column was constant on the train split.
    pub degenerate: bool,
    pub dropped_columns: Vec<usize>,
}

/// Softmax cross-entropy loss and gradient of a linear classifier on a
/// feature matrix (`[n x d]` row-major), with L2 `0.5 * l2 * sum(w^2)`.
///
/// Returns `(loss, grad_weights, grad_bias)`.
pub fn probe_loss_and_grad(
    weights: &[f64],
    bias: &[f64],
    features: &[f64],
    labels: &[u16],
    n_classes: usize,
    l2: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = labels.len();
    let d = if n == 0 { 0 } else { features.len() / n };
    let mut loss = 0.0f64;
    let mut gw = vec![0.0f64; n_classes * d];
    let mut gb = vec![0.0f64; n_classes];
    let scale = 1.0 / n as f64;
    let mut logits = vec![0.0f64; n_classes];
    for (row, &label) in labels.iter().enumerate() {
        let x = &features[row * d..(row + 1) * d];
        for c in 0..n_classes {
            let mut acc = bias[c];
            let wrow = &weights[c * d..(c + 1) * d];
            for j in 0..d {
                acc += wrow[j] * x[j];
            }
            logits[c] = acc;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
        loss += (max + sum.ln()) - logits[label as usize];
        for c in 0..n_classes {
            let p = (logits[c] - max).exp() / sum;
            let g = (p - if c == label as usize { 1.0 } else { 0.0 }) * scale;
            gb[c] += g;
            let grow = &mut gw[c * d..(c + 1) * d];
            for j in 0..d {
                grow[j] += g * x[j];
            }
        }
    }
    loss *= scale;
    for (g, &w) in gw.iter_mut().zip(weights) {
        *g += l2 * w;
    }
    let w_norm: f64 = weights.iter().map(|&w| w * w).sum();
    loss += 0.5 * l2 * w_norm;
    (loss, gw, gb)
}

/// Stratified row split over labels; per-class shuffle from a named stream.
pub fn stratified_split_labels(
    labels: &[u16],
    n_classes: usize,
    train_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for class in 0..n_classes as u16 {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(&mut rng::stream(seed, "probe-split", &class.to_string()));
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

/// Fit a multinomial logistic-regression probe on the given activation
/// columns.
///
/// Features are standardized per column with train-split statistics;
/// zero-variance columns are dropped (a probe with no surviving columns is
/// trained on bias only and flagged degenerate). Training is full-batch
/// gradient descent for a fixed iteration budget; if the loss ever
/// increases, training restarts at a tenth of the learning rate.
pub fn fit_linear_probe(
    acts: &ActivationMatrix,
    columns: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeModel> {
    if columns.is_empty() {
        return Err(Error::validation("probe needs at least one feature column"));
    }
    let labels = acts.labels();
    let n_classes = acts.n_classes();
    let (train_rows, eval_rows) =
        stratified_split_labels(&labels, n_classes, cfg.split, cfg.seed);
    let train_classes: BTreeSet<u16> = train_rows.iter().map(|&r| labels[r]).collect();
    if train_classes.len() < 2 {
        return Err(Error::validation(
            "probe training rows must contain at least 2 classes",
        ));
    }

    // Train-split standardization; drop zero-variance columns.
    let mut means = Vec::new();
    let mut stds = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for &col in columns {
        let mut acc = 0.0f64;
        for &row in &train_rows {
            acc += f64::from(acts.value(row, col));
        }
        let mean = acc / train_rows.len() as f64;
        let mut var = 0.0f64;
        for &row in &train_rows {
            let d = f64::from(acts.value(row, col)) - mean;
            var += d * d;
        }
        let std = (var / train_rows.len() as f64).sqrt();
        if std > 0.0 {
            kept.push(col);
            means.push(mean);
            stds.push(std);
        } else {
            dropped.push(col);
        }
    }
    let degenerate = kept.is_empty();
    if degenerate {
        log::warn!("probe features all constant on the train split; bias-only probe");
    }

    let d = kept.len();
    let mut features: Vec<f64> = Vec::with_capacity(train_rows.len() * d);
    for &row in &train_rows {
        for (k, &col) in kept.iter().enumerate() {
            features.push((f64::from(acts.value(row, col)) - means[k]) / stds[k]);
        }
    }
    let train_labels: Vec<u16> = train_rows.iter().map(|&r| labels[r]).collect();

    // Full-batch GD with lr/10 fallback on any loss increase.
    let mut lr = cfg.learning_rate;
    let mut fallbacks = 0usize;
    let (weights, bias, final_loss) = loop {
        let mut weights = vec![0.0f64; n_classes * d];
        let mut bias = vec![0.0f64; n_classes];
        let mut prev = f64::INFINITY;
        let mut ok = true;
        let mut last = 0.0f64;
        for _ in 0..cfg.iterations {
            let (loss, gw, gb) =
                probe_loss_and_grad(&weights, &bias, &features, &train_labels, n_classes, cfg.l2);
            if loss > prev {
                ok = false;
                break;
            }
            prev = loss;
            last = loss;
            for (w, g) in weights.iter_mut().zip(&gw) {
                *w -= lr * g;
            }
            for (b, g) in bias.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
        }
        if ok || fallbacks >= 6 {
            break (weights, bias, last);
        }
        lr /= 10.0;
        fallbacks += 1;
    };

    Ok(ProbeModel {
        weights,
        bias,
        n_classes,
        kept_columns: kept,
        feature_means: means,
        feature_stds: stds,
        train_rows,
        eval_rows,
        meta: ProbeMeta {
            iterations: cfg.iterations,
            final_loss,
            seed: cfg.seed,
            split: cfg.split,
            learning_rate: lr,
            lr_fallbacks: fallbacks,
            degenerate,
            dropped_columns: dropped,
        },
    })
}

impl ProbeModel {
    /// Predicted class for one activation row (argmax, ties to lowest index).
    pub fn predict(&self, acts: &ActivationMatrix, row: usize) -> usize {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        let d = self.kept_columns.len();
        for c in 0..self.n_classes {
            let mut acc = self.bias[c];
            for (k, &col) in self.kept_columns.iter().enumerate() {
                let x = (f64::from(acts.value(row, col)) - self.feature_means[k])
                    / self.feature_stds[k];
                acc += self.weights[c * d + k] * x;
            }
            if acc > best_score {
                best_score = acc;
                best = c;
            }
        }
        best
    }
}

/// Held-out target recall: the fraction of eval-split target-class rows whose
/// argmax prediction is the target.
pub fn evaluate_probe(probe: &ProbeModel, acts: &ActivationMatrix, target: u16) -> Result<f64> {
    let labels = acts.labels();
    let rows: Vec<usize> = probe
        .eval_rows
        .iter()
        .copied()
        .filter(|&r| labels[r] == target)
        .collect();
    if rows.is_empty() {
        return Err(Error::validation(format!(
            "no held-out images for target class {target}"
        )));
    }
    let correct = rows
        .iter()
        .filter(|&&r| probe.predict(acts, r) == target as usize)
        .count();
    Ok(correct as f64 / rows.len() as f64)
}

// ---------------------------------------------------------------------------
// Per-cell driver
// ---------------------------------------------------------------------------

/// Per-cell scores: the two quantities the grid reports contrast.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CellResult {
    pub layer: String,
    pub strip: usize,
    pub band: usize,
    pub mean_rank_deficit: f64,
    pub probe_accuracy: f64,
    pub n_units: usize,
    /// Target-class images scored by ablation.
    pub n_images_scored: usize,
    /// Held-out target-class images scored by the probe.
    pub n_images_probe: usize,
}

/// Outcome of one cell: a result, or a recorded per-cell failure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellOutcome {
    pub layer: String,
    pub strip: usize,
    pub band: usize,
    pub result: Option<CellResult>,
    pub error: Option<String>,
}

/// Probe and ablate every cell of every eligible layer, in fixed
/// (layer, strip, band) order. Cells run in parallel; per-cell failures are
/// recorded and the run continues.
pub fn run_all_cells(
    model: &ModelGraph,
    dataset: &Dataset,
    acts: &ActivationMatrix,
    atlas: &GridAtlas,
    baseline: &BaselineRanks,
    cfg: &ProbeConfig,
) -> Result<Vec<CellOutcome>> {
    baseline.verify(
        &crate::store::model_checksum_in_memory(model),
        &dataset.checksum(),
        dataset.n_images(),
    )?;
    let target = atlas.target_class;
    let mut cells = Vec::new();
    for layer_atlas in &atlas.layers {
        for strip in 0..atlas.s_strips {
            for band in 0..atlas.m_bands {
                cells.push((layer_atlas.layer.clone(), strip, band));
            }
        }
    }

    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|(layer, strip, band)| {
            let run = || -> Result<CellResult> {
                let members = atlas.cell_members(layer, *strip, *band);
                let columns: Vec<usize> = members
                    .iter()
                    .map(|u| {
                        acts.column_of(u).ok_or_else(|| {
                            Error::validation(format!(
                                "unit {u:?} not present in the activation matrix"
                            ))
                        })
                    })
                    .collect::<Result<_>>()?;
                let deficit = cell_rank_deficit(
                    model, dataset, atlas, layer, *strip, *band, target, baseline,
                )?;
                let (probe_accuracy, n_images_probe) = if columns.is_empty() {
                    (0.0, 0)
                } else {
                    let probe = fit_linear_probe(acts, &columns, cfg)?;
                    let accuracy = evaluate_probe(&probe, acts, target)?;
                    let labels = acts.labels();
                    let n_eval_target = probe
                        .eval_rows
                        .iter()
                        .filter(|&&r| labels[r] == target)
                        .count();
                    (accuracy, n_eval_target)
                };
                Ok(CellResult {
                    layer: layer.clone(),
                    strip: *strip,
                    band: *band,
                    mean_rank_deficit: deficit.mean_deficit,
                    probe_accuracy,
                    n_units: members.len(),
                    n_images_scored: deficit.n_images,
                    n_images_probe,
                })
            };
            match run() {
                Ok(result) => CellOutcome {
                    layer: layer.clone(),
                    strip: *strip,
                    band: *band,
                    result: Some(result),
                    error: None,
                },
                Err(err) => {
                    log::warn!("cell ({layer}, {strip}, {band}) failed: {err}");
                    CellOutcome {
                        layer: layer.clone(),
                        strip: *strip,
                        band: *band,
                        result: None,
                        error: Some(err.to_string()),
                    }
                }
            }
        })
        .collect();
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{build_atlas, capture_activations, ComparisonClasses, MagnitudeMode};
    use crate::graph::{Layer, LayerKind, LayerParams, LayerSpec, UnitId, INPUT_ID};
    use crate::tensor::Tensor;

    #[test]
    fn class_rank_spec_cases() {
        assert_eq!(class_rank(&[0.1, 0.7, 0.2], 1).unwrap(), 1);
        assert_eq!(class_rank(&[0.1, 0.7, 0.2], 0).unwrap(), 3);
        // Tie yields to the lower class index.
        assert_eq!(class_rank(&[0.4, 0.4, 0.2], 1).unwrap(), 2);
        assert_eq!(class_rank(&[0.4, 0.4, 0.2], 0).unwrap(), 1);
        assert!(class_rank(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn rank_is_shift_invariant() {
        let mut r = crate::rng::stream(3, "probe-test", "shift");
        use rand::Rng;
        for _ in 0..50 {
            let logits: Vec<f32> = (0..6).map(|_| r.random_range(-4.0f32..4.0)).collect();
            let shifted: Vec<f32> = logits.iter().map(|&v| v + 2.5).collect();
            for c in 0..6 {
                assert_eq!(
                    class_rank(&softmax(&logits), c).unwrap(),
                    class_rank(&softmax(&shifted), c).unwrap()
                );
            }
        }
    }

    #[test]
    fn rank_bounds_hold() {
        let mut r = crate::rng::stream(4, "probe-test", "bounds");
        use rand::Rng;
        for _ in 0..100 {
            let c = r.random_range(2usize..8);
            let logits: Vec<f32> = (0..c).map(|_| r.random_range(-3.0f32..3.0)).collect();
            let probs = softmax(&logits);
            for class in 0..c {
                let rank = class_rank(&probs, class).unwrap();
                assert!(rank >= 1 && rank as usize <= c);
            }
        }
    }

    /// Planted-indicator fixture: conv1 channel 0 is a perfect target
    /// detector wired to the target logit; all other channels are dead.
    ///
    /// Images: target class is all-bright (1.0), other classes mid-gray
    /// (0.3); the 1x1 conv kernel (weight 1, bias -0.5) leaves channel 0 at
    /// 0.5 for target images and 0 otherwise.
    pub(crate) fn planted_fixture(n_channels: usize, n_classes: usize, target: u16) -> (ModelGraph, Dataset) {
        let side = 4usize;
        let mut conv_w = vec![0.0f32; n_channels];
        conv_w[0] = 1.0;
        let mut conv_b = vec![0.0f32; n_channels];
        conv_b[0] = -0.5;

        let flat = n_channels * side * side;
        let mut dense_w = vec![0.0f32; n_classes * flat];
        // Channel 0 drives the target logit hard.
        for k in 0..side * side {
            dense_w[target as usize * flat + k] = 10.0 / (side * side) as f32;
        }
        let mut dense_b = vec![0.0f32; n_classes];
        // A competitor logit sits at 1.0, so losing the indicator drops the
        // target below it.
        let competitor = if target == 0 { 1 } else { 0 };
        dense_b[competitor] = 1.0;

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
            Layer {
                spec: LayerSpec {
                    id: "relu1".into(),
                    kind: LayerKind::Relu,
                    inputs: vec!["conv1".into()],
                },
                params: LayerParams::None,
            },
            Layer {
                spec: LayerSpec {
                    id: "flat".into(),
                    kind: LayerKind::Flatten,
                    inputs: vec!["relu1".into()],
                },
                params: LayerParams::None,
            },
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

    #[test]
    fn empty_and_zero_influence_cells_score_zero() {
        let (model, dataset) = planted_fixture(16, 4, 0);
        let acts = capture_activations(&model, &dataset, &AblationMask::empty()).unwrap();
        let atlas = build_atlas(
            &acts,
            0,
            "class_00",
            ComparisonClasses::AllOthers,
            0,
            MagnitudeMode::Rotated,
            4,
            4,
        )
        .unwrap();
        let baseline = baseline_ranks(&model, &dataset).unwrap();

        // A cell holding only a dead channel has zero influence.
        // Dead channels all have selectivity 0 and magnitude 0; the planted
        // unit is alone at the top. Find a cell without the planted unit.
        let mut zero_cell = None;
        for strip in 0..4 {
            for band in 0..4 {
                let members = atlas.cell_members("conv1", strip, band);
                if !members.is_empty() && !members.iter().any(|u| u.index == 0) {
                    zero_cell = Some((strip, band));
                }
            }
        }
        let (strip, band) = zero_cell.expect("some cell without the planted unit");
        let deficit =
            cell_rank_deficit(&model, &dataset, &atlas, "conv1", strip, band, 0, &baseline)
                .unwrap();
        assert_eq!(deficit.mean_deficit, 0.0);
        assert_eq!(deficit.n_images, 10);
        for r in &deficit.records {
            assert_eq!(r.deficit, 0);
        }
    }

    #[test]
    fn planted_indicator_cell_has_deficit_of_at_least_one() {
        let (model, dataset) = planted_fixture(16, 4, 0);
        let acts = capture_activations(&model, &dataset, &AblationMask::empty()).unwrap();
        let atlas = build_atlas(
            &acts,
            0,
            "class_00",
            ComparisonClasses::AllOthers,
            0,
            MagnitudeMode::Rotated,
            4,
            4,
        )
        .unwrap();
        let baseline = baseline_ranks(&model, &dataset).unwrap();

        // The planted unit sits in the top selectivity strip.
        let conv1 = atlas.layers.iter().find(|l| l.layer == "conv1").unwrap();
        let planted = conv1.units.iter().find(|u| u.index == 0).unwrap();
        assert_eq!(planted.strip, 3, "planted unit must be in the top strip");

        let deficit = cell_rank_deficit(
            &model,
            &dataset,
            &atlas,
            "conv1",
            planted.strip,
            planted.band,
            0,
            &baseline,
        )
        .unwrap();
        assert!(
            deficit.mean_deficit >= 1.0,
            "mean deficit {}",
            deficit.mean_deficit
        );
    }

    #[test]
    fn perfect_indicator_feature_gives_full_recall() {
        let (model, dataset) = planted_fixture(16, 4, 0);
        let acts = capture_activations(&model, &dataset, &AblationMask::empty()).unwrap();
        // Column 0 is the indicator: 0.5 on target rows, 0 elsewhere.
        let probe = fit_linear_probe(&acts, &[0], &ProbeConfig::default()).unwrap();
        let recall = evaluate_probe(&probe, &acts, 0).unwrap();
        assert_eq!(recall, 1.0);
        // Training-split recall is 1.0 too on this separable case.
        let labels = acts.labels();
        let train_target: Vec<usize> = probe
            .train_rows
            .iter()
            .copied()
            .filter(|&r| labels[r] == 0)
            .collect();
        assert!(train_target
            .iter()
            .all(|&r| probe.predict(&acts, r) == 0));
    }

    #[test]
    fn all_zero_probe_predicts_class_zero() {
        let (model, dataset) = planted_fixture(16, 4, 1);
        let acts = capture_activations(&model, &dataset, &AblationMask::empty()).unwrap();
        // Dead column: constant zero activation -> dropped -> bias-only
        // degenerate probe with zero bias -> argmax ties resolve to class 0.
        let probe = fit_linear_probe(
            &acts,
            &[3],
            &ProbeConfig {
                iterations: 0,
                ..ProbeConfig::default()
            },
        )
        .unwrap();
        assert!(probe.meta.degenerate);
        assert_eq!(evaluate_probe(&probe, &acts, 0).unwrap(), 1.0);
        assert_eq!(evaluate_probe(&probe, &acts, 1).unwrap(), 0.0);
    }

    #[test]
    fn probe_gradient_matches_finite_differences() {
        let mut r = crate::rng::stream(8, "probe-test", "fd");
        use rand::Rng;
        let (n, d, c) = (24usize, 5usize, 3usize);
        let features: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let labels: Vec<u16> = (0..n).map(|i| (i % c) as u16).collect();
        let weights: Vec<f64> = (0..c * d).map(|_| r.random_range(-0.5..0.5)).collect();
        let bias: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
        let l2 = 1e-3;

        let (_, gw, gb) = probe_loss_and_grad(&weights, &bias, &features, &labels, c, l2);

        let h = 1e-3;
        let mut checked = 0;
        for k in 0..60 {
            let idx = (k * 7919) % (c * d + c);
            let (fd, analytic) = if idx < c * d {
                let mut wp = weights.clone();
                wp[idx] += h;
                let (up, _, _) = probe_loss_and_grad(&wp, &bias, &features, &labels, c, l2);
                wp[idx] -= 2.0 * h;
                let (down, _, _) = probe_loss_and_grad(&wp, &bias, &features, &labels, c, l2);
                ((up - down) / (2.0 * h), gw[idx])
            } else {
                let bi = idx - c * d;
                let mut bp = bias.clone();
                bp[bi] += h;
                let (up, _, _) = probe_loss_and_grad(&weights, &bp, &features, &labels, c, l2);
                bp[bi] -= 2.0 * h;
                let (down, _, _) = probe_loss_and_grad(&weights, &bp, &features, &labels, c, l2);
                ((up - down) / (2.0 * h), gb[bi])
            };
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                ((fd - analytic) / denom).abs() < 1e-4,
                "coord {idx}: fd {fd} vs analytic {analytic}"
            );
            checked += 1;
        }
        assert!(checked >= 50);
    }

    #[test]
    fn oversized_lr_falls_back_by_tenths() {
        let (model, dataset) = planted_fixture(16, 4, 0);
        let acts = capture_activations(&model, &dataset, &AblationMask::empty()).unwrap();
        let probe = fit_linear_probe(
            &acts,
            &[0],
            &ProbeConfig {
                learning_rate: 1e6,
                ..ProbeConfig::default()
            },
        )
        .unwrap();
        assert!(probe.meta.lr_fallbacks > 0);
        assert!(probe.meta.learning_rate < 1e6);
        assert!(probe.meta.final_loss.is_finite());
    }

    #[test]
    fn probe_needs_two_training_classes() {
        let acts = ActivationMatrix::test_fixture(vec![0.5; 12], 2, vec![0; 6], 1);
        let err = fit_linear_probe(&acts, &[0], &ProbeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn evaluate_needs_held_out_target_rows() {
        // Class 1 has a single row, so the stratified split keeps it
        // entirely in training and evaluation has no target rows.
        let labels = vec![0, 0, 0, 0, 1];
        let acts = ActivationMatrix::test_fixture(vec![0.25; 10], 2, labels, 2);
        let probe = fit_linear_probe(&acts, &[0, 1], &ProbeConfig::default()).unwrap();
        let err = evaluate_probe(&probe, &acts, 1).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn stale_baseline_cache_is_rejected() {
        let (model, dataset) = planted_fixture(16, 4, 0);
        let acts = capture_activations(&model, &dataset, &AblationMask::empty()).unwrap();
        let atlas = build_atlas(
            &acts,
            0,
            "class_00",
            ComparisonClasses::AllOthers,
            0,
            MagnitudeMode::Rotated,
            4,
            4,
        )
        .unwrap();
        let mut baseline = baseline_ranks(&model, &dataset).unwrap();
        baseline.model_checksum = "deadbeef".into();
        let err = cell_rank_deficit(&model, &dataset, &atlas, "conv1", 0, 0, 0, &baseline)
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn probe_loss_non_increasing() {
        let (model, dataset) = planted_fixture(16, 4, 0);
        let acts = capture_activations(&model, &dataset, &AblationMask::empty()).unwrap();
        let probe = fit_linear_probe(&acts, &[0, 1, 2], &ProbeConfig::default()).unwrap();
        // The non-increase contract is enforced during fitting; a violated
        // run would have fallen back to lr/10.
        assert_eq!(probe.meta.lr_fallbacks, 0);
        assert!(probe.meta.final_loss.is_finite());
    }

    #[test]
    fn shuffled_labels_give_chance_level_recall() {
        // Monte Carlo over 20 seeds: mean held-out target recall for an
        // 8-class problem with label-feature association destroyed sits near
        // 1/8.
        let mut mean_recall = 0.0f64;
        let n_seeds = 20;
        for seed in 0..n_seeds {
            let mut r = crate::rng::stream(seed, "probe-test", "chance");
            use rand::Rng;
            let n = 400usize;
            let n_units = 3usize;
            let values: Vec<f32> = (0..n * n_units)
                .map(|_| r.random_range(-1.0f32..1.0))
                .collect();
            // Labels shuffled randomly: balanced then permuted.
            let mut labels: Vec<u16> = (0..n).map(|i| (i % 8) as u16).collect();
            use rand::seq::SliceRandom;
            labels.shuffle(&mut r);
            let acts = ActivationMatrix::test_fixture(values, n_units, labels, 8);
            let probe = fit_linear_probe(
                &acts,
                &[0, 1, 2],
                &ProbeConfig {
                    seed,
                    iterations: 200,
                    ..ProbeConfig::default()
                },
            )
            .unwrap();
            mean_recall += evaluate_probe(&probe, &acts, 3).unwrap();
        }
        mean_recall /= n_seeds as f64;
        assert!(
            (mean_recall - 0.125).abs() <= 0.1,
            "mean recall {mean_recall}"
        );
    }

    #[test]
    fn run_all_cells_counts_and_isolation_oracle() {
        let (model, dataset) = planted_fixture(16, 4, 0);
        let acts = capture_activations(&model, &dataset, &AblationMask::empty()).unwrap();
        let atlas = build_atlas(
            &acts,
            0,
            "class_00",
            ComparisonClasses::AllOthers,
            0,
            MagnitudeMode::Rotated,
            4,
            4,
        )
        .unwrap();
        let baseline = baseline_ranks(&model, &dataset).unwrap();
        let cfg = ProbeConfig::default();
        let outcomes = run_all_cells(&model, &dataset, &acts, &atlas, &baseline, &cfg).unwrap();
        // conv1 is eligible (16 units); the 4-unit logits layer is skipped.
        assert_eq!(outcomes.len(), 16);
        assert!(outcomes.iter().all(|o| o.result.is_some()));

        // Isolation re-run oracle: per-cell deficits match independent runs.
        for o in outcomes.iter().take(5) {
            let r = o.result.as_ref().unwrap();
            let lone = cell_rank_deficit(
                &model, &dataset, &atlas, &o.layer, o.strip, o.band, 0, &baseline,
            )
            .unwrap();
            assert_eq!(r.mean_rank_deficit, lone.mean_deficit);
        }

        // Determinism: bit-identical reruns.
        let again = run_all_cells(&model, &dataset, &acts, &atlas, &baseline, &cfg).unwrap();
        for (a, b) in outcomes.iter().zip(&again) {
            assert_eq!(a.result, b.result);
        }
    }

    #[test]
    fn upstream_taps_unchanged_by_downstream_cell_ablation() {
        // Two-conv sequential model; ablating a conv2 cell leaves conv1
        // taps bit-identical.
        let (model, dataset) = {
            let mut r = crate::rng::stream(9, "probe-test", "upstream");
            use rand::Rng;
            let c1: Vec<f32> = (0..4).map(|_| r.random_range(-1.0f32..1.0)).collect();
            let c2: Vec<f32> = (0..16 * 4).map(|_| r.random_range(-1.0f32..1.0)).collect();
            let dw: Vec<f32> = (0..2 * 16 * 16).map(|_| r.random_range(-0.2f32..0.2)).collect();
            let layers = vec![
                Layer {
                    spec: LayerSpec {
                        id: "conv1".into(),
                        kind: LayerKind::Conv2d {
                            out_channels: 4,
                            in_channels: 1,
                            kernel: [1, 1],
                            stride: 1,
                            padding: 0,
                        },
                        inputs: vec![INPUT_ID.into()],
                    },
                    params: LayerParams::Conv {
                        weight: Tensor::new(vec![4, 1, 1, 1], c1).unwrap(),
                        bias: vec![0.0; 4],
                    },
                },
                Layer {
                    spec: LayerSpec {
                        id: "relu1".into(),
                        kind: LayerKind::Relu,
                        inputs: vec!["conv1".into()],
                    },
                    params: LayerParams::None,
                },
                Layer {
                    spec: LayerSpec {
                        id: "conv2".into(),
                        kind: LayerKind::Conv2d {
                            out_channels: 16,
                            in_channels: 4,
                            kernel: [1, 1],
                            stride: 1,
                            padding: 0,
                        },
                        inputs: vec!["relu1".into()],
                    },
                    params: LayerParams::Conv {
                        weight: Tensor::new(vec![16, 4, 1, 1], c2).unwrap(),
                        bias: vec![0.0; 16],
                    },
                },
                Layer {
                    spec: LayerSpec {
                        id: "relu2".into(),
                        kind: LayerKind::Relu,
                        inputs: vec!["conv2".into()],
                    },
                    params: LayerParams::None,
                },
                Layer {
                    spec: LayerSpec {
                        id: "flat".into(),
                        kind: LayerKind::Flatten,
                        inputs: vec!["relu2".into()],
                    },
                    params: LayerParams::None,
                },
                Layer {
                    spec: LayerSpec {
                        id: "logits".into(),
                        kind: LayerKind::Dense {
                            out_features: 2,
                            in_features: 16,
                        },
                        inputs: vec!["flat".into()],
                    },
                    params: LayerParams::Dense {
                        weight: Tensor::new(vec![2, 16], dw[..32].to_vec()).unwrap(),
                        bias: vec![0.0; 2],
                    },
                },
            ];
            let model = ModelGraph::new(vec![1, 1, 1], layers).unwrap();
            let ds = Dataset::new(
                [1, 1, 1],
                vec![200, 30, 60, 90],
                vec![0, 0, 1, 1],
                vec!["a".into(), "b".into()],
            )
            .unwrap();
            (model, ds)
        };
        let taps: BTreeSet<String> = ["conv1".to_string()].into();
        let image = dataset.image_tensor(0);
        let base = model.forward(&image, &AblationMask::empty(), &taps).unwrap();
        let mask = AblationMask::from_units((0..8).map(|i| UnitId::new("conv2", i)));
        let ablated = model.forward(&image, &mask, &taps).unwrap();
        assert!(base.taps["conv1"].bit_eq(&ablated.taps["conv1"]));
    }
}
