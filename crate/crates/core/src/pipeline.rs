//! End-to-end orchestration: capture -> stats -> grid -> probes + ablations
//! -> reports, with a MANIFEST recording completed stages and output
//! checksums. Used by the CLI `run` subcommand and the Python bindings.
//!
//! Every output is deterministic for a fixed config: reruns produce
//! byte-identical `results.json` and `report.csv` at any worker count.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::atlas::{
    build_atlas, capture_activations, ActivationMatrix, ComparisonClasses, GridAtlas,
    MagnitudeMode,
};
use crate::error::{Error, Result};
use crate::graph::{AblationMask, ModelGraph};
use crate::probe::{baseline_ranks, run_all_cells, BaselineRanks, ProbeConfig};
use crate::report::{write_csv, write_svgs, TargetResults};
use crate::store::{load_model, model_checksum_in_memory, Dataset};

pub const RESULTS_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Grid dimensions, parsed from and serialized as `SxM` (e.g. `4x4`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub s: usize,
    pub m: usize,
}

impl Default for GridDims {
    fn default() -> Self {
        GridDims { s: 4, m: 4 }
    }
}

impl fmt::Display for GridDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.s, self.m)
    }
}

impl std::str::FromStr for GridDims {
    type Err = Error;
    fn from_str(text: &str) -> Result<Self> {
        let (s, m) = text
            .split_once('x')
            .ok_or_else(|| Error::validation(format!("grid `{text}` is not of the form SxM")))?;
        let s: usize = s
            .parse()
            .map_err(|_| Error::validation(format!("bad strip count in grid `{text}`")))?;
        let m: usize = m
            .parse()
            .map_err(|_| Error::validation(format!("bad band count in grid `{text}`")))?;
        if s == 0 || m == 0 {
            return Err(Error::validation("grid dims must be >= 1"));
        }
        Ok(GridDims { s, m })
    }
}

impl Serialize for GridDims {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GridDims {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Probe hyperparameters exposed in the run config; the probe seed is the
/// run seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    pub split: f64,
    pub l2: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        let p = ProbeConfig::default();
        ProbeSettings {
            split: p.split,
            l2: p.l2,
            iterations: p.iterations,
            learning_rate: p.learning_rate,
        }
    }
}

impl ProbeSettings {
    pub fn to_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            split: self.split,
            seed,
            l2: self.l2,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
        }
    }
}

/// Full pipeline configuration. Parsed strictly: unknown keys are errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Class names or decimal indices; empty means every class.
    pub target_classes: Vec<String>,
    pub grid: GridDims,
    pub magnitude_mode: MagnitudeMode,
    /// `None` compares against all non-target classes.
    pub comparison_subsample: Option<usize>,
    pub probe: ProbeSettings,
    pub seed: u64,
    /// Rayon worker count; 0 uses every core. Excluded from the config echo
    /// in `results.json`: results are identical at any worker count.
    #[serde(skip_serializing)]
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: PathBuf::new(),
            dataset: PathBuf::new(),
            out: PathBuf::new(),
            target_classes: Vec::new(),
            grid: GridDims::default(),
            magnitude_mode: MagnitudeMode::Rotated,
            comparison_subsample: None,
            probe: ProbeSettings::default(),
            seed: 0,
            workers: 0,
        }
    }
}

impl RunConfig {
    /// Strict parse of a JSON config file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, path) in [("model", &self.model), ("dataset", &self.dataset)] {
            if path.as_os_str().is_empty() {
                return Err(Error::validation(format!("config is missing `{name}`")));
            }
            if !path.exists() {
                return Err(Error::validation(format!(
                    "{name} path `{}` does not exist",
                    path.display()
                )));
            }
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::validation("config is missing `out`"));
        }
        if let Some(k) = self.comparison_subsample {
            if k == 0 {
                return Err(Error::validation("comparison_subsample must be >= 1"));
            }
        }
        if !(self.probe.split > 0.0 && self.probe.split < 1.0) {
            return Err(Error::validation("probe split must be in (0, 1)"));
        }
        if self.probe.learning_rate <= 0.0 {
            return Err(Error::validation("probe learning rate must be > 0"));
        }
        if self.probe.l2 < 0.0 {
            return Err(Error::validation("probe l2 must be >= 0"));
        }
        Ok(())
    }

    fn comparison(&self) -> ComparisonClasses {
        match self.comparison_subsample {
            Some(k) => ComparisonClasses::Subsample(k),
            None => ComparisonClasses::AllOthers,
        }
    }
}

/// Run metadata echoed into `results.json` so no result depends on unstated
/// defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub format_version: u32,
    pub model_checksum: String,
    pub dataset_checksum: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultsDoc {
    pub meta: RunMeta,
    pub runs: Vec<TargetResults>,
}

impl ResultsDoc {
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
}

/// Tracks completed stages and output checksums in `MANIFEST.json`.
struct ManifestTracker {
    out: PathBuf,
    completed: Vec<String>,
    files: BTreeMap<String, String>,
}

impl ManifestTracker {
    fn new(out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        let tracker = ManifestTracker {
            out: out.to_path_buf(),
            completed: Vec::new(),
            files: BTreeMap::new(),
        };
        tracker.write()?;
        Ok(tracker)
    }

    fn finish_stage(&mut self, name: &str, outputs: &[PathBuf]) -> Result<()> {
        for path in outputs {
            let rel = path
                .strip_prefix(&self.out)
                .unwrap_or(path)
                .to_string_lossy()
                .replace('\\', "/");
            let bytes = fs::read(path)?;
            self.files.insert(rel, crate::store::sha256_hex(&bytes));
        }
        self.completed.push(name.to_string());
        self.write()
    }

    fn write(&self) -> Result<()> {
        let doc = serde_json::json!({
            "format_version": MANIFEST_FORMAT_VERSION,
            "completed_stages": self.completed,
            "files": self.files,
        });
        fs::write(
            self.out.join("MANIFEST.json"),
            serde_json::to_vec_pretty(&doc)?,
        )?;
        Ok(())
    }
}

/// Everything a finished pipeline run produced.
pub struct RunSummary {
    pub out: PathBuf,
    pub atlases: Vec<GridAtlas>,
    pub results: ResultsDoc,
}

/// Resolve the requested target classes (empty selection = every class).
pub fn resolve_targets(dataset: &Dataset, requested: &[String]) -> Result<Vec<u16>> {
    if requested.is_empty() {
        return Ok((0..dataset.n_classes() as u16).collect());
    }
    let mut targets = Vec::new();
    for name in requested {
        let t = dataset.resolve_class(name)?;
        if !targets.contains(&t) {
            targets.push(t);
        }
    }
    Ok(targets)
}

/// Execute the full pipeline. Partial outputs are retained on failure with
/// `MANIFEST.json` marking the last completed stage.
pub fn pipeline_run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let model = load_model(&cfg.model)?;
    let dataset = Dataset::load(&cfg.dataset)?;
    let targets = resolve_targets(&dataset, &cfg.target_classes)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::validation(format!("cannot build worker pool: {e}")))?;

    let mut manifest = ManifestTracker::new(&cfg.out)?;

    // capture
    let acts = pool.install(|| capture_activations(&model, &dataset, &AblationMask::empty()))?;
    let acts_dir = cfg.out.join("activations");
    acts.save(&acts_dir)?;
    manifest.finish_stage(
        "capture",
        &[
            acts_dir.join("activations.bin"),
            acts_dir.join("units.json"),
            acts_dir.join("images.json"),
        ],
    )?;

    // baseline
    let baseline = pool.install(|| baseline_ranks(&model, &dataset))?;
    let baseline_path = cfg.out.join("baseline.json");
    baseline.save(&baseline_path)?;
    manifest.finish_stage("baseline", &[baseline_path])?;

    // atlas
    let mut atlases = Vec::new();
    for &target in &targets {
        atlases.push(build_atlas(
            &acts,
            target,
            dataset.class_name(target),
            cfg.comparison(),
            cfg.seed,
            cfg.magnitude_mode,
            cfg.grid.s,
            cfg.grid.m,
        )?);
    }
    let atlas_path = cfg.out.join("atlas.json");
    fs::write(&atlas_path, serde_json::to_vec_pretty(&atlases)?)?;
    manifest.finish_stage("atlas", &[atlas_path])?;

    // cells (probes + ablations)
    let probe_cfg = cfg.probe.to_config(cfg.seed);
    let mut runs = Vec::new();
    for atlas in &atlases {
        let cells = pool.install(|| {
            run_all_cells(&model, &dataset, &acts, atlas, &baseline, &probe_cfg)
        })?;
        runs.push(TargetResults {
            target_class: atlas.target_class,
            target_name: atlas.target_name.clone(),
            cells,
        });
    }
    let results = ResultsDoc {
        meta: RunMeta {
            format_version: RESULTS_FORMAT_VERSION,
            model_checksum: model_checksum_in_memory(&model),
            dataset_checksum: dataset.checksum(),
            config: cfg.clone(),
        },
        runs,
    };
    let results_path = cfg.out.join("results.json");
    results.save(&results_path)?;
    manifest.finish_stage("cells", &[results_path])?;

    // report
    let csv_path = cfg.out.join("report.csv");
    write_csv(&csv_path, &results.runs)?;
    let mut report_files = write_svgs(&cfg.out, &results.runs, cfg.grid.s, cfg.grid.m)?;
    report_files.push(csv_path);
    manifest.finish_stage("report", &report_files)?;

    Ok(RunSummary {
        out: cfg.out.clone(),
        atlases,
        results,
    })
}

/// Load a stored activation matrix produced by the capture stage.
pub fn load_activations(dir: &Path) -> Result<ActivationMatrix> {
    ActivationMatrix::load(dir)
}

/// Load a stored atlas array.
pub fn load_atlases(path: &Path) -> Result<Vec<GridAtlas>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Load baseline ranks from a cache file, or recompute them.
///
/// A cache that fails to parse or whose model/dataset checksums do not
/// match is discarded with a warning. Returns the ranks and whether they
/// came from the cache.
pub fn load_or_compute_baseline(
    path: Option<&Path>,
    model: &ModelGraph,
    dataset: &Dataset,
) -> Result<(BaselineRanks, bool)> {
    if let Some(path) = path {
        if path.exists() {
            match BaselineRanks::load(path) {
                Ok(cached) => {
                    let valid = cached.verify(
                        &model_checksum_in_memory(model),
                        &dataset.checksum(),
                        dataset.n_images(),
                    );
                    match valid {
                        Ok(()) => return Ok((cached, true)),
                        Err(e) => log::warn!(
                            "baseline cache {} is stale ({e}); recomputing",
                            path.display()
                        ),
                    }
                }
                Err(e) => log::warn!(
                    "baseline cache {} is unreadable ({e}); recomputing",
                    path.display()
                ),
            }
        }
    }
    Ok((baseline_ranks(model, dataset)?, false))
}
