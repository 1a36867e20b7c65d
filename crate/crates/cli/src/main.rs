//! Subcommand CLI for the unit-atlas pipeline.
//!
//! Stages are independently invokable on prior stage outputs: `datagen` ->
//! `train` -> `capture` -> `atlas` -> `ablate`/`probe`, with `run` driving
//! the whole pipeline and `report` re-rendering CSV/SVG from a results file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unit_atlas_core::atlas::{
    build_atlas, capture_activations, ActivationMatrix, ComparisonClasses, MagnitudeMode,
};
use unit_atlas_core::datagen::{generate_dataset, DatagenConfig};
use unit_atlas_core::error::Result;
use unit_atlas_core::graph::AblationMask;
use unit_atlas_core::pipeline::{
    load_atlases, load_or_compute_baseline, pipeline_run, GridDims, ResultsDoc,
    RunConfig,
};
use unit_atlas_core::probe::{evaluate_probe, fit_linear_probe, ProbeConfig};
use unit_atlas_core::report::{write_csv, write_svgs};
use unit_atlas_core::store::{load_model, save_model, Dataset};
use unit_atlas_core::train::{train_model, ArchTemplate, TrainConfig};

#[derive(Parser)]
#[command(
    name = "unit-atlas",
    version,
    about = "Locate causally important unit groups in small CNNs by contrasting per-cell linear probes with ablation rank deficits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct WorkerArgs {
    /// Worker thread count (0 = all cores).
    #[arg(long, env = "UNIT_ATLAS_WORKERS", default_value_t = 0)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image-class dataset.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0.25)]
        noise: f32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a desk-scale CNN on a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk", value_parser = parse_arch)]
        arch: ArchTemplate,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long = "batch-size", default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-4)]
        l2: f64,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Capture per-unit activations for every image (unablated).
    Capture {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: WorkerArgs,
    },
    /// Build selectivity/magnitude grid atlases from captured activations.
    Atlas {
        #[arg(long)]
        activations: PathBuf,
        /// Class name or index; repeatable. Defaults to every class.
        #[arg(long = "target-class")]
        target_class: Vec<String>,
        #[arg(long, default_value = "4x4")]
        grid: GridDims,
        #[arg(long = "magnitude-mode", default_value = "rotated", value_parser = parse_magnitude)]
        magnitude_mode: MagnitudeMode,
        /// Compare against a seeded random subset of other classes.
        #[arg(long = "comparison-subsample")]
        comparison_subsample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output atlas JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Ablate every cell of an atlas and score rank deficits.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Atlas JSON produced by `atlas` or `run`.
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long = "target-class")]
        target_class: String,
        /// Baseline rank cache; computed (and written) when absent.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: WorkerArgs,
    },
    /// Fit and evaluate per-cell linear probes.
    Probe {
        #[arg(long)]
        activations: PathBuf,
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long = "target-class")]
        target_class: String,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline: capture, atlas, probes + ablations, reports.
    Run {
        /// JSON config file; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Class name or index; repeatable. Defaults to every class.
        #[arg(long = "target-class")]
        target_class: Vec<String>,
        #[arg(long)]
        grid: Option<GridDims>,
        #[arg(long = "magnitude-mode", value_parser = parse_magnitude)]
        magnitude_mode: Option<MagnitudeMode>,
        #[arg(long = "comparison-subsample")]
        comparison_subsample: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "UNIT_ATLAS_WORKERS")]
        workers: Option<usize>,
    },
    /// Re-render report.csv and SVG grids from a results file.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_arch(s: &str) -> std::result::Result<ArchTemplate, String> {
    s.parse().map_err(|e: unit_atlas_core::Error| e.to_string())
}

fn parse_magnitude(s: &str) -> std::result::Result<MagnitudeMode, String> {
    s.parse().map_err(|e: unit_atlas_core::Error| e.to_string())
}

fn comparison_of(subsample: Option<usize>) -> ComparisonClasses {
    match subsample {
        Some(k) => ComparisonClasses::Subsample(k),
        None => ComparisonClasses::AllOthers,
    }
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| {
            unit_atlas_core::Error::Validation(format!("cannot build worker pool: {e}"))
        })
}

fn atlas_targets(acts: &ActivationMatrix, requested: &[String]) -> Result<Vec<u16>> {
    if requested.is_empty() {
        return Ok((0..acts.n_classes() as u16).collect());
    }
    let mut targets = Vec::new();
    for name in requested {
        let t = acts.resolve_class(name)?;
        if !targets.contains(&t) {
            targets.push(t);
        }
    }
    Ok(targets)
}

fn find_atlas(
    atlases: Vec<unit_atlas_core::atlas::GridAtlas>,
    target: u16,
) -> Result<unit_atlas_core::atlas::GridAtlas> {
    atlases
        .into_iter()
        .find(|a| a.target_class == target)
        .ok_or_else(|| {
            unit_atlas_core::Error::Validation(format!(
                "atlas file has no entry for target class {target}"
            ))
        })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen {
            out,
            classes,
            per_class,
            height,
            width,
            channels,
            noise,
            seed,
        } => {
            let dataset = generate_dataset(&DatagenConfig {
                n_classes: classes,
                per_class,
                shape: [channels, height, width],
                noise,
                seed,
            })?;
            dataset.save(&out)?;
            println!(
                "wrote {} images ({} classes) to {}",
                dataset.n_images(),
                dataset.n_classes(),
                out.display()
            );
        }
        Command::Train {
            dataset,
            out,
            arch,
            epochs,
            lr,
            batch_size,
            l2,
            split,
            seed,
        } => {
            let dataset = Dataset::load(&dataset)?;
            let cfg = TrainConfig {
                learning_rate: lr,
                epochs,
                batch_size,
                l2,
                seed,
                split,
            };
            let (model, log) = train_model(arch, &dataset, &cfg)?;
            save_model(&model, &out)?;
            std::fs::write(
                out.join("train_log.json"),
                serde_json::to_vec_pretty(&log)?,
            )?;
            for epoch in &log.epochs {
                log::info!(
                    "epoch {:>3}: loss {:.4} eval acc {:.3}",
                    epoch.epoch,
                    epoch.train_loss,
                    epoch.eval_accuracy
                );
            }
            println!(
                "trained {} epochs, final eval accuracy {:.3}; model at {}",
                log.epochs.len(),
                log.final_eval_accuracy,
                out.display()
            );
        }
        Command::Capture {
            model,
            dataset,
            out,
            workers,
        } => {
            let model = load_model(&model)?;
            let dataset = Dataset::load(&dataset)?;
            let pool = build_pool(workers.workers)?;
            let acts =
                pool.install(|| capture_activations(&model, &dataset, &AblationMask::empty()))?;
            acts.save(&out)?;
            println!(
                "captured {} images x {} units to {}",
                acts.n_images(),
                acts.n_units(),
                out.display()
            );
        }
        Command::Atlas {
            activations,
            target_class,
            grid,
            magnitude_mode,
            comparison_subsample,
            seed,
            out,
        } => {
            let acts = ActivationMatrix::load(&activations)?;
            let targets = atlas_targets(&acts, &target_class)?;
            let mut atlases = Vec::new();
            for target in targets {
                atlases.push(build_atlas(
                    &acts,
                    target,
                    acts.class_name(target),
                    comparison_of(comparison_subsample),
                    seed,
                    magnitude_mode,
                    grid.s,
                    grid.m,
                )?);
            }
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, serde_json::to_vec_pretty(&atlases)?)?;
            println!("wrote {} atlas(es) to {}", atlases.len(), out.display());
        }
        Command::Ablate {
            model,
            dataset,
            atlas,
            target_class,
            baseline,
            out,
            workers,
        } => {
            let model = load_model(&model)?;
            let dataset = Dataset::load(&dataset)?;
            let target = dataset.resolve_class(&target_class)?;
            let atlas = find_atlas(load_atlases(&atlas)?, target)?;
            let pool = build_pool(workers.workers)?;
            let (ranks, from_cache) = pool.install(|| {
                load_or_compute_baseline(baseline.as_deref(), &model, &dataset)
            })?;
            if let Some(path) = &baseline {
                if !from_cache {
                    ranks.save(path)?;
                }
            }
            let mut cells = Vec::new();
            for layer in &atlas.layers {
                for strip in 0..atlas.s_strips {
                    for band in 0..atlas.m_bands {
                        let deficit = pool.install(|| {
                            unit_atlas_core::probe::cell_rank_deficit(
                                &model,
                                &dataset,
                                &atlas,
                                &layer.layer,
                                strip,
                                band,
                                target,
                                &ranks,
                            )
                        })?;
                        cells.push(serde_json::json!({
                            "layer": layer.layer,
                            "strip": strip,
                            "band": band,
                            "mean_rank_deficit": deficit.mean_deficit,
                            "n_units": atlas.cell_members(&layer.layer, strip, band).len(),
                            "n_images_scored": deficit.n_images,
                        }));
                    }
                }
            }
            let doc = serde_json::json!({
                "target_class": target,
                "target_name": atlas.target_name,
                "cells": cells,
            });
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, serde_json::to_vec_pretty(&doc)?)?;
            println!("wrote {} cell deficits to {}", cells.len(), out.display());
        }
        Command::Probe {
            activations,
            atlas,
            target_class,
            split,
            l2,
            iterations,
            lr,
            seed,
            out,
        } => {
            let acts = ActivationMatrix::load(&activations)?;
            let target = acts.resolve_class(&target_class)?;
            let atlas = find_atlas(load_atlases(&atlas)?, target)?;
            let cfg = ProbeConfig {
                split,
                seed,
                l2,
                iterations,
                learning_rate: lr,
            };
            let mut cells = Vec::new();
            for layer in &atlas.layers {
                for strip in 0..atlas.s_strips {
                    for band in 0..atlas.m_bands {
                        let members = atlas.cell_members(&layer.layer, strip, band);
                        let columns: Vec<usize> = members
                            .iter()
                            .filter_map(|u| acts.column_of(u))
                            .collect();
                        let (accuracy, n_eval) = if columns.is_empty() {
                            (0.0, 0)
                        } else {
                            let probe = fit_linear_probe(&acts, &columns, &cfg)?;
                            let acc = evaluate_probe(&probe, &acts, target)?;
                            let labels = acts.labels();
                            let n = probe
                                .eval_rows
                                .iter()
                                .filter(|&&r| labels[r] == target)
                                .count();
                            (acc, n)
                        };
                        cells.push(serde_json::json!({
                            "layer": layer.layer,
                            "strip": strip,
                            "band": band,
                            "probe_accuracy": accuracy,
                            "n_units": members.len(),
                            "n_images_probe": n_eval,
                        }));
                    }
                }
            }
            let doc = serde_json::json!({
                "target_class": target,
                "target_name": atlas.target_name,
                "cells": cells,
            });
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, serde_json::to_vec_pretty(&doc)?)?;
            println!(
                "wrote {} cell probe scores to {}",
                cells.len(),
                out.display()
            );
        }
        Command::Run {
            config,
            model,
            dataset,
            out,
            target_class,
            grid,
            magnitude_mode,
            comparison_subsample,
            seed,
            workers,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            if let Some(model) = model {
                cfg.model = model;
            }
            if let Some(dataset) = dataset {
                cfg.dataset = dataset;
            }
            if let Some(out) = out {
                cfg.out = out;
            }
            if !target_class.is_empty() {
                cfg.target_classes = target_class;
            }
            if let Some(grid) = grid {
                cfg.grid = grid;
            }
            if let Some(mode) = magnitude_mode {
                cfg.magnitude_mode = mode;
            }
            if comparison_subsample.is_some() {
                cfg.comparison_subsample = comparison_subsample;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(workers) = workers {
                cfg.workers = workers;
            }
            let summary = pipeline_run(&cfg)?;
            println!(
                "pipeline complete: {} target class(es), outputs in {}",
                summary.results.runs.len(),
                summary.out.display()
            );
        }
        Command::Report { results, out } => {
            let doc = ResultsDoc::load(&results)?;
            std::fs::create_dir_all(&out)?;
            write_csv(&out.join("report.csv"), &doc.runs)?;
            let files = write_svgs(&out, &doc.runs, doc.meta.config.grid.s, doc.meta.config.grid.m)?;
            println!(
                "wrote report.csv and {} SVG grids to {}",
                files.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
