//! Desk-scale calibration run: trains the default CNN on the default
//! synthetic set, runs the full pipeline over every class, and prints the
//! grid statistics the qualitative checks care about.
//!
//! Usage: cargo run --release -p unit-atlas-core --example calibrate -- [epochs] [noise] [seed]

use std::time::Instant;

use unit_atlas_core::atlas::MagnitudeMode;
use unit_atlas_core::datagen::{generate_dataset, DatagenConfig};
use unit_atlas_core::pipeline::{pipeline_run, RunConfig};
use unit_atlas_core::report::TargetResults;
use unit_atlas_core::store::save_model;
use unit_atlas_core::train::{train_model, ArchTemplate, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let noise: f32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);

    let dir = std::env::temp_dir().join(format!("unit-atlas-calibrate-{epochs}-{noise}-{seed}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();

    let t0 = Instant::now();
    let dataset = generate_dataset(&DatagenConfig {
        noise,
        ..DatagenConfig::default()
    })
    .unwrap();
    let dataset_dir = dir.join("dataset");
    dataset.save(&dataset_dir).unwrap();
    println!("datagen: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let (model, log) = train_model(
        ArchTemplate::Desk,
        &dataset,
        &TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    for e in &log.epochs {
        println!(
            "epoch {:>3}: loss {:.4} eval acc {:.3}",
            e.epoch, e.train_loss, e.eval_accuracy
        );
    }
    println!(
        "train: {:?}, final eval accuracy {:.3}",
        t0.elapsed(),
        log.final_eval_accuracy
    );
    let model_dir = dir.join("model");
    save_model(&model, &model_dir).unwrap();

    let t0 = Instant::now();
    let cfg = RunConfig {
        model: model_dir,
        dataset: dataset_dir,
        out: dir.join("out"),
        magnitude_mode: MagnitudeMode::Rotated,
        seed: 0,
        ..RunConfig::default()
    };
    let summary = pipeline_run(&cfg).unwrap();
    println!("pipeline: {:?}", t0.elapsed());

    analyze(&summary.results.runs);
}

fn analyze(runs: &[TargetResults]) {
    let mut grids = 0usize;
    let mut top_attains_max = 0usize;
    let mut argmax_differs = 0usize;
    let mut extreme_sum = 0.0f64;
    let mut extreme_n = 0usize;
    let mut middle_sum = 0.0f64;
    let mut middle_n = 0usize;

    for run in runs {
        let mut layers: Vec<&str> = Vec::new();
        for c in &run.cells {
            if !layers.contains(&c.layer.as_str()) {
                layers.push(&c.layer);
            }
        }
        for layer in layers {
            let cells: Vec<_> = run
                .cells
                .iter()
                .filter(|c| c.layer == layer)
                .filter_map(|c| c.result.as_ref())
                .collect();
            if cells.is_empty() {
                continue;
            }
            grids += 1;
            let max_deficit = cells
                .iter()
                .map(|c| c.mean_rank_deficit)
                .fold(f64::NEG_INFINITY, f64::max);
            let top = cells
                .iter()
                .find(|c| c.strip == 3 && c.band == 3)
                .expect("4x4 grid");
            if top.mean_rank_deficit >= max_deficit {
                top_attains_max += 1;
            }

            let argmax_by = |key: fn(&&&unit_atlas_core::probe::CellResult) -> f64| {
                let mut best = &cells[0];
                for c in &cells {
                    if key(&c) > key(&&best) {
                        best = c;
                    }
                }
                (best.strip, best.band)
            };
            let am_deficit = argmax_by(|c| c.mean_rank_deficit);
            let am_probe = argmax_by(|c| c.probe_accuracy);
            if am_deficit != am_probe {
                argmax_differs += 1;
            }

            for c in &cells {
                if c.strip == 0 || c.strip == 3 {
                    extreme_sum += c.probe_accuracy;
                    extreme_n += 1;
                } else {
                    middle_sum += c.probe_accuracy;
                    middle_n += 1;
                }
            }
            println!(
                "grid {:>9} {:>7}: max deficit {:>8.3} at ({},{}), top cell {:>8.3}, argmax probe ({},{}) acc {:.3}",
                run.target_name,
                layer,
                max_deficit,
                am_deficit.0,
                am_deficit.1,
                top.mean_rank_deficit,
                am_probe.0,
                am_probe.1,
                cells
                    .iter()
                    .map(|c| c.probe_accuracy)
                    .fold(f64::NEG_INFINITY, f64::max),
            );
        }
    }

    println!("\n== qualitative checks ==");
    println!(
        "A6: top-selectivity/top-magnitude cell attains max deficit in {top_attains_max}/{grids} grids ({:.0}%), need >= 50%",
        100.0 * top_attains_max as f64 / grids as f64
    );
    println!(
        "A7 strips: extreme mean probe acc {:.4} vs middle {:.4}, need extreme > middle",
        extreme_sum / extreme_n as f64,
        middle_sum / middle_n as f64
    );
    println!(
        "A7 dissociation: argmax cells differ in {argmax_differs}/{grids} grids ({:.0}%), need >= 25%",
        100.0 * argmax_differs as f64 / grids as f64
    );
}
