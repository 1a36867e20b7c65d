//! CSV and SVG grid reports.
//!
//! The CSV is long-format with columns `(class, layer, strip, band, metric,
//! value)`; values use Rust's shortest round-trip float formatting so a
//! re-parse reproduces the in-memory numbers exactly. SVGs are
//! self-contained (inline styles, no external assets): one heatmap per
//! (class, layer) and metric, plus per-class averages over layers and
//! per-layer averages over classes. The color scale of a class's grids is
//! normalized to the min/max of that class's scores; strip S-1 (most
//! target-selective) is the top row and band M-1 (highest magnitude) the
//! rightmost column.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::CellOutcome;

/// All cell outcomes for one target class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetResults {
    pub target_class: u16,
    pub target_name: String,
    pub cells: Vec<CellOutcome>,
}

/// Which per-cell quantity a grid renders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Deficit,
    Probe,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Deficit, Metric::Probe];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Deficit => "deficit",
            Metric::Probe => "probe",
        }
    }

    fn value(self, cell: &CellOutcome) -> Option<f64> {
        cell.result.as_ref().map(|r| match self {
            Metric::Deficit => r.mean_rank_deficit,
            Metric::Probe => r.probe_accuracy,
        })
    }

    /// Color ramp endpoints (low, high) as RGB.
    fn ramp(self) -> ([u8; 3], [u8; 3]) {
        match self {
            Metric::Deficit => ([247, 247, 247], [103, 0, 13]),
            Metric::Probe => ([247, 247, 247], [8, 48, 107]),
        }
    }
}

/// One parsed CSV row (used by the round-trip check and the CLI `report`
/// subcommand's consumers).
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub class: String,
    pub layer: String,
    pub strip: usize,
    pub band: usize,
    pub metric: String,
    pub value: Option<f64>,
}

/// Write the long-format CSV. Row order is fixed: class, then cell order as
/// stored (layer, strip, band), then metric (`deficit`, `probe`).
pub fn write_csv(path: &Path, runs: &[TargetResults]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["class", "layer", "strip", "band", "metric", "value"])?;
    for run in runs {
        for cell in &run.cells {
            for metric in Metric::ALL {
                let value = metric
                    .value(cell)
                    .map(|v| v.to_string())
                    .unwrap_or_default();
                writer.write_record([
                    run.target_name.as_str(),
                    cell.layer.as_str(),
                    &cell.strip.to_string(),
                    &cell.band.to_string(),
                    metric.as_str(),
                    &value,
                ])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

/// Parse a report CSV back into rows.
pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse_usize = |i: usize| -> Result<usize> {
            record
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::validation(format!("bad CSV field {i} in {record:?}")))
        };
        let value = match record.get(5).unwrap_or("") {
            "" => None,
            s => Some(
                s.parse::<f64>()
                    .map_err(|e| Error::validation(format!("bad CSV value `{s}`: {e}")))?,
            ),
        };
        rows.push(CsvRow {
            class: record.get(0).unwrap_or_default().to_string(),
            layer: record.get(1).unwrap_or_default().to_string(),
            strip: parse_usize(2)?,
            band: parse_usize(3)?,
            metric: record.get(4).unwrap_or_default().to_string(),
            value,
        });
    }
    Ok(rows)
}

fn lerp_color(ramp: ([u8; 3], [u8; 3]), t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let mut rgb = [0u8; 3];
    for (i, slot) in rgb.iter_mut().enumerate() {
        let lo = f64::from(ramp.0[i]);
        let hi = f64::from(ramp.1[i]);
        *slot = (lo + (hi - lo) * t).round() as u8;
    }
    format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2])
}

/// Render one S x M grid as a standalone SVG string.
///
/// `values[strip * m + band]`; `None` renders as a hatched null cell.
pub fn render_grid_svg(
    title: &str,
    s: usize,
    m: usize,
    values: &[Option<f64>],
    vmin: f64,
    vmax: f64,
    metric: Metric,
) -> String {
    const CELL: usize = 46;
    const LEFT: usize = 64;
    const TOP: usize = 34;
    const LEGEND_W: usize = 78;
    const BOTTOM: usize = 44;
    let width = LEFT + m * CELL + LEGEND_W + 10;
    let height = TOP + s * CELL + BOTTOM;
    let degenerate = !(vmax > vmin);
    let ramp = metric.ramp();

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "  <defs><linearGradient id=\"ramp\" x1=\"0\" y1=\"1\" x2=\"0\" y2=\"0\">\
         <stop offset=\"0\" stop-color=\"{}\"/><stop offset=\"1\" stop-color=\"{}\"/>\
         </linearGradient></defs>\n",
        lerp_color(ramp, 0.0),
        lerp_color(ramp, 1.0)
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{LEFT}\" y=\"18\" font-size=\"12\">{}</text>\n",
        xml_escape(title)
    ));

    // Cells: strip s-1 top row, band m-1 rightmost column.
    for strip in 0..s {
        for band in 0..m {
            let x = LEFT + band * CELL;
            let y = TOP + (s - 1 - strip) * CELL;
            match values[strip * m + band] {
                Some(v) => {
                    let t = if degenerate {
                        0.5
                    } else {
                        (v - vmin) / (vmax - vmin)
                    };
                    let fill = lerp_color(ramp, t);
                    svg.push_str(&format!(
                        "  <rect class=\"cell\" x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" \
                         fill=\"{fill}\" stroke=\"#444444\" stroke-width=\"1\">\
                         <title>strip {strip}, band {band}: {v}</title></rect>\n"
                    ));
                }
                None => {
                    svg.push_str(&format!(
                        "  <rect class=\"cell null\" x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" \
                         fill=\"#d9d9d9\" stroke=\"#444444\" stroke-width=\"1\">\
                         <title>strip {strip}, band {band}: null</title></rect>\n"
                    ));
                    svg.push_str(&format!(
                        "  <line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{}\" stroke=\"#888888\" stroke-width=\"1\"/>\n",
                        x + CELL,
                        y + CELL
                    ));
                }
            }
        }
    }

    // Axis labels.
    for strip in 0..s {
        let y = TOP + (s - 1 - strip) * CELL + CELL / 2 + 4;
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{y}\" text-anchor=\"end\">s{strip}</text>\n",
            LEFT - 6
        ));
    }
    for band in 0..m {
        let x = LEFT + band * CELL + CELL / 2;
        svg.push_str(&format!(
            "  <text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">b{band}</text>\n",
            TOP + s * CELL + 14
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">selectivity</text>\n",
        TOP + s * CELL / 2,
        TOP + s * CELL / 2
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">magnitude</text>\n",
        LEFT + m * CELL / 2,
        TOP + s * CELL + 30
    ));

    // Legend: vertical gradient bar with range labels.
    let lx = LEFT + m * CELL + 18;
    if degenerate {
        svg.push_str(&format!(
            "  <rect x=\"{lx}\" y=\"{TOP}\" width=\"14\" height=\"{}\" fill=\"{}\" stroke=\"#444444\"/>\n",
            s * CELL,
            lerp_color(ramp, 0.5)
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\">= {vmin} (uniform)</text>\n",
            lx + 20,
            TOP + s * CELL / 2 + 4
        ));
    } else {
        svg.push_str(&format!(
            "  <rect x=\"{lx}\" y=\"{TOP}\" width=\"14\" height=\"{}\" fill=\"url(#ramp)\" stroke=\"#444444\"/>\n",
            s * CELL
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\">{}</text>\n",
            lx + 20,
            TOP + 10,
            format_value(vmax)
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\">{}</text>\n",
            lx + 20,
            TOP + s * CELL,
            format_value(vmin)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn format_value(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.001 && v.abs() < 10000.0) {
        format!("{v:.4}")
    } else {
        format!("{v:.3e}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

type GridValues = Vec<Option<f64>>;

/// Gather `values[strip * m + band]` for one (class, layer, metric) grid.
fn grid_values(run: &TargetResults, layer: &str, s: usize, m: usize, metric: Metric) -> GridValues {
    let mut values = vec![None; s * m];
    for cell in &run.cells {
        if cell.layer == layer && cell.strip < s && cell.band < m {
            values[cell.strip * m + cell.band] = metric.value(cell);
        }
    }
    values
}

fn layers_of(run: &TargetResults) -> Vec<String> {
    let mut layers = Vec::new();
    for cell in &run.cells {
        if !layers.contains(&cell.layer) {
            layers.push(cell.layer.clone());
        }
    }
    layers
}

fn mean_of(grids: &[GridValues]) -> GridValues {
    if grids.is_empty() {
        return Vec::new();
    }
    let len = grids[0].len();
    (0..len)
        .map(|i| {
            let present: Vec<f64> = grids.iter().filter_map(|g| g[i]).collect();
            if present.is_empty() {
                None
            } else {
                Some(present.iter().sum::<f64>() / present.len() as f64)
            }
        })
        .collect()
}

fn range_of(grids: &[&GridValues]) -> (f64, f64) {
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for grid in grids {
        for v in grid.iter().flatten() {
            vmin = vmin.min(*v);
            vmax = vmax.max(*v);
        }
    }
    if vmin > vmax {
        (0.0, 0.0)
    } else {
        (vmin, vmax)
    }
}

/// Emit every SVG grid for the given runs under `dir/svg/<metric>/`.
///
/// Per (class, layer) grids share the class's color range; the per-class
/// average (over layers) reuses it; per-layer averages (over classes) are
/// normalized to their own range. Returns the written paths.
pub fn write_svgs(dir: &Path, runs: &[TargetResults], s: usize, m: usize) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for metric in Metric::ALL {
        let metric_dir = dir.join("svg").join(metric.as_str());
        fs::create_dir_all(&metric_dir)?;

        // Per-layer grid collections for the cross-class averages.
        let mut per_layer: BTreeMap<String, Vec<GridValues>> = BTreeMap::new();

        for run in runs {
            let layers = layers_of(run);
            let grids: Vec<(String, GridValues)> = layers
                .iter()
                .map(|layer| (layer.clone(), grid_values(run, layer, s, m, metric)))
                .collect();
            let class_range = range_of(&grids.iter().map(|(_, g)| g).collect::<Vec<_>>());
            for (layer, grid) in &grids {
                if grid.iter().any(|v| v.is_none()) {
                    log::warn!(
                        "grid ({}, {layer}, {}) has missing cells; rendered as null",
                        run.target_name,
                        metric.as_str()
                    );
                }
                let svg = render_grid_svg(
                    &format!("{} {} {}", run.target_name, layer, metric.as_str()),
                    s,
                    m,
                    grid,
                    class_range.0,
                    class_range.1,
                    metric,
                );
                let path = metric_dir.join(format!("{}__{}.svg", run.target_name, layer));
                fs::write(&path, svg)?;
                written.push(path);
                per_layer
                    .entry(layer.clone())
                    .or_default()
                    .push(grid.clone());
            }

            // Per-class average over layers.
            let avg = mean_of(&grids.iter().map(|(_, g)| g.clone()).collect::<Vec<_>>());
            if !avg.is_empty() {
                let range = range_of(&[&avg]);
                let svg = render_grid_svg(
                    &format!("{} avg {}", run.target_name, metric.as_str()),
                    s,
                    m,
                    &avg,
                    range.0,
                    range.1,
                    metric,
                );
                let path = metric_dir.join(format!("{}__avg.svg", run.target_name));
                fs::write(&path, svg)?;
                written.push(path);
            }
        }

        // Per-layer average over classes.
        for (layer, grids) in &per_layer {
            let avg = mean_of(grids);
            let range = range_of(&[&avg]);
            let svg = render_grid_svg(
                &format!("avg {layer} {}", metric.as_str()),
                s,
                m,
                &avg,
                range.0,
                range.1,
                metric,
            );
            let path = metric_dir.join(format!("avg__{layer}.svg"));
            fs::write(&path, svg)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::CellResult;

    fn fake_run(values: &[f64]) -> TargetResults {
        let mut cells = Vec::new();
        for strip in 0..4 {
            for band in 0..4 {
                let v = values[strip * 4 + band];
                cells.push(CellOutcome {
                    layer: "conv1".into(),
                    strip,
                    band,
                    result: Some(CellResult {
                        layer: "conv1".into(),
                        strip,
                        band,
                        mean_rank_deficit: v,
                        probe_accuracy: v / 10.0 + 0.05,
                        n_units: 1,
                        n_images_scored: 10,
                        n_images_probe: 2,
                    }),
                    error: None,
                });
            }
        }
        TargetResults {
            target_class: 0,
            target_name: "class_00".into(),
            cells,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let values: Vec<f64> = (0..16).map(|i| (i as f64) * 0.3125 - 1.7).collect();
        let runs = vec![fake_run(&values)];
        write_csv(&path, &runs).unwrap();
        let rows = read_csv(&path).unwrap();
        assert_eq!(rows.len(), 32);
        for cell in &runs[0].cells {
            let r = cell.result.as_ref().unwrap();
            let deficit_row = rows
                .iter()
                .find(|row| {
                    row.layer == "conv1"
                        && row.strip == cell.strip
                        && row.band == cell.band
                        && row.metric == "deficit"
                })
                .unwrap();
            assert_eq!(deficit_row.value, Some(r.mean_rank_deficit));
            assert_eq!(deficit_row.class, "class_00");
            let probe_row = rows
                .iter()
                .find(|row| {
                    row.strip == cell.strip && row.band == cell.band && row.metric == "probe"
                })
                .unwrap();
            assert_eq!(probe_row.value, Some(r.probe_accuracy));
        }
    }

    #[test]
    fn svg_has_exactly_s_times_m_cells() {
        let values: Vec<Option<f64>> = (0..16).map(|i| Some(i as f64)).collect();
        let svg = render_grid_svg("t", 4, 4, &values, 0.0, 15.0, Metric::Deficit);
        assert_eq!(svg.matches("class=\"cell\"").count(), 16);
        assert!(!svg.contains("http://") || svg.contains("xmlns"), "no external refs");
    }

    #[test]
    fn degenerate_range_renders_uniform_with_note() {
        let values: Vec<Option<f64>> = vec![Some(2.5); 16];
        let svg = render_grid_svg("t", 4, 4, &values, 2.5, 2.5, Metric::Probe);
        assert!(svg.contains("uniform"), "{svg}");
        // All cells share one fill color.
        let fills: std::collections::BTreeSet<&str> = svg
            .match_indices("class=\"cell\"")
            .map(|(i, _)| {
                let rest = &svg[i..];
                let start = rest.find("fill=\"").unwrap() + 6;
                &rest[start..start + 7]
            })
            .collect();
        assert_eq!(fills.len(), 1);
    }

    #[test]
    fn missing_cells_render_null() {
        let mut values: Vec<Option<f64>> = (0..16).map(|i| Some(i as f64)).collect();
        values[5] = None;
        let svg = render_grid_svg("t", 4, 4, &values, 0.0, 15.0, Metric::Deficit);
        assert_eq!(svg.matches("class=\"cell null\"").count(), 1);
        assert_eq!(svg.matches("class=\"cell").count(), 16);
    }

    #[test]
    fn top_strip_renders_as_top_row() {
        // strip 3 must sit at the smallest y coordinate.
        let mut values: Vec<Option<f64>> = vec![Some(0.0); 16];
        values[3 * 4] = Some(9.0);
        let svg = render_grid_svg("t", 4, 4, &values, 0.0, 9.0, Metric::Deficit);
        let marker = svg
            .lines()
            .find(|l| l.contains("strip 3, band 0"))
            .unwrap();
        let y = marker.split("y=\"").nth(1).unwrap();
        let y: usize = y[..y.find('"').unwrap()].parse().unwrap();
        assert_eq!(y, 34, "strip 3 at the top margin");
    }

    #[test]
    fn write_svgs_emits_grid_and_average_files() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let runs = vec![fake_run(&values)];
        let files = write_svgs(dir.path(), &runs, 4, 4).unwrap();
        // Two metrics x (1 class-layer grid + 1 class avg + 1 layer avg).
        assert_eq!(files.len(), 6);
        for f in &files {
            assert!(f.exists());
        }
        assert!(dir
            .path()
            .join("svg/deficit/class_00__conv1.svg")
            .exists());
        assert!(dir.path().join("svg/probe/avg__conv1.svg").exists());
    }
}
