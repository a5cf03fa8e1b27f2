use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dss_lab::analysis::{amplification_ratio, direction_drift, parse_records, svd_spectrum_report, GradStatsRecord, GradSummary};
use dss_lab::svd::MAX_SVD_DIM;
use dss_lab::uda::Condition;
use dss_lab::Tensor;
use serde::Serialize;

use crate::config::AnalyzeMode;
use crate::layout::{self, LayerWeights, Manifest, RunEntry};
use crate::Failure;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read(path)?).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn load_manifest(dir: &Path) -> Result<Manifest, Failure> {
    let path = dir.join(layout::MANIFEST);
    if !path.is_file() {
        return Err(Failure::config(format!("{}: no recorded runs (missing {})", dir.display(), layout::MANIFEST)));
    }
    let manifest: Manifest = parse(&path)?;
    if manifest.runs.is_empty() {
        return Err(Failure::config(format!("{}: manifest lists no runs", path.display())));
    }
    Ok(manifest)
}

fn load_records(dir: &Path, run: &RunEntry) -> Result<Vec<GradStatsRecord>, Failure> {
    let csv = read(&layout::histogram_path(dir, &run.stem))?;
    let summary: Vec<GradSummary> = parse(&layout::summary_path(dir, &run.stem))?;
    parse_records(&csv, &summary).map_err(|e| Failure::config(format!("{}: {e}", run.stem)))
}

fn load_weights(dir: &Path, run: &RunEntry) -> Result<Vec<LayerWeights>, Failure> {
    parse(&layout::weights_path(dir, &run.stem))
}

fn tensor(shape: &[usize], values: &[f64], what: &str) -> Result<Tensor, Failure> {
    Tensor::new(shape.to_vec(), values.to_vec()).map_err(|e| Failure::config(format!("{what}: {e}")))
}

fn write(dir: &Path, file: &str, contents: String) -> Result<(), Failure> {
    let path = layout::analysis_path(dir, file);
    layout::write_file(&path, contents).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Writes the artifacts of one analysis mode under `dir/analysis/`.
/// Inputs are read through the manifest only, so outputs depend on nothing
/// but the recorded runs.
pub fn analyze(dir: &Path, mode: AnalyzeMode) -> Result<(), Failure> {
    let manifest = load_manifest(dir)?;
    match mode {
        AnalyzeMode::Histograms => histograms(dir, &manifest),
        AnalyzeMode::Ratios => ratios(dir, &manifest),
        AnalyzeMode::Drift => drift(dir, &manifest),
        AnalyzeMode::Svd => svd(dir, &manifest),
    }
}

/// Per-layer histograms summed over the recorded steps of each run.
fn histograms(dir: &Path, manifest: &Manifest) -> Result<(), Failure> {
    let mut out = String::from("condition,seed,layer,bin_left,bin_right,count\n");
    for run in &manifest.runs {
        let records = load_records(dir, run)?;
        let mut layers: Vec<usize> = records.iter().map(|r| r.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        for layer in layers {
            let mut picked = records.iter().filter(|r| r.layer == layer);
            let first = picked.next().expect("layer came from the records");
            let mut counts = first.histogram.counts.clone();
            for r in picked {
                if r.histogram.edges != first.histogram.edges {
                    return Err(Failure::config(format!("{}: layer {layer} histograms use different axes", run.stem)));
                }
                for (c, k) in counts.iter_mut().zip(&r.histogram.counts) {
                    *c += k;
                }
            }
            let edges = &first.histogram.edges;
            for (i, c) in counts.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{layer},{},{},{c}",
                    run.condition.name(),
                    run.seed,
                    edges[i],
                    edges[i + 1]
                );
            }
        }
    }
    write(dir, "histograms.csv", out)
}

#[derive(Serialize)]
struct RatioRow {
    condition: Condition,
    baseline: Condition,
    seed: u64,
    layer: usize,
    /// `null` when the baseline spread is zero.
    ratio: Option<f64>,
}

/// Amplification ratio of every suppressed run against its plain
/// counterpart, per layer.
fn ratios(dir: &Path, manifest: &Manifest) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for run in manifest.runs.iter().filter(|r| r.condition.suppressed()) {
        let baseline = run.condition.baseline();
        let Some(base) = manifest.runs.iter().find(|b| b.condition == baseline && b.seed == run.seed) else {
            continue;
        };
        let (dss, plain) = (load_records(dir, run)?, load_records(dir, base)?);
        for l in &manifest.layers {
            let ratio = match amplification_ratio(&dss, &plain, l.layer) {
                Ok(r) => Some(r),
                Err(dss_lab::Error::UndefinedRatio(_)) => None,
                Err(e) => return Err(Failure::config(format!("{}: {e}", run.stem))),
            };
            rows.push(RatioRow {
                condition: run.condition,
                baseline,
                seed: run.seed,
                layer: l.layer,
                ratio,
            });
        }
    }
    if rows.is_empty() {
        return Err(Failure::config(format!(
            "{}: no suppressed run has its plain counterpart recorded",
            dir.display()
        )));
    }
    print!("{}", ratio_table(&rows, manifest));
    write(dir, "ratios.json", layout::to_json(&rows))
}

fn ratio_table(rows: &[RatioRow], manifest: &Manifest) -> String {
    let fmt = |r: Option<f64>| r.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    let mut out = String::new();
    let _ = write!(out, "{:<16} {:>5}", "condition", "seed");
    for l in &manifest.layers {
        let _ = write!(out, " {:>10}", format!("L{} {}", l.layer, short_kind(&l.kind)));
    }
    out.push('\n');
    let mut keys: Vec<(Condition, u64)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.condition, r.seed)) {
            keys.push((r.condition, r.seed));
        }
    }
    for &(c, s) in &keys {
        let _ = write!(out, "{:<16} {s:>5}", c.name());
        for r in rows.iter().filter(|r| r.condition == c && r.seed == s) {
            let _ = write!(out, " {:>10}", fmt(r.ratio));
        }
        out.push('\n');
    }

    let shallow = manifest.layers.first().map(|l| l.layer);
    let deep = manifest.deepest_conv();
    let mut conditions: Vec<Condition> = keys.iter().map(|k| k.0).collect();
    conditions.dedup();
    for c in conditions {
        let of = |layer: Option<usize>| -> Vec<Option<f64>> {
            rows.iter()
                .filter(|r| r.condition == c && Some(r.layer) == layer)
                .map(|r| r.ratio)
                .collect()
        };
        let (sh, dp) = (of(shallow), of(deep));
        let above = sh.iter().filter(|r| r.is_some_and(|v| v > 1.0)).count();
        let below = dp.iter().filter(|r| r.is_some_and(|v| v < 1.0)).count();
        let _ = writeln!(
            out,
            "{} vs {}: shallow layer {} ratio > 1 in {above}/{} seeds, deep layer {} ratio < 1 in {below}/{} seeds",
            c.name(),
            c.baseline().name(),
            shallow.unwrap_or(0),
            sh.len(),
            deep.unwrap_or(0),
            dp.len()
        );
    }
    out
}

fn short_kind(kind: &str) -> &str {
    match kind {
        "conv2d" => "conv",
        "linear" => "lin",
        other => other,
    }
}

#[derive(Serialize)]
struct DriftRow {
    condition: Condition,
    seed: u64,
    #[serde(flatten)]
    trace: dss_lab::analysis::DirectionTrace,
}

/// Direction traces of every backbone weight over the recorded epochs.
fn drift(dir: &Path, manifest: &Manifest) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for run in &manifest.runs {
        for lw in load_weights(dir, run)? {
            let what = format!("{} layer {}", run.stem, lw.layer);
            let snaps = lw
                .snapshots
                .iter()
                .map(|s| tensor(&lw.shape, s, &what))
                .collect::<Result<Vec<_>, _>>()?;
            let trace = direction_drift(lw.layer, &snaps).map_err(|e| Failure::config(format!("{what}: {e}")))?;
            rows.push(DriftRow {
                condition: run.condition,
                seed: run.seed,
                trace,
            });
        }
    }
    write(dir, "drift.json", layout::to_json(&rows))
}

#[derive(Serialize)]
struct SpectrumRow {
    condition: Condition,
    seed: u64,
    layer: usize,
    /// `initial` or `final`.
    snapshot: &'static str,
    /// Top-left corner of the block within the `out × rest` matrix view.
    row_offset: usize,
    col_offset: usize,
    rows: usize,
    cols: usize,
    sigma: Vec<f64>,
}

/// Views a weight as `shape[0] × rest` and splits it into blocks no larger
/// than the SVD limit.
fn blocks(shape: &[usize], values: &[f64]) -> Vec<(usize, usize, usize, usize, Vec<f64>)> {
    let rows = shape.first().copied().unwrap_or(1).max(1);
    let cols = values.len() / rows;
    let mut out = Vec::new();
    for r0 in (0..rows).step_by(MAX_SVD_DIM) {
        let nr = MAX_SVD_DIM.min(rows - r0);
        for c0 in (0..cols).step_by(MAX_SVD_DIM) {
            let nc = MAX_SVD_DIM.min(cols - c0);
            let block = (r0..r0 + nr)
                .flat_map(|r| values[r * cols + c0..r * cols + c0 + nc].iter().copied())
                .collect();
            out.push((r0, c0, nr, nc, block));
        }
    }
    out
}

/// Singular values of the initial and final weights, block by block.
fn svd(dir: &Path, manifest: &Manifest) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for run in &manifest.runs {
        for lw in load_weights(dir, run)? {
            let (Some(first), Some(last)) = (lw.snapshots.first(), lw.snapshots.last()) else {
                return Err(Failure::config(format!("{} layer {}: no weight snapshots", run.stem, lw.layer)));
            };
            for (snapshot, values) in [("initial", first), ("final", last)] {
                let what = format!("{} layer {}", run.stem, lw.layer);
                tensor(&lw.shape, values, &what)?;
                for (row_offset, col_offset, nr, nc, block) in blocks(&lw.shape, values) {
                    let sigma = svd_spectrum_report(&Tensor::from_slice(&block), nr, nc)
                        .map_err(|e| Failure::numeric(format!("{what}: {e}")))?;
                    rows.push(SpectrumRow {
                        condition: run.condition,
                        seed: run.seed,
                        layer: lw.layer,
                        snapshot,
                        row_offset,
                        col_offset,
                        rows: nr,
                        cols: nc,
                        sigma,
                    });
                }
            }
        }
    }
    write(dir, "svd.json", layout::to_json(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_tile_the_matrix_view() {
        let values: Vec<f64> = (0..40 * 3).map(f64::from).collect();
        let b = blocks(&[40, 3], &values);
        assert_eq!(b.len(), 3);
        assert_eq!((b[2].0, b[2].2, b[2].3), (32, 8, 3));
        assert_eq!(b[1].4[0], 16.0 * 3.0);
        let total: usize = b.iter().map(|x| x.4.len()).sum();
        assert_eq!(total, values.len());
    }

    #[test]
    fn one_element_weight_is_one_block() {
        let b = blocks(&[1], &[-2.5]);
        assert_eq!(b, vec![(0, 0, 1, 1, vec![-2.5])]);
    }
}
