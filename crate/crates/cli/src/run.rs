use std::fmt::Write as _;
use std::path::Path;

use dss_lab::analysis::{histograms_csv, summaries};
use dss_lab::uda::{export_dataset, run_experiment_detailed, DomainData, ExperimentOutput, TrainReport};
use dss_lab::Error;

use crate::analyze;
use crate::config::Loaded;
use crate::layout::{self, LayerEntry, LayerWeights, Manifest, RunEntry};
use crate::Failure;

/// Trains the whole grid in memory, then writes every artifact. Nothing is
/// written when training fails.
pub fn run(loaded: &Loaded, out: &Path, jobs: usize) -> Result<(), Failure> {
    let cfg = &loaded.file.experiment;
    let output = run_experiment_detailed(cfg, jobs).map_err(|e| match e {
        Error::NumericFailure(m) => Failure::numeric(format!("run {m}")),
        other => Failure::config(format!("run failed: {other}")),
    })?;

    write_outputs(loaded, out, &output).map_err(|e| Failure::config(format!("{}: {e}", out.display())))?;
    print!("{}", summary_table(&output.reports));
    for &mode in &loaded.file.analysis.after_run {
        analyze::analyze(out, mode)?;
    }
    Ok(())
}

fn write_outputs(loaded: &Loaded, out: &Path, output: &ExperimentOutput) -> dss_lab::Result<()> {
    let cfg = &loaded.file.experiment;
    let kinds: Vec<&str> = cfg
        .model
        .backbone
        .iter()
        .filter(|s| s.is_weight_bearing())
        .map(|s| s.name())
        .collect();
    let shapes: Vec<Vec<usize>> = output
        .weight_traces
        .first()
        .map(|t| t.snapshots[0].iter().map(|w| w.shape().to_vec()).collect())
        .unwrap_or_default();
    let mut manifest = Manifest {
        layers: kinds
            .iter()
            .zip(shapes)
            .enumerate()
            .map(|(layer, (kind, shape))| LayerEntry {
                layer,
                kind: kind.to_string(),
                shape,
            })
            .collect(),
        runs: Vec::new(),
    };

    for ((report, stats), trace) in output.reports.iter().zip(&output.grad_stats).zip(&output.weight_traces) {
        let stem = layout::stem(report.condition, report.seed);
        layout::write_file(&layout::report_path(out, &stem), layout::to_json(report))?;
        layout::write_file(&layout::histogram_path(out, &stem), histograms_csv(&stats.records))?;
        layout::write_file(&layout::summary_path(out, &stem), layout::to_json(&summaries(&stats.records)))?;
        if loaded.file.analysis.weight_snapshots {
            let layers: Vec<LayerWeights> = (0..manifest.layers.len())
                .map(|layer| LayerWeights {
                    layer,
                    shape: trace.snapshots[0][layer].shape().to_vec(),
                    snapshots: trace.snapshots.iter().map(|s| s[layer].data().to_vec()).collect(),
                })
                .collect();
            layout::write_file(&layout::weights_path(out, &stem), layout::to_json(&layers))?;
        }
        manifest.runs.push(RunEntry {
            condition: report.condition,
            seed: report.seed,
            config_digest: report.config_digest.clone(),
            stem,
        });
    }

    if loaded.file.analysis.export_datasets {
        let dir = out.join("datasets");
        std::fs::create_dir_all(&dir)?;
        for &seed in &cfg.seeds {
            let spec = cfg.data.spec(seed);
            let data = DomainData::generate(&spec, cfg.data.test_samples_per_class)?;
            let splits = [
                ("source_train", &data.source_train),
                ("target_train", &data.target_train),
                ("source_test", &data.source_test),
                ("target_test", &data.target_test),
            ];
            for (name, samples) in splits {
                let base = dir.join(format!("seed{seed}_{name}"));
                export_dataset(samples, &spec, &base.with_extension("bin"), &base.with_extension("json"))?;
            }
        }
    }
    layout::write_file(&out.join(layout::MANIFEST), layout::to_json(&manifest))?;
    Ok(())
}

/// Final source/target accuracy per condition and seed, with the mean
/// target accuracy per condition.
pub fn summary_table(reports: &[TrainReport]) -> String {
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut conditions = Vec::new();
    for r in reports {
        if !conditions.contains(&r.condition) {
            conditions.push(r.condition);
        }
    }
    let mut out = format!("{:<16}", "condition");
    for s in &seeds {
        let _ = write!(out, " {:>14}", format!("seed {s} src/tgt"));
    }
    out.push_str("  mean tgt\n");
    for c in conditions {
        let _ = write!(out, "{:<16}", c.name());
        let mut targets = Vec::new();
        for s in &seeds {
            match reports.iter().find(|r| r.condition == c && r.seed == *s) {
                Some(r) => {
                    targets.push(r.final_target_accuracy);
                    let cell = format!("{:.3}/{:.3}", r.final_source_accuracy, r.final_target_accuracy);
                    let _ = write!(out, " {cell:>14}");
                }
                None => {
                    let _ = write!(out, " {:>14}", "-");
                }
            }
        }
        let mean = targets.iter().sum::<f64>() / targets.len().max(1) as f64;
        let _ = writeln!(out, "  {mean:.3}");
    }
    out
}
