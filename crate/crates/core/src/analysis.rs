//! Gradient statistics, weight-direction traces and singular-value spectra.
//!
//! The gradient study compares a suppression run against its plain
//! counterpart layer by layer: per-step histograms on a shared axis and the
//! ratio of average gradient spread. Nothing here mutates a model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::equivalence::angle_between;
use crate::error::{Error, Result};
use crate::optim::{update_direction, DssConfig};
use crate::svd::{svd_small, MAX_SVD_DIM};
use crate::tensor::{frobenius_norm, inner_product, Tensor};
use crate::uda::Model;

/// Bins used for the per-layer gradient histograms.
pub const HISTOGRAM_BINS: usize = 60;
/// Histogram half-width in units of the baseline gradient std.
pub const HISTOGRAM_HALF_WIDTH_STDS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Uniform histogram over `[min, max)`. Values outside the range land in the
/// first or last bin.
pub fn build_histogram(values: &[f64], num_bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if num_bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::invalid(format!("histogram range ({lo}, {hi}) is not a finite increasing interval")));
    }
    let width = (hi - lo) / num_bins as f64;
    let mut edges: Vec<f64> = (0..num_bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);
    let mut counts = vec![0u64; num_bins];
    for &v in values {
        let pos = ((v - lo) / width).floor();
        // NaN compares false everywhere and falls into bin 0.
        let idx = if pos >= num_bins as f64 {
            num_bins - 1
        } else if pos > 0.0 {
            pos as usize
        } else {
            0
        };
        counts[idx] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Gradient statistics for one backbone layer at one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradStatsRecord {
    /// Position among the backbone's weight-bearing layers, 0 = shallowest.
    pub layer: usize,
    pub step: usize,
    pub histogram: Histogram,
    /// Population standard deviation of the gradient entries.
    pub std: f64,
    pub norm: f64,
    /// `⟨g, W⟩ / (‖g‖ ‖W‖)`, 0 when either norm vanishes.
    pub alignment: f64,
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Cosine between a gradient and its weight.
pub fn gradient_alignment(grad: &Tensor, weight: &Tensor) -> Result<f64> {
    let (gn, wn) = (frobenius_norm(grad)?, frobenius_norm(weight)?);
    if gn == 0.0 || wn == 0.0 {
        return Ok(0.0);
    }
    Ok((inner_product(grad, weight)? / (gn * wn)).clamp(-1.0, 1.0))
}

/// Update directions of the backbone's weight-bearing layers with their
/// weights, shallowest first.
fn backbone_gradients<'a>(model: &'a Model, dss: &DssConfig) -> Result<Vec<(Tensor, &'a Tensor)>> {
    model
        .backbone
        .layers
        .iter()
        .filter_map(|l| l.state.weight.as_ref())
        .map(|p| Ok((update_direction(p, dss)?, &p.weight)))
        .collect()
}

/// One record per weight-bearing backbone layer, binned over the symmetric
/// range `±half_widths[layer]`. The recorded gradient is the direction the
/// optimizer is about to apply, so suppressed layers report the suppressed
/// gradient. Must run after a backward pass and before the optimizer step
/// clears the gradients.
pub fn record_layer_gradients(
    model: &Model,
    dss: &DssConfig,
    step: usize,
    half_widths: &[f64],
) -> Result<Vec<GradStatsRecord>> {
    if !model.gradients_fresh() {
        return Err(Error::state("no backward pass has populated gradients for this step"));
    }
    let grads = backbone_gradients(model, dss)?;
    if half_widths.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} histogram ranges for {} weight layers",
            half_widths.len(),
            grads.len()
        )));
    }
    grads
        .into_iter()
        .zip(half_widths)
        .enumerate()
        .map(|(layer, ((g, w), &hw))| {
            Ok(GradStatsRecord {
                layer,
                step,
                histogram: build_histogram(g.data(), HISTOGRAM_BINS, (-hw, hw))?,
                std: population_std(g.data()),
                norm: frobenius_norm(&g)?,
                alignment: gradient_alignment(&g, w)?,
            })
        })
        .collect()
}

/// Collects backbone gradients every `every` steps during training and bins
/// them once the histogram ranges are known.
#[derive(Debug, Clone)]
pub struct GradientRecorder {
    every: usize,
    samples: Vec<RawSample>,
}

#[derive(Debug, Clone)]
struct RawSample {
    step: usize,
    grads: Vec<Tensor>,
    alignment: Vec<f64>,
}

impl GradientRecorder {
    pub fn new(every: usize) -> Self {
        GradientRecorder {
            every: every.max(1),
            samples: Vec::new(),
        }
    }

    /// Copies the current update directions if `step` is on the recording grid.
    pub fn observe(&mut self, model: &Model, dss: &DssConfig, step: usize) -> Result<()> {
        if step % self.every != 0 {
            return Ok(());
        }
        if !model.gradients_fresh() {
            return Err(Error::state("no backward pass has populated gradients for this step"));
        }
        let pairs = backbone_gradients(model, dss)?;
        let alignment = pairs
            .iter()
            .map(|(g, w)| gradient_alignment(g, w))
            .collect::<Result<Vec<_>>>()?;
        self.samples.push(RawSample {
            step,
            grads: pairs.into_iter().map(|(g, _)| g).collect(),
            alignment,
        });
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Average over recorded steps of each layer's gradient std.
    pub fn mean_std(&self) -> Vec<f64> {
        let Some(first) = self.samples.first() else { return Vec::new() };
        let mut acc = vec![0.0; first.grads.len()];
        for s in &self.samples {
            for (a, g) in acc.iter_mut().zip(&s.grads) {
                *a += population_std(g.data());
            }
        }
        acc.iter().map(|a| a / self.samples.len() as f64).collect()
    }

    /// Bins every recorded step over `±HISTOGRAM_HALF_WIDTH_STDS · reference_std[layer]`.
    /// A zero reference falls back to a unit half-width.
    pub fn finish(&self, reference_std: &[f64]) -> Result<Vec<GradStatsRecord>> {
        let half: Vec<f64> = reference_std
            .iter()
            .map(|&s| if s > 0.0 { HISTOGRAM_HALF_WIDTH_STDS * s } else { 1.0 })
            .collect();
        let mut out = Vec::new();
        for s in &self.samples {
            if s.grads.len() != half.len() {
                return Err(Error::invalid("reference std count differs from recorded layer count"));
            }
            for (layer, (g, &hw)) in s.grads.iter().zip(&half).enumerate() {
                out.push(GradStatsRecord {
                    layer,
                    step: s.step,
                    histogram: build_histogram(g.data(), HISTOGRAM_BINS, (-hw, hw))?,
                    std: population_std(g.data()),
                    norm: frobenius_norm(g)?,
                    alignment: s.alignment[layer],
                });
            }
        }
        Ok(out)
    }
}

/// Mean gradient std of `layer` under suppression divided by the same for
/// the baseline. Both streams must cover the same steps.
pub fn amplification_ratio(run_dss: &[GradStatsRecord], run_base: &[GradStatsRecord], layer: usize) -> Result<f64> {
    let pick = |records: &[GradStatsRecord]| -> Vec<(usize, f64)> {
        records.iter().filter(|r| r.layer == layer).map(|r| (r.step, r.std)).collect()
    };
    let (dss, base) = (pick(run_dss), pick(run_base));
    if dss.is_empty() || base.is_empty() {
        return Err(Error::invalid(format!("layer {layer} missing from a record stream")));
    }
    let steps = |v: &[(usize, f64)]| v.iter().map(|x| x.0).collect::<Vec<_>>();
    if steps(&dss) != steps(&base) {
        return Err(Error::invalid(format!("record streams cover different steps for layer {layer}")));
    }
    let mean = |v: &[(usize, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    let base_std = mean(&base);
    if base_std == 0.0 {
        return Err(Error::UndefinedRatio(format!("baseline gradient std of layer {layer} is zero")));
    }
    Ok(mean(&dss) / base_std)
}

/// How a weight's direction moves over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionTrace {
    pub layer: usize,
    /// `cos(Wᵗ, W⁰)` for t = 1, 2, …
    pub cosine_to_initial: Vec<f64>,
    /// Angle between `Wᵗ` and `Wᵗ⁺¹` for t = 0, 1, …
    pub step_angle: Vec<f64>,
}

/// Direction trace of a sequence of weight snapshots. Only directions
/// matter: rescaling any snapshot by a positive factor leaves the trace
/// unchanged.
pub fn direction_drift(layer: usize, snapshots: &[Tensor]) -> Result<DirectionTrace> {
    if snapshots.len() < 2 {
        return Err(Error::invalid("direction_drift needs at least two snapshots"));
    }
    let units = snapshots
        .iter()
        .map(|w| {
            if w.shape() != snapshots[0].shape() {
                return Err(Error::invalid("snapshots differ in shape"));
            }
            let n = frobenius_norm(w)?;
            if n == 0.0 {
                return Err(Error::numeric("zero-norm weight snapshot"));
            }
            w.scale(1.0 / n)
        })
        .collect::<Result<Vec<_>>>()?;
    let cosine_to_initial = units[1..]
        .iter()
        .map(|u| inner_product(u, &units[0]).map(|c| c.clamp(-1.0, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    let step_angle = units
        .windows(2)
        .map(|w| angle_between(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(DirectionTrace {
        layer,
        cosine_to_initial,
        step_angle,
    })
}

/// Singular values of `weight` viewed as a `rows × cols` matrix.
pub fn svd_spectrum_report(weight: &Tensor, rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows * cols != weight.len() {
        return Err(Error::invalid(format!(
            "cannot view {} elements as {rows}x{cols}",
            weight.len()
        )));
    }
    if rows > MAX_SVD_DIM || cols > MAX_SVD_DIM {
        return Err(Error::invalid(format!("spectrum view {rows}x{cols} exceeds {MAX_SVD_DIM}x{MAX_SVD_DIM}")));
    }
    Ok(svd_small(&weight.reshape(&[rows, cols])?)?.sigma)
}

/// `layer,step,bin_left,bin_right,count` rows.
pub fn histograms_csv(records: &[GradStatsRecord]) -> String {
    let mut out = String::from("layer,step,bin_left,bin_right,count\n");
    for r in records {
        let h = &r.histogram;
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{}", r.layer, r.step, h.edges[i], h.edges[i + 1], c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSummary {
    pub layer: usize,
    pub step: usize,
    pub std: f64,
    pub norm: f64,
    pub alignment: f64,
}

pub fn summaries(records: &[GradStatsRecord]) -> Vec<GradSummary> {
    records
        .iter()
        .map(|r| GradSummary {
            layer: r.layer,
            step: r.step,
            std: r.std,
            norm: r.norm,
            alignment: r.alignment,
        })
        .collect()
}

/// Parses the CSV written by [`histograms_csv`] back into records, joining
/// the per-step summaries for std, norm and alignment.
pub fn parse_records(csv: &str, summary: &[GradSummary]) -> Result<Vec<GradStatsRecord>> {
    let mut out: Vec<GradStatsRecord> = Vec::new();
    for (lineno, line) in csv.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::invalid(format!("histogram csv line {}: malformed row", lineno + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let layer: usize = f[0].parse().map_err(|_| bad())?;
        let step: usize = f[1].parse().map_err(|_| bad())?;
        let left: f64 = f[2].parse().map_err(|_| bad())?;
        let right: f64 = f[3].parse().map_err(|_| bad())?;
        let count: u64 = f[4].parse().map_err(|_| bad())?;
        match out.last_mut() {
            Some(r) if r.layer == layer && r.step == step => {
                r.histogram.edges.push(right);
                r.histogram.counts.push(count);
            }
            _ => {
                let s = summary
                    .iter()
                    .find(|s| s.layer == layer && s.step == step)
                    .ok_or_else(|| Error::invalid(format!("no summary for layer {layer} step {step}")))?;
                out.push(GradStatsRecord {
                    layer,
                    step,
                    histogram: Histogram {
                        edges: vec![left, right],
                        counts: vec![count],
                    },
                    std: s.std,
                    norm: s.norm,
                    alignment: s.alignment,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(layer: usize, step: usize, std: f64) -> GradStatsRecord {
        GradStatsRecord {
            layer,
            step,
            histogram: build_histogram(&[0.0], 2, (-1.0, 1.0)).unwrap(),
            std,
            norm: std,
            alignment: 0.0,
        }
    }

    #[test]
    fn hand_binned_example() {
        let h = build_histogram(&[-1.0, 0.0, 1.0], 3, (-1.5, 1.5)).unwrap();
        assert_eq!(h.counts, vec![1, 1, 1]);
        assert_eq!(h.edges, vec![-1.5, -0.5, 0.5, 1.5]);
    }

    #[test]
    fn empty_and_identical_inputs() {
        let h = build_histogram(&[], 4, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![0; 4]);
        let h = build_histogram(&[0.3; 17], 5, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![0, 17, 0, 0, 0]);
    }

    #[test]
    fn out_of_range_values_are_clipped() {
        let h = build_histogram(&[-10.0, 10.0, 1.0], 2, (-1.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![1, 2]);
    }

    #[test]
    fn invalid_histogram_arguments() {
        assert!(build_histogram(&[1.0], 0, (0.0, 1.0)).is_err());
        assert!(build_histogram(&[1.0], 3, (1.0, 1.0)).is_err());
        assert!(build_histogram(&[1.0], 3, (2.0, 1.0)).is_err());
    }

    #[test]
    fn ratio_examples() {
        let base: Vec<_> = (0..5).map(|s| record(0, s, 0.1 + s as f64 * 0.01)).collect();
        assert_eq!(amplification_ratio(&base, &base, 0).unwrap(), 1.0);
        let doubled: Vec<_> = base.iter().map(|r| record(r.layer, r.step, 2.0 * r.std)).collect();
        assert!((amplification_ratio(&doubled, &base, 0).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn ratio_errors() {
        let base = vec![record(0, 0, 0.0)];
        let dss = vec![record(0, 0, 1.0)];
        assert!(matches!(amplification_ratio(&dss, &base, 0), Err(Error::UndefinedRatio(_))));
        let other = vec![record(0, 1, 1.0)];
        assert!(matches!(amplification_ratio(&other, &dss, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(amplification_ratio(&dss, &dss, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn drift_examples() {
        let t = direction_drift(0, &vec![Tensor::from_slice(&[1.0, 0.0]); 3]).unwrap();
        assert_eq!(t.cosine_to_initial, vec![1.0, 1.0]);
        assert_eq!(t.step_angle, vec![0.0, 0.0]);

        let t = direction_drift(0, &[Tensor::from_slice(&[1.0, 0.0]), Tensor::from_slice(&[0.0, 1.0])]).unwrap();
        assert_eq!(t.cosine_to_initial, vec![0.0]);
        assert!((t.step_angle[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);

        let scaled = [1.0, 2.0, 3.0].map(|c| Tensor::from_slice(&[c, 0.0]));
        let unit = [1.0; 3].map(|c| Tensor::from_slice(&[c, 0.0]));
        assert_eq!(direction_drift(0, &scaled).unwrap(), direction_drift(0, &unit).unwrap());
    }

    #[test]
    fn drift_errors() {
        assert!(direction_drift(0, &[Tensor::from_slice(&[1.0])]).is_err());
        let z = [Tensor::from_slice(&[1.0, 0.0]), Tensor::from_slice(&[0.0, 0.0])];
        assert!(matches!(direction_drift(0, &z), Err(Error::NumericFailure(_))));
    }

    #[test]
    fn spectrum_examples() {
        let id = Tensor::from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let s = svd_spectrum_report(&id, 2, 2).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15 && (s[1] - 1.0).abs() < 1e-15);

        // u = [1, 2], v = [2, 0, 1]: one singular value, ‖u‖‖v‖ = √5·√5 = 5
        let outer = Tensor::from_slice(&[2.0, 0.0, 1.0, 4.0, 0.0, 2.0]);
        let s = svd_spectrum_report(&outer, 2, 3).unwrap();
        assert!((s[0] - 5.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);

        assert!(svd_spectrum_report(&outer, 4, 2).is_err());
        let s = svd_spectrum_report(&Tensor::from_slice(&[-3.5]), 1, 1).unwrap();
        assert_eq!(s, vec![3.5]);
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![
            GradStatsRecord {
                layer: 0,
                step: 4,
                histogram: build_histogram(&[0.1, -0.2, 0.3], 3, (-0.5, 0.5)).unwrap(),
                std: 0.2,
                norm: 0.37,
                alignment: -0.1,
            },
            record(1, 4, 0.5),
        ];
        let csv = histograms_csv(&recs);
        assert!(csv.starts_with("layer,step,bin_left,bin_right,count\n"));
        assert_eq!(parse_records(&csv, &summaries(&recs)).unwrap(), recs);
    }
}
