use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{shuffled_indices, stack_images, DomainData, DomainSample, DomainShift, SyntheticDomainSpec};
use super::model::{Model, ModelSpec};
use crate::analysis::{GradStatsRecord, GradientRecorder};
use crate::error::{Error, Result};
use crate::nn::softmax_cross_entropy;
use crate::optim::{DssConfig, WeightMode};
use crate::tensor::Tensor;

/// One cell of the condition grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "source-only")]
    SourceOnly,
    #[serde(rename = "source-only+dss")]
    SourceOnlyDss,
    #[serde(rename = "uda")]
    Uda,
    #[serde(rename = "uda+dss")]
    UdaDss,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::SourceOnly,
        Condition::SourceOnlyDss,
        Condition::Uda,
        Condition::UdaDss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::SourceOnly => "source-only",
            Condition::SourceOnlyDss => "source-only+dss",
            Condition::Uda => "uda",
            Condition::UdaDss => "uda+dss",
        }
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Condition::Uda | Condition::UdaDss)
    }

    pub fn suppressed(self) -> bool {
        matches!(self, Condition::SourceOnlyDss | Condition::UdaDss)
    }

    /// The same condition without suppression.
    pub fn baseline(self) -> Condition {
        match self {
            Condition::SourceOnlyDss => Condition::SourceOnly,
            Condition::UdaDss => Condition::Uda,
            other => other,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown condition {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    SourceOnly,
    Uda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Adapt,
}

/// Synthetic data shape; the generator seed is the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub shift: DomainShift,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 4,
            samples_per_class: 64,
            test_samples_per_class: 32,
            shift: DomainShift {
                brightness_offset: 0.3,
                contrast_scale: 0.6,
                noise_std: 0.15,
                hue_rotation: 1.2,
            },
        }
    }
}

impl DataConfig {
    pub fn spec(&self, seed: u64) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            num_classes: self.num_classes,
            samples_per_class: self.samples_per_class,
            shift: self.shift,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelSpec,
    /// `backbone_mode` is chosen per condition by the runner.
    pub dss: DssConfig,
    /// Backbone weight mode in the `+dss` conditions.
    pub suppression_mode: WeightMode,
    pub pretrain_source: bool,
    pub pretrain_epochs: usize,
    pub adapt: bool,
    pub adapt_epochs: usize,
    /// Per domain.
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub conditions: Vec<Condition>,
    /// Final gradient-reversal strength; it ramps linearly from 0 over the
    /// adaptation phase.
    pub grl_alpha_max: f64,
    pub domain_loss_weight: f64,
    /// Keep backbone batchnorm on its pretrained running statistics while
    /// adapting.
    pub freeze_bn_stats_in_adapt: bool,
    /// Gradient snapshot interval (optimizer steps) in the last phase.
    pub record_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelSpec::default(),
            dss: DssConfig::default(),
            suppression_mode: WeightMode::WeightNorm,
            pretrain_source: true,
            pretrain_epochs: 10,
            adapt: true,
            adapt_epochs: 10,
            batch_size: 2,
            seeds: vec![1, 2, 3],
            conditions: Condition::ALL.to_vec(),
            grl_alpha_max: 1.0,
            domain_loss_weight: 1.0,
            freeze_bn_stats_in_adapt: false,
            record_every: 32,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "batch_size must be at least 2 for batchnorm, got {}",
                self.batch_size
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.conditions.is_empty() {
            return Err(Error::invalid("at least one condition is required"));
        }
        if !self.pretrain_source && !self.adapt {
            return Err(Error::invalid("both training phases are disabled"));
        }
        if !(self.grl_alpha_max.is_finite() && self.grl_alpha_max >= 0.0) {
            return Err(Error::invalid("grl_alpha_max must be finite and non-negative"));
        }
        if !(self.domain_loss_weight.is_finite() && self.domain_loss_weight >= 0.0) {
            return Err(Error::invalid("domain_loss_weight must be finite and non-negative"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every must be positive"));
        }
        self.data.spec(0).validate()?;
        if self.data.test_samples_per_class == 0 {
            return Err(Error::invalid("test_samples_per_class must be positive"));
        }
        if self.data.samples_per_class * self.data.num_classes < self.batch_size {
            return Err(Error::invalid("fewer training samples than one batch"));
        }
        self.model.validate()?;
        self.dss.validate()
    }

    /// SHA-256 over the canonical JSON of the config and the condition name.
    pub fn digest(&self, condition: Condition) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        h.update(condition.name().as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    /// Optimizer settings for one condition.
    pub fn dss_for(&self, condition: Condition) -> DssConfig {
        DssConfig {
            backbone_mode: Some(if condition.suppressed() {
                self.suppression_mode
            } else {
                WeightMode::Plain
            }),
            ..self.dss.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub task_loss: f64,
    /// Present in uda mode only.
    pub domain_loss: Option<f64>,
    pub dss_fallbacks: usize,
}

/// Mutable per-run training state besides the model.
pub struct EpochContext {
    pub dss: DssConfig,
    pub batch_size: usize,
    pub domain_loss_weight: f64,
    source_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
    /// Gradient-reversal strength at the first and last step of the epoch.
    pub alpha: (f64, f64),
    /// Optimizer steps taken so far.
    pub step: usize,
    pub recorder: Option<GradientRecorder>,
}

impl EpochContext {
    pub fn new(dss: DssConfig, batch_size: usize, domain_loss_weight: f64, seed: u64) -> Self {
        EpochContext {
            dss,
            batch_size,
            domain_loss_weight,
            source_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5352_4300),
            target_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5447_5400),
            alpha: (0.0, 0.0),
            step: 0,
            recorder: None,
        }
    }
}

fn labels_of(samples: &[&DomainSample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::invalid("source training sample without a label")))
        .collect()
}

fn batch_failure(batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NumericFailure(msg) => Error::numeric(format!("batch {batch}: {msg}")),
        other => other,
    }
}

/// Domain cross-entropy for one domain's share of a batch, with the gradient
/// scaled so the two halves add up to the mean over both domains.
fn domain_half(logits: &Tensor, label: usize, share: f64, weight: f64) -> Result<(f64, Tensor)> {
    let n = logits.shape()[0];
    let (loss, grad) = softmax_cross_entropy(logits, &vec![label; n])?;
    Ok((loss * share, grad.scale(share * weight)?))
}

/// One pass over the source training set in batches of `ctx.batch_size`
/// (the incomplete tail is dropped). In uda mode every source batch is
/// paired with a target batch that only feeds the discriminator.
pub fn train_epoch(model: &mut Model, data: &DomainData, mode: TrainMode, ctx: &mut EpochContext) -> Result<EpochLosses> {
    let bs = ctx.batch_size;
    if bs < 2 {
        return Err(Error::invalid("batch size must be at least 2"));
    }
    if data.source_train.len() < bs {
        return Err(Error::invalid("source training data holds less than one batch"));
    }
    if mode == TrainMode::Uda && data.target_train.len() < bs {
        return Err(Error::invalid("target training data holds less than one batch"));
    }
    let source_order = shuffled_indices(data.source_train.len(), &mut ctx.source_rng);
    let target_order = match mode {
        TrainMode::Uda => shuffled_indices(data.target_train.len(), &mut ctx.target_rng),
        TrainMode::SourceOnly => Vec::new(),
    };
    let batches = source_order.len() / bs;
    let (mut task_sum, mut domain_sum, mut fallbacks) = (0.0, 0.0, 0);

    for b in 0..batches {
        let fail = batch_failure(b);
        let src: Vec<&DomainSample> = source_order[b * bs..(b + 1) * bs]
            .iter()
            .map(|&i| &data.source_train[i])
            .collect();
        let x_s = stack_images(&src)?;
        let y_s = labels_of(&src)?;

        let features = model.backbone.forward(&x_s, true).map_err(&fail)?;
        let logits = model.head.forward(&features, true).map_err(&fail)?;
        let (task_loss, g_logits) = softmax_cross_entropy(&logits, &y_s).map_err(&fail)?;
        let mut g_features = model.head.backward(&g_logits).map_err(&fail)?;

        if mode == TrainMode::Uda {
            let alpha = ctx.alpha.0 + (ctx.alpha.1 - ctx.alpha.0) * b as f64 / batches as f64;
            model.discriminator.set_grl_alpha(alpha);
            let share = 0.5;

            let d_s = model.discriminator.forward(&features, true).map_err(&fail)?;
            let (loss_s, g_d_s) = domain_half(&d_s, 0, share, ctx.domain_loss_weight).map_err(&fail)?;
            let g_back = model.discriminator.backward(&g_d_s).map_err(&fail)?;
            g_features = g_features.add(&g_back)?;
            model.backbone.backward(&g_features).map_err(&fail)?;

            let tgt: Vec<&DomainSample> = (0..bs)
                .map(|k| &data.target_train[target_order[(b * bs + k) % target_order.len()]])
                .collect();
            let features_t = model.backbone.forward(&stack_images(&tgt)?, true).map_err(&fail)?;
            let d_t = model.discriminator.forward(&features_t, true).map_err(&fail)?;
            let (loss_t, g_d_t) = domain_half(&d_t, 1, share, ctx.domain_loss_weight).map_err(&fail)?;
            let g_back_t = model.discriminator.backward(&g_d_t).map_err(&fail)?;
            model.backbone.backward(&g_back_t).map_err(&fail)?;
            domain_sum += loss_s + loss_t;
        } else {
            model.backbone.backward(&g_features).map_err(&fail)?;
        }
        model.gradients_fresh = true;

        if let Some(rec) = ctx.recorder.as_mut() {
            rec.observe(model, &ctx.dss, ctx.step)?;
        }
        fallbacks += model.step(&ctx.dss).map_err(&fail)?;
        ctx.step += 1;
        task_sum += task_loss;
    }

    Ok(EpochLosses {
        task_loss: task_sum / batches as f64,
        domain_loss: (mode == TrainMode::Uda).then(|| domain_sum / batches as f64),
        dss_fallbacks: fallbacks,
    })
}

/// Anything that maps samples to class predictions.
pub trait Classifier {
    fn classify(&mut self, samples: &[DomainSample]) -> Result<Vec<usize>>;
}

impl Classifier for Model {
    fn classify(&mut self, samples: &[DomainSample]) -> Result<Vec<usize>> {
        self.predict(samples, 64)
    }
}

/// Fraction of labeled `samples` the classifier gets right.
pub fn evaluate_accuracy(model: &mut impl Classifier, samples: &[DomainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty sample list"));
    }
    let labels = samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::invalid("evaluation sample without a label")))
        .collect::<Result<Vec<_>>>()?;
    let predicted = model.classify(samples)?;
    if predicted.len() != labels.len() {
        return Err(Error::invalid("classifier returned the wrong number of predictions"));
    }
    let correct = predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Counted from 1 across both phases.
    pub epoch: usize,
    pub task_loss: f64,
    pub domain_loss: Option<f64>,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub dss_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub condition: Condition,
    pub seed: u64,
    pub config_digest: String,
    /// Accuracy is classification accuracy on held-out samples.
    pub epochs: Vec<EpochRecord>,
    pub final_source_accuracy: f64,
    pub final_target_accuracy: f64,
}

/// A finished run: its report and the model it produced.
pub struct RunOutcome {
    pub report: TrainReport,
    pub model: Model,
    /// Gradients captured during the last phase, still unbinned.
    pub recorder: GradientRecorder,
    /// Backbone weights at initialization and after every epoch.
    pub weight_trace: Vec<Vec<Tensor>>,
}

fn model_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0xA24B_AED4_963E_E407) ^ 0x4D4F_444C
}

/// Trains one condition for one seed on pre-generated data.
pub fn run_single(cfg: &ExperimentConfig, condition: Condition, seed: u64, data: &DomainData) -> Result<RunOutcome> {
    cfg.validate()?;
    let dss = cfg.dss_for(condition);
    let mut init_rng = ChaCha8Rng::seed_from_u64(model_seed(seed));
    let mut model = Model::new(&cfg.model, &dss, &mut init_rng)?;
    let mut ctx = EpochContext::new(dss, cfg.batch_size, cfg.domain_loss_weight, seed);

    let mut phases = Vec::new();
    if cfg.pretrain_source && cfg.pretrain_epochs > 0 {
        phases.push((Phase::Pretrain, cfg.pretrain_epochs));
    }
    if cfg.adapt && cfg.adapt_epochs > 0 {
        phases.push((Phase::Adapt, cfg.adapt_epochs));
    }
    let mut records = Vec::new();
    let mut weight_trace = vec![model.backbone_weights()];
    let last = phases.len().saturating_sub(1);
    for (pi, &(phase, epochs)) in phases.iter().enumerate() {
        let mode = if phase == Phase::Adapt && condition.adversarial() {
            TrainMode::Uda
        } else {
            TrainMode::SourceOnly
        };
        if phase == Phase::Adapt {
            model.backbone.freeze_batchnorm_stats(cfg.freeze_bn_stats_in_adapt);
        }
        if pi == last {
            ctx.recorder = Some(GradientRecorder::new(cfg.record_every));
            ctx.step = 0;
        }
        for e in 0..epochs {
            ctx.alpha = (
                cfg.grl_alpha_max * e as f64 / epochs as f64,
                cfg.grl_alpha_max * (e + 1) as f64 / epochs as f64,
            );
            let losses = train_epoch(&mut model, data, mode, &mut ctx)?;
            records.push(EpochRecord {
                phase,
                epoch: records.len() + 1,
                task_loss: losses.task_loss,
                domain_loss: losses.domain_loss,
                source_accuracy: evaluate_accuracy(&mut model, &data.source_test)?,
                target_accuracy: evaluate_accuracy(&mut model, &data.target_test)?,
                dss_fallbacks: losses.dss_fallbacks,
            });
            weight_trace.push(model.backbone_weights());
        }
    }
    let (final_source_accuracy, final_target_accuracy) = records
        .last()
        .map(|r| (r.source_accuracy, r.target_accuracy))
        .ok_or_else(|| Error::invalid("no training epochs configured"))?;
    Ok(RunOutcome {
        report: TrainReport {
            condition,
            seed,
            config_digest: cfg.digest(condition)?,
            epochs: records,
            final_source_accuracy,
            final_target_accuracy,
        },
        model,
        recorder: ctx.recorder.unwrap_or_else(|| GradientRecorder::new(cfg.record_every)),
        weight_trace,
    })
}

/// Binned gradient statistics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStatsSet {
    pub condition: Condition,
    pub seed: u64,
    pub records: Vec<GradStatsRecord>,
}

/// Backbone weight snapshots of one run, indexed `[snapshot][layer]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTrace {
    pub condition: Condition,
    pub seed: u64,
    pub snapshots: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    /// Seed-major, conditions in config order.
    pub reports: Vec<TrainReport>,
    pub grad_stats: Vec<GradStatsSet>,
    pub weight_traces: Vec<WeightTrace>,
}

/// Runs the condition grid over every seed on up to `jobs` threads. Results
/// do not depend on `jobs`. Each run's histograms share the axis of its
/// unsuppressed counterpart (or its own when that is not in the grid).
pub fn run_experiment_detailed(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let cells: Vec<(u64, Condition)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.conditions.iter().map(move |&c| (s, c)))
        .collect();
    let data: Vec<DomainData> = cfg
        .seeds
        .iter()
        .map(|&s| DomainData::generate(&cfg.data.spec(s), cfg.data.test_samples_per_class))
        .collect::<Result<_>>()?;
    let data_for = |seed: u64| &data[cfg.seeds.iter().position(|&s| s == seed).expect("seed from config")];

    let jobs = jobs.clamp(1, cells.len());
    type Finished = (TrainReport, GradientRecorder, Vec<Vec<Tensor>>);
    let mut results: Vec<Option<Result<Finished>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = results.chunks_mut(cells.len().div_ceil(jobs)).enumerate().collect();
        let per = cells.len().div_ceil(jobs);
        for (ci, chunk) in chunks {
            let cells = &cells;
            let data_for = &data_for;
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let (seed, condition) = cells[ci * per + k];
                    let run = run_single(cfg, condition, seed, data_for(seed)).map_err(|e| in_cell(e, condition, seed));
                    *slot = Some(run.map(|o| (o.report, o.recorder, o.weight_trace)));
                }
            });
        }
    });
    let finished = results
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;

    let mut grad_stats = Vec::with_capacity(cells.len());
    for (i, &(seed, condition)) in cells.iter().enumerate() {
        let reference = cells
            .iter()
            .position(|&(s, c)| s == seed && c == condition.baseline())
            .unwrap_or(i);
        let records = finished[i].1.finish(&finished[reference].1.mean_std())?;
        grad_stats.push(GradStatsSet {
            condition,
            seed,
            records,
        });
    }
    let mut reports = Vec::with_capacity(cells.len());
    let mut weight_traces = Vec::with_capacity(cells.len());
    for ((report, _, snapshots), &(seed, condition)) in finished.into_iter().zip(&cells) {
        reports.push(report);
        weight_traces.push(WeightTrace {
            condition,
            seed,
            snapshots,
        });
    }
    Ok(ExperimentOutput {
        reports,
        grad_stats,
        weight_traces,
    })
}

fn in_cell(e: Error, condition: Condition, seed: u64) -> Error {
    let at = |m: String| format!("{condition} seed {seed}: {m}");
    match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(at(m)),
        Error::NumericFailure(m) => Error::NumericFailure(at(m)),
        Error::StateError(m) => Error::StateError(at(m)),
        Error::UndefinedRatio(m) => Error::UndefinedRatio(at(m)),
        other => other,
    }
}

/// One report per (seed, condition) cell.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<TrainReport>> {
    Ok(run_experiment_detailed(cfg, 1)?.reports)
}
