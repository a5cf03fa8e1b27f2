//! Toy unsupervised domain adaptation: a labeled synthetic source domain, an
//! unlabeled photometrically shifted target domain, a shared backbone, a
//! classification head and a domain discriminator behind gradient reversal.

mod data;
mod model;
mod train;

pub use data::{
    apply_shift, export_dataset, generate_domains, import_dataset, shuffled_indices, stack_images, DatasetSidecar,
    Domain, DomainData, DomainSample, DomainShift, SyntheticDomainSpec, IMAGE_CHANNELS, IMAGE_SIZE,
};
pub use model::{Model, ModelSpec};
pub use train::{
    evaluate_accuracy, run_experiment, run_experiment_detailed, run_single, train_epoch, Classifier, Condition,
    DataConfig, EpochContext, EpochLosses, EpochRecord, ExperimentConfig, ExperimentOutput, GradStatsSet, Phase,
    RunOutcome, TrainMode, TrainReport, WeightTrace,
};
