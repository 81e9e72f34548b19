//! Experiment orchestration: data preparation, training from scratch and
//! by fine-tuning, evaluation over OOD suites, ray probes and confidence
//! grids.

pub mod config;
pub mod eval;
pub mod probe;
pub mod train;
pub mod verify;

pub use config::{DatasetSpec, EvalSpec, ExperimentConfig, FinetuneSpec, OodTrainSpec, ScheduleGranularity};
pub use eval::{classify, confidence, evaluate, ood_suites, MetricRow, MetricTable};
pub use probe::{
    confidence_grid, logit_divergence_diagnostic, scaling_probe, DivergenceReport, GridBounds, GridRow,
    ProbeRow,
};
pub use train::{
    accuracy, base_config, finetune, prepare_data, train_scratch, DataBundle, EpochRecord, RunRecord,
};
