use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig, OodTrainSpec, ScheduleGranularity};
use super::eval::{classify, MetricRow};
use crate::data::{self, LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::head::MethodKind;
use crate::network::{init_params, ExtraHead, ModelParams, ParamGrads, ParamTensors};
use crate::objectives::{method_loss, LossConfig};
use crate::optimizer::{cosine_lr, OptimizerSpec, OptimizerState};
use crate::tensor::{RngState, Stream};

/// Datasets for one seed.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: LabeledSet,
    pub validation: LabeledSet,
    pub test: LabeledSet,
    pub ood_train: UnlabeledSet,
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<DataBundle> {
    let mut rng = RngState::stream(seed, Stream::Data);
    let (full, test) = match &cfg.dataset {
        DatasetSpec::TwoMoons {
            n_per_class,
            test_per_class,
            noise_sd,
        } => (
            data::gen_two_moons(*n_per_class, *noise_sd, &mut rng)?,
            data::gen_two_moons(*test_per_class, *noise_sd, &mut rng)?,
        ),
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit,
            test_limit,
        } => {
            let mut train = data::load_idx(train_images, train_labels)?;
            let mut test = data::load_idx(test_images, test_labels)?;
            let classes = cfg.arch.num_classes.max(train.num_classes).max(test.num_classes);
            train.num_classes = classes;
            test.num_classes = classes;
            if let Some(n) = limit.filter(|&n| n < train.len()) {
                train = train.subset(&(0..n).collect::<Vec<_>>());
            }
            if let Some(n) = test_limit.filter(|&n| n < test.len()) {
                test = test.subset(&(0..n).collect::<Vec<_>>());
            }
            (train, test)
        }
    };
    if full.dim() != cfg.arch.input_dim || full.num_classes > cfg.arch.num_classes {
        return Err(Error::ShapeMismatch {
            op: "dataset vs architecture",
            left: (cfg.arch.input_dim, cfg.arch.num_classes),
            right: (full.dim(), full.num_classes),
        });
    }
    let (train, validation) = if cfg.validation_fraction > 0.0 {
        data::split(&full, 1.0 - cfg.validation_fraction, &mut rng)?
    } else {
        let empty = full.subset(&[]);
        (full, empty)
    };

    let mut ood_rng = RngState::stream(seed, Stream::OodTrain);
    let ood_train = match &cfg.ood_train {
        OodTrainSpec::Annulus {
            r_min,
            r_max,
            count,
            center,
        } => {
            let center = match center {
                Some(c) => c.clone(),
                None => column_means(&train),
            };
            if center.len() != train.dim() {
                return Err(Error::Config(format!(
                    "annulus center has {} coordinates, data has {}",
                    center.len(),
                    train.dim()
                )));
            }
            data::gen_annulus(&center, *r_min, *r_max, *count, &mut ood_rng)?
        }
        OodTrainSpec::UniformNoise { count } => data::gen_uniform_noise(train.dim(), *count, &mut ood_rng),
        OodTrainSpec::SmoothNoise { count } => {
            let idx: Vec<usize> = (0..*count).map(|_| ood_rng.below(train.len())).collect();
            data::gen_smooth_noise(&train.inputs.select_rows(&idx), &mut ood_rng)?
        }
    };
    Ok(DataBundle {
        train,
        validation,
        test,
        ood_train,
    })
}

fn column_means(set: &LabeledSet) -> Vec<f64> {
    let mut mean = vec![0.0; set.dim()];
    for row in set.inputs.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = set.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// "head" for extra-head pre-training, "full" otherwise.
    pub stage: String,
    pub train_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: MethodKind,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub train_accuracy: f64,
    pub metrics: Vec<MetricRow>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Settings shared by the epoch loop of every training stage.
struct Stage<'a> {
    name: &'a str,
    method: MethodKind,
    loss: &'a LossConfig,
    optimizer: &'a OptimizerSpec,
    epochs: usize,
    batch_size: usize,
    schedule: ScheduleGranularity,
    trainable: Option<Vec<bool>>,
}

/// Paired in-domain / OOD minibatch SGD with a cosine learning-rate schedule.
fn run_stage(
    params: &mut ModelParams,
    stage: &Stage<'_>,
    data: &DataBundle,
    rng: &mut RngState,
) -> Result<Vec<EpochRecord>> {
    let n = data.train.len();
    if n == 0 {
        return Err(Error::EmptyInput("training set"));
    }
    let uses_ood = stage.method.uses_ood();
    if uses_ood && data.ood_train.is_empty() {
        return Err(Error::EmptyInput("OOD training set"));
    }
    let m = stage.batch_size;
    let batches = n.div_ceil(m);
    let total_steps = stage.epochs * batches;
    let mut opt = OptimizerState::new(stage.optimizer.clone(), params);
    let mut ood_order: Vec<usize> = Vec::new();
    let mut ood_cursor = 0;
    let mut records = Vec::with_capacity(stage.epochs);
    let mut step = 0;

    for epoch in 0..stage.epochs {
        let order = rng.permutation(n);
        let mut loss_sum = 0.0;
        for b in 0..batches {
            let idx = &order[b * m..((b + 1) * m).min(n)];
            let xs = data.train.inputs.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let in_traces = params.forward_batch(&xs)?;

            let ood_traces = if uses_ood {
                let mut ood_idx = Vec::with_capacity(idx.len());
                while ood_idx.len() < idx.len() {
                    if ood_cursor == ood_order.len() {
                        ood_order = rng.permutation(data.ood_train.len());
                        ood_cursor = 0;
                    }
                    ood_idx.push(ood_order[ood_cursor]);
                    ood_cursor += 1;
                }
                params.forward_batch(&data.ood_train.inputs.select_rows(&ood_idx))?
            } else {
                Vec::new()
            };

            let out = method_loss(stage.method, &in_traces, &labels, &ood_traces, stage.loss)?;
            if !out.value.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite loss at epoch {epoch}, batch {b}"
                )));
            }
            loss_sum += out.value;

            let mut grads = ParamGrads::zeros_like(params);
            for (t, g) in in_traces.iter().zip(&out.grad_in) {
                params.backward_into(t, g, &mut grads)?;
            }
            for (t, g) in ood_traces.iter().zip(&out.grad_ood) {
                params.backward_into(t, g, &mut grads)?;
            }

            let lr = match stage.schedule {
                ScheduleGranularity::PerStep => cosine_lr(step, total_steps, stage.optimizer.lr)?,
                ScheduleGranularity::PerEpoch => cosine_lr(epoch, stage.epochs, stage.optimizer.lr)?,
            };
            opt.step(params, &grads, lr, stage.trainable.as_deref())?;
            step += 1;
        }
        records.push(EpochRecord {
            epoch,
            stage: stage.name.to_string(),
            train_loss: loss_sum / batches as f64,
            validation_accuracy: accuracy(params, &data.validation)?,
        });
    }
    Ok(records)
}

/// k-way classification accuracy; NaN for an empty set.
pub fn accuracy(params: &ModelParams, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let traces = params.forward_batch(&set.inputs)?;
    let hits = traces
        .iter()
        .zip(&set.labels)
        .filter(|(t, &y)| classify(t) == y)
        .count();
    Ok(hits as f64 / set.len() as f64)
}

/// Trains `cfg.method` from a fresh initialization.
pub fn train_scratch(
    cfg: &ExperimentConfig,
    data: &DataBundle,
    seed: u64,
) -> Result<(ModelParams, RunRecord)> {
    cfg.validate()?;
    if cfg.method.is_finetune() {
        return Err(Error::MethodMismatch {
            method: cfg.method.to_string(),
            detail: "training from scratch (use finetune)".into(),
        });
    }
    check_dims(cfg, data)?;
    let start = Instant::now();
    let mut params = init_params(
        &cfg.arch,
        cfg.method.extra_head(),
        &mut RngState::stream(seed, Stream::Init),
    )?;
    let mut rng = RngState::stream(seed, Stream::Shuffle);
    let stage = Stage {
        name: "full",
        method: cfg.method,
        loss: &cfg.loss,
        optimizer: &cfg.optimizer,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        schedule: cfg.schedule,
        trainable: None,
    };
    let epochs = run_stage(&mut params, &stage, data, &mut rng)?;
    let record = RunRecord {
        method: cfg.method,
        seed,
        epochs,
        train_accuracy: accuracy(&params, &data.train)?,
        metrics: Vec::new(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((params, record))
}

/// Fine-tunes a trained Standard model with `cfg.method`.
///
/// If the method adds an extra head, stage one trains only that head with
/// everything else frozen, for `head_pretrain_epochs`. Stage two trains all
/// parameters for `ft_epochs`. Each stage gets a fresh optimizer state and
/// its own cosine schedule.
pub fn finetune(
    base: &ModelParams,
    cfg: &ExperimentConfig,
    data: &DataBundle,
    seed: u64,
) -> Result<(ModelParams, RunRecord)> {
    cfg.validate()?;
    let ft = cfg
        .ft
        .as_ref()
        .ok_or_else(|| Error::Config("finetune needs an `ft` block".into()))?;
    if base.extra_head != ExtraHead::Absent {
        return Err(Error::MethodMismatch {
            method: cfg.method.to_string(),
            detail: "a base model that already has an extra head".into(),
        });
    }
    if base.arch != cfg.arch {
        return Err(Error::Config(
            "base model architecture differs from config".into(),
        ));
    }
    check_dims(cfg, data)?;
    let start = Instant::now();
    let head = cfg.method.extra_head();
    let mut params = base.with_extra_head(head);
    let optimizer = ft.optimizer.clone().unwrap_or_else(|| cfg.optimizer.clone());
    let loss = LossConfig {
        lambda: ft.lambda.unwrap_or(cfg.loss.lambda),
        ..cfg.loss.clone()
    };
    let mut rng = RngState::stream(seed, Stream::Shuffle);
    let mut epochs = Vec::new();

    if head.is_present() && ft.head_pretrain_epochs > 0 {
        let n = params.tensor_lens().len();
        let mut mask = vec![false; n];
        mask[n - 2] = true; // extra_raw_w
        mask[n - 1] = true; // extra_b
        let stage = Stage {
            name: "head",
            method: cfg.method,
            loss: &loss,
            optimizer: &optimizer,
            epochs: ft.head_pretrain_epochs,
            batch_size: cfg.batch_size,
            schedule: cfg.schedule,
            trainable: Some(mask),
        };
        epochs.extend(run_stage(&mut params, &stage, data, &mut rng)?);
    }
    let stage = Stage {
        name: "full",
        method: cfg.method,
        loss: &loss,
        optimizer: &optimizer,
        epochs: ft.ft_epochs,
        batch_size: cfg.batch_size,
        schedule: cfg.schedule,
        trainable: None,
    };
    epochs.extend(run_stage(&mut params, &stage, data, &mut rng)?);
    let record = RunRecord {
        method: cfg.method,
        seed,
        epochs,
        train_accuracy: accuracy(&params, &data.train)?,
        metrics: Vec::new(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((params, record))
}

fn check_dims(cfg: &ExperimentConfig, data: &DataBundle) -> Result<()> {
    let dim = data.train.dim();
    if dim != cfg.arch.input_dim || data.train.num_classes > cfg.arch.num_classes {
        return Err(Error::ShapeMismatch {
            op: "dataset vs architecture",
            left: (cfg.arch.input_dim, cfg.arch.num_classes),
            right: (dim, data.train.num_classes),
        });
    }
    if cfg.method.uses_ood() && data.ood_train.dim() != dim {
        return Err(Error::ShapeMismatch {
            op: "OOD training set vs architecture",
            left: (cfg.arch.input_dim, 1),
            right: (data.ood_train.dim(), 1),
        });
    }
    Ok(())
}

/// Standard configuration matching `cfg` (same data, architecture,
/// optimizer and epochs) used to produce the base of a fine-tuning run.
pub fn base_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        method: MethodKind::Standard,
        ft: None,
        loss: LossConfig {
            lambda: 0.0,
            ..cfg.loss.clone()
        },
        ..cfg.clone()
    }
}
