//! Extra-class out-of-distribution rejection for ReLU classifiers.
//!
//! A ReLU network is piecewise affine, so along almost any ray `t · x` its
//! logits grow linearly in `t` and the softmax saturates on some class. This
//! crate adds a (k+1)-th logit that is a positive-weighted sum of the
//! *squared* embedding. It grows quadratically along the same rays and
//! therefore wins far away from the data, so far-away inputs are rejected
//! instead of being classified with full confidence.
//!
//! Alongside the construction itself the crate carries the usual baselines
//! (plain cross-entropy, a linear "none" class, outlier exposure, energy
//! fine-tuning), far-away and noise data generators, detection metrics,
//! and a small deterministic training harness.

pub mod data;
pub mod error;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod optimizer;
pub mod tensor;

pub use error::{Error, Result};
pub use head::{full_probs, in_score, predict_is_ood, MethodKind, ProbVector, ScoreRule};
pub use network::{
    init_params, Architecture, ExtraHead, ForwardTrace, ModelParams, ParamGrads, ParamTensors,
};
pub use objectives::{LossConfig, LossOutput};
pub use optimizer::{OptimizerKind, OptimizerSpec, OptimizerState};
pub use tensor::{Matrix, RngState, Stream};
