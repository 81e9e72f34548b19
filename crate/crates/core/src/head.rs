//! (k+1)-way probabilities, the OOD decision rule, and per-method detection
//! scores.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ExtraHead, ForwardTrace};
use crate::tensor::{argmax, log_sum_exp, stable_softmax};

/// Training method. Fine-tuned variants score exactly like their
/// from-scratch counterparts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Standard,
    #[serde(rename = "nc")]
    NoneClass,
    #[serde(rename = "oe")]
    OutlierExposure,
    #[serde(rename = "oe_ft")]
    OutlierExposureFt,
    EnergyFt,
    #[serde(rename = "preload")]
    PreLoad,
    #[serde(rename = "preload_ft")]
    PreLoadFt,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Standard,
        MethodKind::NoneClass,
        MethodKind::OutlierExposure,
        MethodKind::OutlierExposureFt,
        MethodKind::EnergyFt,
        MethodKind::PreLoad,
        MethodKind::PreLoadFt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Standard => "standard",
            MethodKind::NoneClass => "nc",
            MethodKind::OutlierExposure => "oe",
            MethodKind::OutlierExposureFt => "oe_ft",
            MethodKind::EnergyFt => "energy_ft",
            MethodKind::PreLoad => "preload",
            MethodKind::PreLoadFt => "preload_ft",
        }
    }

    pub fn extra_head(self) -> ExtraHead {
        match self {
            MethodKind::NoneClass => ExtraHead::Linear,
            MethodKind::PreLoad | MethodKind::PreLoadFt => ExtraHead::Quadratic,
            _ => ExtraHead::Absent,
        }
    }

    /// Methods that start from a trained Standard model.
    pub fn is_finetune(self) -> bool {
        matches!(
            self,
            MethodKind::OutlierExposureFt | MethodKind::EnergyFt | MethodKind::PreLoadFt
        )
    }

    /// Whether training consumes auxiliary OOD samples.
    pub fn uses_ood(self) -> bool {
        self != MethodKind::Standard
    }

    pub fn default_score_rule(self) -> ScoreRule {
        match self {
            MethodKind::Standard | MethodKind::OutlierExposure | MethodKind::OutlierExposureFt => {
                ScoreRule::MaxSoftmax
            }
            MethodKind::NoneClass | MethodKind::PreLoad | MethodKind::PreLoadFt => ScoreRule::NotExtraClass,
            MethodKind::EnergyFt => ScoreRule::NegativeEnergy,
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// How an in-distribution score is read off a forward pass. Larger always
/// means "more in-distribution".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    /// `max_c softmax(z_1..z_k)_c`.
    MaxSoftmax,
    /// `1 - P(y = k+1 | x)` under the (k+1)-way softmax.
    NotExtraClass,
    /// `logsumexp(z_1..z_k)`, i.e. minus the energy.
    NegativeEnergy,
}

/// Probability vector over k or k+1 classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps an already-normalized vector, checking it is one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("ProbVector"));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("not a probability vector: {probs:?}")));
        }
        Ok(Self(probs))
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        stable_softmax(logits).map(Self)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0).expect("nonempty")
    }

    /// Largest probability among the first `k` entries.
    pub fn max_in_class(&self, k: usize) -> f64 {
        self.0[..k].iter().copied().fold(0.0, f64::max)
    }
}

/// Softmax over `[z_1..z_k, z_{k+1}]`.
pub fn full_probs(class_logits: &[f64], extra_logit: f64) -> Result<ProbVector> {
    if class_logits.is_empty() {
        return Err(Error::EmptyInput("full_probs"));
    }
    let mut z = Vec::with_capacity(class_logits.len() + 1);
    z.extend_from_slice(class_logits);
    z.push(extra_logit);
    ProbVector::from_logits(&z)
}

/// True iff the last class strictly beats every in-class probability.
/// An exact tie resolves to in-distribution.
pub fn predict_is_ood(p: &ProbVector) -> bool {
    p.argmax() == p.len() - 1
}

/// Probability vector the model outputs: k+1-way when an extra logit exists,
/// k-way otherwise.
pub fn probs(trace: &ForwardTrace) -> ProbVector {
    ProbVector::from_logits(&trace.logits()).expect("at least one class")
}

pub fn in_score(method: MethodKind, trace: &ForwardTrace) -> Result<f64> {
    check_trace(method, trace)?;
    in_score_with(method.default_score_rule(), trace)
}

pub fn in_score_with(rule: ScoreRule, trace: &ForwardTrace) -> Result<f64> {
    match rule {
        ScoreRule::MaxSoftmax => {
            let p = stable_softmax(&trace.class_logits)?;
            Ok(p.into_iter().fold(0.0, f64::max))
        }
        ScoreRule::NotExtraClass => {
            let extra = trace.extra_logit.ok_or_else(|| Error::MethodMismatch {
                method: "not_extra_class score".into(),
                detail: "a trace without an extra logit".into(),
            })?;
            let p = full_probs(&trace.class_logits, extra)?;
            Ok(1.0 - p.as_slice()[p.len() - 1])
        }
        ScoreRule::NegativeEnergy => log_sum_exp(&trace.class_logits),
    }
}

/// Errors unless the trace's head matches what the method trains.
pub fn check_trace(method: MethodKind, trace: &ForwardTrace) -> Result<()> {
    let wants_extra = method.extra_head().is_present();
    if wants_extra != trace.extra_logit.is_some() {
        return Err(Error::MethodMismatch {
            method: method.to_string(),
            detail: if wants_extra {
                "a trace without an extra logit".into()
            } else {
                "a trace carrying an extra logit".into()
            },
        });
    }
    Ok(())
}
