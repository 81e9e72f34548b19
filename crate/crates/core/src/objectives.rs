//! Training losses and their exact gradients with respect to the logits.
//!
//! Every batch loss is a mean over the in-domain batch plus `lambda` times
//! a mean over the OOD batch. An empty OOD batch contributes zero.
//! Gradient vectors always have the length of the corresponding trace's
//! logit vector; entries a loss does not touch are zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{MethodKind, ProbVector};
use crate::network::ForwardTrace;
use crate::tensor::{log_sum_exp, stable_softmax};

/// Which logits the in-domain cross-entropy of the extra-class objectives
/// normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InDomainSupport {
    /// Softmax over all k+1 logits (the extra class is pushed down on
    /// in-domain data too).
    #[default]
    AllClasses,
    /// Softmax over the k in-class logits only.
    InClassesOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub m_in: f64,
    pub m_ood: f64,
    pub in_domain_support: InDomainSupport,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            m_in: -3.6,
            m_ood: -25.0,
            in_domain_support: InDomainSupport::AllClasses,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !self.m_in.is_finite() || !self.m_ood.is_finite() {
            return Err(Error::invalid("energy margins must be finite"));
        }
        Ok(())
    }

    /// Per-method default weight of the OOD term.
    pub fn default_lambda(method: MethodKind) -> f64 {
        match method {
            MethodKind::OutlierExposure | MethodKind::OutlierExposureFt => 0.5,
            MethodKind::EnergyFt => 0.1,
            MethodKind::Standard => 0.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// d value / d logits, per in-domain example.
    pub grad_in: Vec<Vec<f64>>,
    /// d value / d logits, per OOD example.
    pub grad_ood: Vec<Vec<f64>>,
}

/// `-ln p_y`, with gradient `p - onehot(y)` with respect to the logits that
/// produced `p`.
pub fn ce_loss(p: &ProbVector, y: usize) -> Result<LossOutput> {
    let probs = p.as_slice();
    if y >= probs.len() {
        return Err(Error::IndexOutOfRange {
            what: "ce_loss label",
            index: y,
            len: probs.len(),
        });
    }
    let mut grad = probs.to_vec();
    grad[y] -= 1.0;
    Ok(LossOutput {
        value: -probs[y].ln(),
        grad_in: vec![grad],
        grad_ood: Vec::new(),
    })
}

/// Cross-entropy straight from logits; stays finite when `p_y` underflows.
fn ce_from_logits(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    if y >= logits.len() {
        return Err(Error::IndexOutOfRange {
            what: "label",
            index: y,
            len: logits.len(),
        });
    }
    let value = log_sum_exp(logits)? - logits[y];
    let mut grad = stable_softmax(logits)?;
    grad[y] -= 1.0;
    Ok((value, grad))
}

fn padded(mut grad: Vec<f64>, len: usize) -> Vec<f64> {
    grad.resize(len, 0.0);
    grad
}

fn check_batch(in_batch: &[ForwardTrace], labels: &[usize]) -> Result<()> {
    if in_batch.is_empty() {
        return Err(Error::EmptyInput("in-domain batch"));
    }
    if in_batch.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "loss labels",
            left: (in_batch.len(), 1),
            right: (labels.len(), 1),
        });
    }
    for (t, &y) in in_batch.iter().zip(labels) {
        if y >= t.num_classes() {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: y,
                len: t.num_classes(),
            });
        }
    }
    Ok(())
}

fn require_extra(batch: &[ForwardTrace], loss: &str) -> Result<()> {
    if batch.iter().any(|t| t.extra_logit.is_none()) {
        return Err(Error::MethodMismatch {
            method: loss.into(),
            detail: "traces without an extra logit".into(),
        });
    }
    Ok(())
}

/// k-way cross-entropy averaged over the in-domain batch.
fn in_domain_ce(in_batch: &[ForwardTrace], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = in_batch.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(in_batch.len());
    for (t, &y) in in_batch.iter().zip(labels) {
        let (v, g) = ce_from_logits(&t.class_logits, y)?;
        total += v;
        grads.push(padded(g.into_iter().map(|x| x / n).collect(), t.num_logits()));
    }
    Ok((total / n, grads))
}

/// Plain cross-entropy over the k classes.
pub fn standard_loss(in_batch: &[ForwardTrace], labels: &[usize]) -> Result<LossOutput> {
    check_batch(in_batch, labels)?;
    let (value, grad_in) = in_domain_ce(in_batch, labels)?;
    Ok(LossOutput {
        value,
        grad_in,
        grad_ood: Vec::new(),
    })
}

fn extra_class_objective(
    in_batch: &[ForwardTrace],
    labels: &[usize],
    ood_batch: &[ForwardTrace],
    cfg: &LossConfig,
    name: &str,
) -> Result<LossOutput> {
    check_batch(in_batch, labels)?;
    cfg.validate()?;
    require_extra(in_batch, name)?;
    require_extra(ood_batch, name)?;

    let (mut value, grad_in) = match cfg.in_domain_support {
        InDomainSupport::InClassesOnly => in_domain_ce(in_batch, labels)?,
        InDomainSupport::AllClasses => {
            let n = in_batch.len() as f64;
            let mut total = 0.0;
            let mut grads = Vec::with_capacity(in_batch.len());
            for (t, &y) in in_batch.iter().zip(labels) {
                let (v, g) = ce_from_logits(&t.logits(), y)?;
                total += v;
                grads.push(g.into_iter().map(|x| x / n).collect());
            }
            (total / n, grads)
        }
    };

    let mut grad_ood = Vec::with_capacity(ood_batch.len());
    if !ood_batch.is_empty() {
        let scale = cfg.lambda / ood_batch.len() as f64;
        let mut total = 0.0;
        for t in ood_batch {
            let (v, g) = ce_from_logits(&t.logits(), t.num_classes())?;
            total += v;
            grad_ood.push(g.into_iter().map(|x| x * scale).collect());
        }
        value += cfg.lambda * total / ood_batch.len() as f64;
    }
    Ok(LossOutput {
        value,
        grad_in,
        grad_ood,
    })
}

/// In-domain cross-entropy plus `lambda` times the cross-entropy of OOD
/// samples against the extra class, on the squared-embedding head.
pub fn preload_objective(
    in_batch: &[ForwardTrace],
    labels: &[usize],
    ood_batch: &[ForwardTrace],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    extra_class_objective(in_batch, labels, ood_batch, cfg, "preload")
}

/// Same objective as [`preload_objective`]; the difference lies in the
/// network's linear extra head, not in the loss.
pub fn nc_loss(
    in_batch: &[ForwardTrace],
    labels: &[usize],
    ood_batch: &[ForwardTrace],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    extra_class_objective(in_batch, labels, ood_batch, cfg, "nc")
}

/// In-domain cross-entropy plus `lambda` times the cross-entropy between
/// the uniform distribution and the k-way prediction on OOD samples.
pub fn oe_loss(
    in_batch: &[ForwardTrace],
    labels: &[usize],
    ood_batch: &[ForwardTrace],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_batch(in_batch, labels)?;
    cfg.validate()?;
    let (mut value, grad_in) = in_domain_ce(in_batch, labels)?;
    let mut grad_ood = Vec::with_capacity(ood_batch.len());
    if !ood_batch.is_empty() {
        let scale = cfg.lambda / ood_batch.len() as f64;
        let mut total = 0.0;
        for t in ood_batch {
            let z = &t.class_logits;
            let k = z.len() as f64;
            let lse = log_sum_exp(z)?;
            // -(1/k) Σ_c ln p_c = lse - mean(z)
            total += lse - z.iter().sum::<f64>() / k;
            let g: Vec<f64> = stable_softmax(z)?
                .into_iter()
                .map(|p| (p - 1.0 / k) * scale)
                .collect();
            grad_ood.push(padded(g, t.num_logits()));
        }
        value += cfg.lambda * total / ood_batch.len() as f64;
    }
    Ok(LossOutput {
        value,
        grad_in,
        grad_ood,
    })
}

/// `E(x) = -logsumexp(z_1..z_k)`.
pub fn energy(trace: &ForwardTrace) -> Result<f64> {
    Ok(-log_sum_exp(&trace.class_logits)?)
}

/// Cross-entropy plus `lambda · (mean relu(E_in - m_in)² + mean relu(m_ood - E_ood)²)`.
pub fn energy_ft_loss(
    in_batch: &[ForwardTrace],
    labels: &[usize],
    ood_batch: &[ForwardTrace],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_batch(in_batch, labels)?;
    cfg.validate()?;
    let (mut value, mut grad_in) = in_domain_ce(in_batch, labels)?;

    // dE/dz = -softmax(z)
    let n_in = in_batch.len() as f64;
    let mut penalty_in = 0.0;
    for (t, g) in in_batch.iter().zip(grad_in.iter_mut()) {
        let hinge = (energy(t)? - cfg.m_in).max(0.0);
        if hinge > 0.0 {
            penalty_in += hinge * hinge;
            let coef = cfg.lambda * 2.0 * hinge / n_in;
            for (gi, p) in g.iter_mut().zip(stable_softmax(&t.class_logits)?) {
                *gi -= coef * p;
            }
        }
    }
    value += cfg.lambda * penalty_in / n_in;

    let mut grad_ood = Vec::with_capacity(ood_batch.len());
    if !ood_batch.is_empty() {
        let n_ood = ood_batch.len() as f64;
        let mut penalty_ood = 0.0;
        for t in ood_batch {
            let hinge = (cfg.m_ood - energy(t)?).max(0.0);
            let mut g = vec![0.0; t.num_logits()];
            if hinge > 0.0 {
                penalty_ood += hinge * hinge;
                let coef = cfg.lambda * 2.0 * hinge / n_ood;
                for (gi, p) in g.iter_mut().zip(stable_softmax(&t.class_logits)?) {
                    *gi = coef * p;
                }
            }
            grad_ood.push(g);
        }
        value += cfg.lambda * penalty_ood / n_ood;
    }
    Ok(LossOutput {
        value,
        grad_in,
        grad_ood,
    })
}

/// The training objective used by `method`.
pub fn method_loss(
    method: MethodKind,
    in_batch: &[ForwardTrace],
    labels: &[usize],
    ood_batch: &[ForwardTrace],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    match method {
        MethodKind::Standard => standard_loss(in_batch, labels),
        MethodKind::NoneClass => nc_loss(in_batch, labels, ood_batch, cfg),
        MethodKind::OutlierExposure | MethodKind::OutlierExposureFt => {
            oe_loss(in_batch, labels, ood_batch, cfg)
        }
        MethodKind::EnergyFt => energy_ft_loss(in_batch, labels, ood_batch, cfg),
        MethodKind::PreLoad | MethodKind::PreLoadFt => preload_objective(in_batch, labels, ood_batch, cfg),
    }
}
