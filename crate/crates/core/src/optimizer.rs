//! SGD with momentum, Adam, and cosine annealing.
//!
//! SGD folds weight decay into the gradient (`g + wd·θ`); Adam applies it
//! decoupled (`θ ← θ - η·wd·θ`) before the moment update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamTensors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            weight_decay: 5e-4,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::invalid(format!("bad optimizer settings: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub spec: OptimizerSpec,
    pub step: u64,
    /// SGD velocity, or Adam first moment.
    pub first: Vec<Vec<f64>>,
    /// Adam second moment; empty for SGD.
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(spec: OptimizerSpec, params: &impl ParamTensors) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensor_lens().into_iter().map(|n| vec![0.0; n]).collect();
        let second = match spec.kind {
            OptimizerKind::Adam => zeros.clone(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            spec,
            step: 0,
            first: zeros,
            second,
        }
    }

    /// One update at learning rate `lr`. Tensors whose `trainable` entry is
    /// false are left untouched (no decay, no buffer update).
    pub fn step<P: ParamTensors, G: ParamTensors>(
        &mut self,
        params: &mut P,
        grads: &G,
        lr: f64,
        trainable: Option<&[bool]>,
    ) -> Result<()> {
        match self.spec.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, self, lr, trainable),
            OptimizerKind::Adam => adam_step(params, grads, self, lr, trainable),
        }
    }
}

fn check_shapes<P: ParamTensors, G: ParamTensors>(
    params: &P,
    grads: &G,
    state: &OptimizerState,
    trainable: Option<&[bool]>,
) -> Result<()> {
    let p = params.tensor_lens();
    let g = grads.tensor_lens();
    let s: Vec<usize> = state.first.iter().map(Vec::len).collect();
    if p != g || p != s || trainable.is_some_and(|m| m.len() != p.len()) {
        return Err(Error::ShapeMismatch {
            op: "optimizer step",
            left: (p.len(), p.iter().sum()),
            right: (g.len(), g.iter().sum()),
        });
    }
    Ok(())
}

/// `v ← β·v + (g + wd·θ)`, `θ ← θ - η·v`.
pub fn sgd_step<P: ParamTensors, G: ParamTensors>(
    params: &mut P,
    grads: &G,
    state: &mut OptimizerState,
    lr: f64,
    trainable: Option<&[bool]>,
) -> Result<()> {
    check_shapes(params, grads, state, trainable)?;
    let (beta, wd) = (state.spec.momentum, state.spec.weight_decay);
    for (i, ((theta, g), v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first.iter_mut())
        .enumerate()
    {
        if trainable.is_some_and(|m| !m[i]) {
            continue;
        }
        for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = beta * *vi + gi + wd * *t;
            *t -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam with decoupled weight decay.
pub fn adam_step<P: ParamTensors, G: ParamTensors>(
    params: &mut P,
    grads: &G,
    state: &mut OptimizerState,
    lr: f64,
    trainable: Option<&[bool]>,
) -> Result<()> {
    check_shapes(params, grads, state, trainable)?;
    if state.second.len() != state.first.len() {
        return Err(Error::invalid("adam_step on a state without second moments"));
    }
    state.step += 1;
    let OptimizerSpec {
        beta1,
        beta2,
        eps,
        weight_decay: wd,
        ..
    } = state.spec;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (((theta, g), m), v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
        .enumerate()
    {
        if trainable.is_some_and(|mask| !mask[i]) {
            continue;
        }
        for (((p, &gi), mi), vi) in theta.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *p -= lr * wd * *p;
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `eta0 · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, eta0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::invalid(format!(
            "cosine_lr: step {step} outside 0..={total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(eta0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
