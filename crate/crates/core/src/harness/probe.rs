//! Ray probes: how predictions and logits behave along `t · x` as `t` grows.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head;
use crate::network::{ForwardTrace, ModelParams};
use crate::tensor::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub t: f64,
    /// Argmax of the model's probability vector; `k` is the extra class.
    pub predicted_class: usize,
    pub max_prob: f64,
    pub extra_prob: Option<f64>,
    /// `z_{k+1} - max_{c<=k} z_c`.
    pub logit_gap: Option<f64>,
}

fn scaled(x: &[f64], t: f64) -> Vec<f64> {
    x.iter().map(|v| t * v).collect()
}

fn probe_row(t: f64, trace: &ForwardTrace) -> ProbeRow {
    let p = head::probs(trace);
    let k = trace.num_classes();
    let max_class = trace
        .class_logits
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    ProbeRow {
        t,
        predicted_class: p.argmax(),
        max_prob: p.as_slice().iter().copied().fold(0.0, f64::max),
        extra_prob: trace.extra_logit.map(|_| p.as_slice()[k]),
        logit_gap: trace.extra_logit.map(|z| z - max_class),
    }
}

/// Evaluates the model at `t · x` for each `t`.
pub fn scaling_probe(params: &ModelParams, x: &[f64], t_values: &[f64]) -> Result<Vec<ProbeRow>> {
    t_values
        .iter()
        .map(|&t| Ok(probe_row(t, &params.forward(&scaled(x, t))?)))
        .collect()
}

pub fn write_probe_csv(rows: &[(usize, ProbeRow)], mut w: impl Write) -> Result<()> {
    writeln!(w, "direction,t,predicted_class,max_prob,extra_prob,logit_gap")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for (d, r) in rows {
        writeln!(
            w,
            "{d},{},{},{:.6},{},{}",
            r.t,
            r.predicted_class,
            r.max_prob,
            opt(r.extra_prob),
            opt(r.logit_gap)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub x: f64,
    pub y: f64,
    /// Largest in-class probability.
    pub confidence: f64,
    pub predicted_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

/// Confidence over a regular 2-D grid, row-major (y outer, x inner).
pub fn confidence_grid(
    params: &ModelParams,
    bounds: GridBounds,
    resolution: (usize, usize),
) -> Result<Vec<GridRow>> {
    if params.arch.input_dim != 2 {
        return Err(Error::invalid(format!(
            "confidence grid needs 2-D inputs, model takes {}",
            params.arch.input_dim
        )));
    }
    let (nx, ny) = resolution;
    if nx < 2 || ny < 2 {
        return Err(Error::invalid("grid resolution must be >= 2 per axis"));
    }
    let lerp = |lo: f64, hi: f64, i: usize, n: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let mut rows = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        let y = lerp(bounds.y_min, bounds.y_max, j, ny);
        for i in 0..nx {
            let x = lerp(bounds.x_min, bounds.x_max, i, nx);
            let trace = params.forward(&[x, y])?;
            let p = head::probs(&trace);
            rows.push(GridRow {
                x,
                y,
                confidence: p.max_in_class(trace.num_classes()),
                predicted_class: p.argmax(),
            });
        }
    }
    Ok(rows)
}

pub fn write_grid_csv(rows: &[GridRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "x,y,confidence,predicted_class")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.x, r.y, r.confidence, r.predicted_class)?;
    }
    Ok(())
}

/// Per-logit margin growth between two points on the ray `t · x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// Largest logit at `t2` (index `k` is the extra class).
    pub dominant_class: usize,
    /// `margin_c(t2 x) - margin_c(t1 x)` for the dominant class, where
    /// `margin_c(z) = z_c - max_{c' != c} z_{c'}`.
    pub gap_growth: f64,
    /// The same quantity for every logit.
    pub per_class: Vec<f64>,
}

fn margins(z: &[f64]) -> Vec<f64> {
    (0..z.len())
        .map(|c| {
            let other = z
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != c)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if other.is_finite() {
                z[c] - other
            } else {
                0.0
            }
        })
        .collect()
}

pub fn logit_divergence_diagnostic(
    params: &ModelParams,
    x: &[f64],
    t1: f64,
    t2: f64,
) -> Result<DivergenceReport> {
    let z1 = params.forward(&scaled(x, t1))?.logits();
    let z2 = params.forward(&scaled(x, t2))?.logits();
    let (m1, m2) = (margins(&z1), margins(&z2));
    let per_class: Vec<f64> = m2.iter().zip(&m1).map(|(b, a)| b - a).collect();
    let dominant_class = argmax(&z2).expect("nonempty logits");
    Ok(DivergenceReport {
        dominant_class,
        gap_growth: per_class[dominant_class],
        per_class,
    })
}
