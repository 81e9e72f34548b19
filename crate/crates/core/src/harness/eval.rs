use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::EvalSpec;
use crate::data::{self, FarAwayParams, LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::head::{self, MethodKind, ScoreRule};
use crate::metrics::{self, CalibrationInput, ScoreSet};
use crate::network::{ForwardTrace, ModelParams};
use crate::tensor::{argmax, RngState, Stream};

/// One `dataset,method,metric,value,stderr` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn get(&self, dataset: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.metric == metric)
            .map(|r| r.value)
    }

    /// CSV with a header row; values printed with 6 decimals.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "dataset,method,metric,value,stderr")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.6},{:.6}",
                r.dataset, r.method, r.metric, r.value, r.stderr
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("ascii")
    }

    /// Mean and standard error of each (dataset, method, metric) across
    /// per-seed tables. Row order follows the first table.
    pub fn aggregate(tables: &[MetricTable]) -> MetricTable {
        let mut values: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
        let mut order = Vec::new();
        for t in tables {
            for r in &t.rows {
                let key = (r.dataset.clone(), r.method.clone(), r.metric.clone());
                let entry = values.entry(key.clone()).or_default();
                if entry.is_empty() {
                    order.push(key);
                }
                entry.push(r.value);
            }
        }
        let rows = order
            .into_iter()
            .map(|key| {
                let (value, stderr) = metrics::mean_stderr(&values[&key]);
                MetricRow {
                    dataset: key.0,
                    method: key.1,
                    metric: key.2,
                    value,
                    stderr,
                }
            })
            .collect();
        MetricTable { rows }
    }
}

/// Predicted in-domain class: argmax of the k class logits.
pub fn classify(trace: &ForwardTrace) -> usize {
    argmax(&trace.class_logits).expect("at least one class")
}

/// Confidence reported for calibration and grids: the largest in-class
/// probability of the method's full probability vector.
pub fn confidence(trace: &ForwardTrace) -> f64 {
    head::probs(trace).max_in_class(trace.num_classes())
}

fn scores(params: &ModelParams, rule: ScoreRule, xs: &crate::tensor::Matrix) -> Result<Vec<f64>> {
    params
        .forward_batch(xs)?
        .iter()
        .map(|t| head::in_score_with(rule, t))
        .collect()
}

/// Far-away evaluation suites (and optional noise suites) for inputs of
/// dimension `dim`.
pub fn ood_suites(
    spec: &EvalSpec,
    dim: usize,
    seed: u64,
    images: Option<&LabeledSet>,
) -> Result<Vec<(String, UnlabeledSet)>> {
    let mut eval_rng = RngState::stream(seed, Stream::Eval);
    let fa = |salt: u64| FarAwayParams {
        t: spec.far_away_t,
        dim,
        count: spec.far_away_count,
        seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt,
    };
    let mut suites = vec![
        ("faraway".to_string(), data::gen_faraway(&fa(1))?),
        ("faraway_rd".to_string(), data::gen_faraway_rd(&fa(2))?),
    ];
    if spec.uniform_noise {
        suites.push((
            "uniform_noise".into(),
            data::gen_uniform_noise(dim, spec.noise_count, &mut eval_rng),
        ));
    }
    if spec.smooth_noise {
        if let Some(src) = images {
            let idx: Vec<usize> = (0..spec.noise_count).map(|_| eval_rng.below(src.len())).collect();
            suites.push((
                "smooth_noise".into(),
                data::gen_smooth_noise(&src.inputs.select_rows(&idx), &mut eval_rng)?,
            ));
        }
    }
    Ok(suites)
}

/// FPR-95 and AUROC per OOD suite, plus in-domain accuracy and ECE.
pub fn evaluate(
    params: &ModelParams,
    method: MethodKind,
    rule: ScoreRule,
    in_test: &LabeledSet,
    suites: &[(String, UnlabeledSet)],
) -> Result<MetricTable> {
    if suites.is_empty() {
        return Err(Error::EmptyInput("OOD suites"));
    }
    if in_test.is_empty() {
        return Err(Error::EmptyInput("in-domain test set"));
    }
    let in_traces = params.forward_batch(&in_test.inputs)?;
    for t in in_traces.iter().take(1) {
        head::check_trace(method, t)?;
    }
    let in_scores = in_traces
        .iter()
        .map(|t| head::in_score_with(rule, t))
        .collect::<Result<Vec<_>>>()?;
    let correct: Vec<bool> = in_traces
        .iter()
        .zip(&in_test.labels)
        .map(|(t, &y)| classify(t) == y)
        .collect();
    let acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    let ece = metrics::ece(&CalibrationInput::new(
        in_traces.iter().map(confidence).collect(),
        correct,
    ))?;

    let row = |dataset: &str, metric: &str, value: f64| MetricRow {
        dataset: dataset.to_string(),
        method: method.to_string(),
        metric: metric.to_string(),
        value,
        stderr: 0.0,
    };
    let mut rows = vec![row("in_domain", "accuracy", acc), row("in_domain", "ece", ece)];
    for (name, set) in suites {
        let s = ScoreSet::new(in_scores.clone(), scores(params, rule, &set.inputs)?);
        rows.push(row(name, "fpr95", metrics::fpr_at_95_tpr(&s)?));
        rows.push(row(name, "auroc", metrics::auroc(&s)?));
    }
    Ok(MetricTable { rows })
}

/// Detection scores of `params` on a batch, using `rule`.
pub fn score_batch(params: &ModelParams, rule: ScoreRule, set: &UnlabeledSet) -> Result<Vec<f64>> {
    scores(params, rule, &set.inputs)
}
