//! Detection and calibration metrics. In-distribution is the positive
//! class; higher scores mean "more in-distribution".

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(in_scores: Vec<f64>, out_scores: Vec<f64>) -> Self {
        Self {
            in_scores,
            out_scores,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_scores.is_empty() {
            return Err(Error::EmptyInput("in-distribution scores"));
        }
        if self.out_scores.is_empty() {
            return Err(Error::EmptyInput("out-of-distribution scores"));
        }
        if self
            .in_scores
            .iter()
            .chain(&self.out_scores)
            .any(|s| !s.is_finite())
        {
            return Err(Error::invalid("scores must be finite"));
        }
        Ok(())
    }
}

/// False-positive rate at the largest threshold that keeps at least 95% of
/// in-distribution scores at or above it. Scores equal to the threshold
/// count as positive.
pub fn fpr_at_95_tpr(s: &ScoreSet) -> Result<f64> {
    s.validate()?;
    let n = s.in_scores.len();
    let mut sorted = s.in_scores.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // smallest count with count/n >= 19/20
    let required = (19 * n).div_ceil(20);
    let tau = sorted[required - 1];
    let fp = s.out_scores.iter().filter(|&&o| o >= tau).count();
    Ok(fp as f64 / s.out_scores.len() as f64)
}

/// Probability that a random in-distribution score beats a random OOD
/// score, ties counted as one half.
pub fn auroc(s: &ScoreSet) -> Result<f64> {
    s.validate()?;
    let mut outs = s.out_scores.clone();
    outs.sort_by(f64::total_cmp);
    // twice the Mann–Whitney U statistic, kept integral
    let mut twice_u: u64 = 0;
    for &x in &s.in_scores {
        let below = outs.partition_point(|&o| o < x);
        let not_above = outs.partition_point(|&o| o <= x);
        twice_u += 2 * below as u64 + (not_above - below) as u64;
    }
    Ok(twice_u as f64 / (2 * s.in_scores.len() * s.out_scores.len()) as f64)
}

pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationInput {
    pub confidences: Vec<f64>,
    pub correct: Vec<bool>,
    pub num_bins: usize,
}

impl CalibrationInput {
    pub fn new(confidences: Vec<f64>, correct: Vec<bool>) -> Self {
        Self {
            confidences,
            correct,
            num_bins: DEFAULT_ECE_BINS,
        }
    }
}

/// Bin of `c` among `bins` equal-width right-closed bins on `(0, 1]`;
/// a confidence of exactly 0 lands in the first bin.
pub fn ece_bin(c: f64, bins: usize) -> usize {
    let upper = |b: usize| (b + 1) as f64 / bins as f64;
    let mut b = ((c * bins as f64).ceil() as usize)
        .saturating_sub(1)
        .min(bins - 1);
    while b + 1 < bins && c > upper(b) {
        b += 1;
    }
    while b > 0 && c <= upper(b - 1) {
        b -= 1;
    }
    b
}

/// Expected calibration error: `Σ_b (n_b/N)·|acc_b − conf_b|`.
pub fn ece(c: &CalibrationInput) -> Result<f64> {
    if c.confidences.is_empty() {
        return Err(Error::EmptyInput("ece"));
    }
    if c.confidences.len() != c.correct.len() {
        return Err(Error::ShapeMismatch {
            op: "ece",
            left: (c.confidences.len(), 1),
            right: (c.correct.len(), 1),
        });
    }
    if c.num_bins == 0 {
        return Err(Error::invalid("ece needs at least one bin"));
    }
    if c.confidences.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("confidences must lie in [0, 1]"));
    }
    let mut count = vec![0usize; c.num_bins];
    let mut conf_sum = vec![0.0; c.num_bins];
    let mut hits = vec![0usize; c.num_bins];
    for (&p, &ok) in c.confidences.iter().zip(&c.correct) {
        let b = ece_bin(p, c.num_bins);
        count[b] += 1;
        conf_sum[b] += p;
        hits[b] += usize::from(ok);
    }
    let n = c.confidences.len() as f64;
    Ok((0..c.num_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

/// Mean and standard error of the mean (sample sd / sqrt(n)); zero stderr
/// for a single value.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
