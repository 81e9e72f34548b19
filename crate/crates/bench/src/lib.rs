//! Fixtures shared by the benchmarks.

use preload_core::harness::ExperimentConfig;
use preload_core::metrics::{CalibrationInput, ScoreSet};
use preload_core::{init_params, Architecture, Matrix, MethodKind, ModelParams, RngState};

/// Randomly initialized two-moons-sized model with the given head.
pub fn model(method: MethodKind, hidden: &[usize], seed: u64) -> ModelParams {
    let arch = Architecture::new(2, hidden.to_vec(), 2).expect("valid architecture");
    init_params(&arch, method.extra_head(), &mut RngState::new(seed)).expect("init")
}

/// `n` standard-normal 2-D inputs.
pub fn inputs(n: usize, seed: u64) -> Matrix {
    let mut rng = RngState::new(seed);
    Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.next_normal()).collect()).expect("shape")
}

/// Shifted-Gaussian in/out scores.
pub fn scores(n: usize, seed: u64) -> ScoreSet {
    let mut rng = RngState::new(seed);
    let ins = (0..n).map(|_| 1.0 + rng.next_normal()).collect();
    let outs = (0..n).map(|_| rng.next_normal()).collect();
    ScoreSet::new(ins, outs)
}

pub fn calibration(n: usize, seed: u64) -> CalibrationInput {
    let mut rng = RngState::new(seed);
    let conf: Vec<f64> = (0..n).map(|_| 0.5 + 0.5 * rng.next_uniform()).collect();
    let correct = conf.iter().map(|&c| rng.next_uniform() < c).collect();
    CalibrationInput::new(conf, correct)
}

/// Default two-moons config shrunk to `epochs` epochs and one seed.
pub fn short_config(method: MethodKind, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        epochs,
        seeds: vec![0],
        ..ExperimentConfig::two_moons(method)
    }
}
