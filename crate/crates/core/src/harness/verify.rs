//! Self-check suite behind `preload verify`: structural invariants,
//! finite-difference gradient checks, brute-force metric oracles and run
//! determinism, all on small randomly generated problems.

use serde::Serialize;

use super::config::{DatasetSpec, ExperimentConfig, OodTrainSpec};
use super::eval::{evaluate, ood_suites};
use super::train::{prepare_data, train_scratch};
use crate::error::Result;
use crate::head::MethodKind;
use crate::metrics::{auroc, ece, ece_bin, fpr_at_95_tpr, CalibrationInput, ScoreSet};
use crate::network::{init_params, Architecture, ModelParams, ParamGrads, ParamTensors};
use crate::objectives::{method_loss, LossConfig};
use crate::tensor::{stable_softmax, Matrix, RngState};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        softmax_normalization(seed),
        extra_logit_lower_bound(seed)?,
        extra_head_homogeneity(seed)?,
        gradient_checks(seed)?,
        metric_oracles(seed)?,
        run_determinism(seed)?,
    ])
}

fn softmax_normalization(seed: u64) -> CheckResult {
    let mut rng = RngState::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = 1 + rng.below(10_000);
        let scale = 10f64.powi(rng.below(7) as i32);
        let v: Vec<f64> = (0..n).map(|_| scale * rng.next_normal()).collect();
        let sum: f64 = stable_softmax(&v).expect("nonempty").iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }
    CheckResult::new(
        "softmax_normalization",
        worst <= 1e-12,
        format!("max |Σp - 1| = {worst:e}"),
    )
}

fn random_model(rng: &mut RngState, method: MethodKind, input_dim: usize) -> Result<ModelParams> {
    let depth = 1 + rng.below(2);
    let hidden: Vec<usize> = (0..depth).map(|_| 1 + rng.below(8)).collect();
    let classes = 2 + rng.below(3);
    let arch = Architecture::new(input_dim, hidden, classes)?;
    let mut p = init_params(&arch, method.extra_head(), rng)?;
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.5 * rng.next_normal();
        }
    }
    Ok(p)
}

fn extra_logit_lower_bound(seed: u64) -> Result<CheckResult> {
    let mut rng = RngState::new(seed ^ 0x11);
    let mut violations = 0;
    for _ in 0..10_000 {
        let mut p = random_model(&mut rng, MethodKind::PreLoad, 3)?;
        p.extra_b = 10.0 * rng.next_normal();
        let x: Vec<f64> = (0..3)
            .map(|_| 10f64.powi(rng.below(5) as i32) * rng.next_normal())
            .collect();
        let z = p.forward(&x)?.extra_logit.expect("quadratic head");
        if z < p.extra_b {
            violations += 1;
        }
    }
    Ok(CheckResult::new(
        "extra_logit_lower_bound",
        violations == 0,
        format!("{violations} violations in 10000 samples"),
    ))
}

fn extra_head_homogeneity(seed: u64) -> Result<CheckResult> {
    let mut rng = RngState::new(seed ^ 0x22);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = random_model(&mut rng, MethodKind::PreLoad, 2)?;
        let d = p.arch.embed_dim();
        let g: Vec<f64> = (0..d).map(|_| rng.next_uniform() * 3.0).collect();
        let s = 0.1 + 10.0 * rng.next_uniform();
        let sg: Vec<f64> = g.iter().map(|v| s * v).collect();
        let base = p.extra_logit_for(&g).expect("head") - p.extra_b;
        let scaled = p.extra_logit_for(&sg).expect("head") - p.extra_b;
        let rel = (scaled - s * s * base).abs() / (s * s * base).abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(CheckResult::new(
        "extra_head_homogeneity",
        worst <= 1e-9,
        format!("max relative deviation {worst:e}"),
    ))
}

fn objective(
    p: &ModelParams,
    method: MethodKind,
    xs: &Matrix,
    labels: &[usize],
    oods: &Matrix,
    cfg: &LossConfig,
) -> Result<f64> {
    let a = p.forward_batch(xs)?;
    let b = p.forward_batch(oods)?;
    Ok(method_loss(method, &a, labels, &b, cfg)?.value)
}

/// Max relative error between backprop and central differences.
fn fd_check(
    p: &ModelParams,
    method: MethodKind,
    xs: &Matrix,
    labels: &[usize],
    oods: &Matrix,
    cfg: &LossConfig,
) -> Result<f64> {
    let a = p.forward_batch(xs)?;
    let b = p.forward_batch(oods)?;
    let out = method_loss(method, &a, labels, &b, cfg)?;
    let mut grads = ParamGrads::zeros_like(p);
    for (t, g) in a.iter().zip(&out.grad_in).chain(b.iter().zip(&out.grad_ood)) {
        p.backward_into(t, g, &mut grads)?;
    }
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let h = 1e-5;
    // central differences carry roughly eps*|L|/h of round-off
    let floor = 1e-6 * out.value.abs().max(1.0);
    let mut worst: f64 = 0.0;
    let mut probe = p.clone();
    let mut flat = 0;
    for ti in 0..probe.tensor_lens().len() {
        for j in 0..probe.tensor_lens()[ti] {
            let orig = probe.tensors()[ti][j];
            probe.tensors_mut()[ti][j] = orig + h;
            let up = objective(&probe, method, xs, labels, oods, cfg)?;
            probe.tensors_mut()[ti][j] = orig - h;
            let down = objective(&probe, method, xs, labels, oods, cfg)?;
            probe.tensors_mut()[ti][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[flat];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
            flat += 1;
        }
    }
    Ok(worst)
}

fn gradient_checks(seed: u64) -> Result<CheckResult> {
    let mut rng = RngState::new(seed ^ 0x33);
    let methods = [
        MethodKind::Standard,
        MethodKind::NoneClass,
        MethodKind::OutlierExposure,
        MethodKind::EnergyFt,
        MethodKind::PreLoad,
    ];
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let method = methods[trial % methods.len()];
        let p = random_model(&mut rng, method, 3)?;
        let n = 1 + rng.below(4);
        let xs = Matrix::from_vec(n, 3, (0..3 * n).map(|_| rng.next_normal()).collect())?;
        let oods = Matrix::from_vec(n, 3, (0..3 * n).map(|_| 2.0 * rng.next_normal()).collect())?;
        let labels: Vec<usize> = (0..n).map(|_| rng.below(p.arch.num_classes)).collect();
        let cfg = LossConfig {
            lambda: 0.5 + rng.next_uniform(),
            m_in: -1.0,
            m_ood: 1.0,
            ..LossConfig::default()
        };
        worst = worst.max(fd_check(&p, method, &xs, &labels, &oods, &cfg)?);
    }
    Ok(CheckResult::new(
        "gradient_finite_differences",
        worst < 1e-4,
        format!("max relative error {worst:e}"),
    ))
}

fn metric_oracles(seed: u64) -> Result<CheckResult> {
    let mut rng = RngState::new(seed ^ 0x44);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = 1 + rng.below(50);
        let m = 1 + rng.below(50);
        let levels = 1 + rng.below(20);
        let ins: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64).collect();
        let outs: Vec<f64> = (0..m).map(|_| rng.below(levels) as f64 - 2.0).collect();
        let s = ScoreSet::new(ins.clone(), outs.clone());

        let mut best_tau = f64::NEG_INFINITY;
        for &tau in ins.iter().chain(&outs) {
            let kept = ins.iter().filter(|&&v| v >= tau).count();
            if 20 * kept >= 19 * n && tau > best_tau {
                best_tau = tau;
            }
        }
        let fpr = outs.iter().filter(|&&o| o >= best_tau).count() as f64 / m as f64;

        let mut twice = 0u64;
        for &a in &ins {
            for &b in &outs {
                twice += if a > b {
                    2
                } else if a == b {
                    1
                } else {
                    0
                };
            }
        }
        let area = twice as f64 / (2 * n * m) as f64;
        if fpr_at_95_tpr(&s)? != fpr || auroc(&s)? != area {
            mismatches += 1;
        }
    }
    for _ in 0..100 {
        let n = 1 + rng.below(60);
        let conf: Vec<f64> = (0..n).map(|_| rng.next_uniform()).collect();
        let ok: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
        let mut total = 0.0;
        for b in 0..15 {
            let members: Vec<usize> = (0..n).filter(|&i| ece_bin(conf[i], 15) == b).collect();
            if members.is_empty() {
                continue;
            }
            let nb = members.len() as f64;
            let acc = members.iter().filter(|&&i| ok[i]).count() as f64 / nb;
            let c = members.iter().map(|&i| conf[i]).sum::<f64>() / nb;
            total += nb / n as f64 * (acc - c).abs();
        }
        if (ece(&CalibrationInput::new(conf, ok))? - total).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    Ok(CheckResult::new(
        "metric_oracles",
        mismatches == 0,
        format!("{mismatches} mismatches over 300 instances"),
    ))
}

fn run_determinism(seed: u64) -> Result<CheckResult> {
    let mut cfg = ExperimentConfig::two_moons(MethodKind::PreLoad);
    cfg.arch.hidden_dims = vec![8, 8];
    cfg.dataset = DatasetSpec::TwoMoons {
        n_per_class: 40,
        test_per_class: 40,
        noise_sd: 0.1,
    };
    cfg.ood_train = OodTrainSpec::Annulus {
        r_min: 2.5,
        r_max: 6.0,
        count: 80,
        center: None,
    };
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.eval.far_away_count = 100;
    let csv = || -> Result<String> {
        let data = prepare_data(&cfg, seed)?;
        let (p, _) = train_scratch(&cfg, &data, seed)?;
        let suites = ood_suites(&cfg.eval, 2, seed, None)?;
        Ok(evaluate(&p, cfg.method, cfg.score_rule(), &data.test, &suites)?.to_csv_string())
    };
    let (a, b) = (csv()?, csv()?);
    Ok(CheckResult::new(
        "run_determinism",
        a == b,
        format!("{} bytes of metrics compared", a.len()),
    ))
}
