use std::sync::OnceLock;

use preload_core::data::{gen_faraway, gen_faraway_rd, gen_two_moons, FarAwayParams};
use preload_core::harness::eval::score_batch;
use preload_core::harness::{
    confidence, confidence_grid, evaluate, finetune, logit_divergence_diagnostic, ood_suites, prepare_data,
    scaling_probe, train_scratch, DataBundle, DatasetSpec, ExperimentConfig, FinetuneSpec, GridBounds,
    MetricRow, MetricTable,
};
use preload_core::{
    init_params, Error, ExtraHead, MethodKind, ModelParams, ParamTensors, RngState, ScoreRule, Stream,
};

fn small(method: MethodKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::two_moons(method);
    cfg.arch.hidden_dims = vec![16, 16];
    cfg.dataset = DatasetSpec::TwoMoons {
        n_per_class: 100,
        test_per_class: 100,
        noise_sd: 0.1,
    };
    cfg.epochs = 5;
    cfg.batch_size = 32;
    cfg.eval.far_away_count = 200;
    cfg
}

struct Trained {
    params: ModelParams,
    data: DataBundle,
    losses: Vec<f64>,
    train_accuracy: f64,
}

fn trained(method: MethodKind) -> Trained {
    let cfg = ExperimentConfig::two_moons(method);
    let data = prepare_data(&cfg, 0).unwrap();
    let (params, rec) = train_scratch(&cfg, &data, 0).unwrap();
    Trained {
        params,
        data,
        losses: rec.losses(),
        train_accuracy: rec.train_accuracy,
    }
}

fn preload_model() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| trained(MethodKind::PreLoad))
}

fn standard_model() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| trained(MethodKind::Standard))
}

fn directions(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngState::stream(seed, Stream::Probe);
    (0..n).map(|_| rng.unit_vector(2)).collect()
}

#[test]
fn zero_epochs_returns_initialization() {
    let mut cfg = small(MethodKind::PreLoad);
    cfg.epochs = 0;
    let data = prepare_data(&cfg, 3).unwrap();
    let (p, rec) = train_scratch(&cfg, &data, 3).unwrap();
    let init = init_params(
        &cfg.arch,
        ExtraHead::Quadratic,
        &mut RngState::stream(3, Stream::Init),
    )
    .unwrap();
    assert_eq!(p, init);
    assert!(rec.epochs.is_empty());
}

#[test]
fn same_seed_same_losses() {
    let cfg = small(MethodKind::PreLoad);
    let run = || {
        let data = prepare_data(&cfg, 5).unwrap();
        train_scratch(&cfg, &data, 5).unwrap()
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra.losses(), rb.losses());
    assert_eq!(a, b);
    assert_eq!(ra.epochs.len(), cfg.epochs);
}

#[test]
fn standard_training_leaves_extra_head_alone() {
    let cfg = small(MethodKind::Standard);
    let data = prepare_data(&cfg, 1).unwrap();
    let (p, _) = train_scratch(&cfg, &data, 1).unwrap();
    assert_eq!(p.extra_head, ExtraHead::Absent);
    assert!(p.extra_raw_w.iter().all(|&w| w.to_bits() == 0));
    assert_eq!(p.extra_b.to_bits(), 0);
}

#[test]
fn finetune_methods_rejected_from_scratch() {
    let cfg = small(MethodKind::PreLoadFt);
    let data = prepare_data(&cfg, 0).unwrap();
    assert!(matches!(
        train_scratch(&cfg, &data, 0),
        Err(Error::MethodMismatch { .. })
    ));
}

fn base_model(seed: u64) -> (ModelParams, DataBundle) {
    let cfg = small(MethodKind::Standard);
    let data = prepare_data(&cfg, seed).unwrap();
    (train_scratch(&cfg, &data, seed).unwrap().0, data)
}

#[test]
fn head_stage_freezes_everything_else() {
    let (base, data) = base_model(2);
    let mut cfg = small(MethodKind::PreLoadFt);
    cfg.ft = Some(FinetuneSpec {
        head_pretrain_epochs: 3,
        ft_epochs: 0,
        ..FinetuneSpec::default()
    });
    let (p, rec) = finetune(&base, &cfg, &data, 2).unwrap();
    let n = p.tensor_lens().len();
    for (i, (a, b)) in p.tensors().iter().zip(base.tensors()).enumerate().take(n - 2) {
        let same = a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "tensor {i} moved during head pretraining");
    }
    assert!(p.extra_b != 0.0 || p.extra_raw_w.iter().any(|&w| w != 0.0));
    assert!(rec.epochs.iter().all(|e| e.stage == "head"));
}

#[test]
fn finetune_with_no_epochs_only_attaches_head() {
    let (base, data) = base_model(4);
    let mut cfg = small(MethodKind::PreLoadFt);
    cfg.ft = Some(FinetuneSpec {
        head_pretrain_epochs: 0,
        ft_epochs: 0,
        ..FinetuneSpec::default()
    });
    let (p, _) = finetune(&base, &cfg, &data, 4).unwrap();
    assert_eq!(p, base.with_extra_head(ExtraHead::Quadratic));
}

#[test]
fn finetune_needs_ft_block() {
    let (base, data) = base_model(6);
    let mut cfg = small(MethodKind::PreLoadFt);
    cfg.ft = None;
    assert!(matches!(finetune(&base, &cfg, &data, 6), Err(Error::Config(_))));
}

#[test]
fn preload_fits_two_moons() {
    let m = preload_model();
    assert!(m.train_accuracy > 0.97, "{}", m.train_accuracy);
    assert!(m.losses.last().unwrap() < &m.losses[0]);
    let first_five: f64 = m.losses[..5].iter().sum::<f64>() / 5.0;
    let last_five: f64 = m.losses[m.losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(last_five < first_five);
}

#[test]
fn in_test_against_itself_has_chance_auroc() {
    let m = preload_model();
    let fresh = gen_two_moons(500, 0.1, &mut RngState::new(99)).unwrap();
    let suites = vec![("same_distribution".to_string(), fresh.unlabeled())];
    let t = evaluate(
        &m.params,
        MethodKind::PreLoad,
        ScoreRule::NotExtraClass,
        &m.data.test,
        &suites,
    )
    .unwrap();
    let a = t.get("same_distribution", "auroc").unwrap();
    assert!((a - 0.5).abs() <= 0.05, "{a}");
}

#[test]
fn far_away_contrast() {
    let far = |seed| FarAwayParams {
        t: 1e4,
        dim: 2,
        count: 1000,
        seed,
    };
    let suites = vec![
        ("faraway".to_string(), gen_faraway(&far(1)).unwrap()),
        ("faraway_rd".to_string(), gen_faraway_rd(&far(2)).unwrap()),
    ];
    let p = preload_model();
    let t = evaluate(
        &p.params,
        MethodKind::PreLoad,
        ScoreRule::NotExtraClass,
        &p.data.test,
        &suites,
    )
    .unwrap();
    assert_eq!(t.get("faraway", "fpr95"), Some(0.0));
    let s = standard_model();
    let t = evaluate(
        &s.params,
        MethodKind::Standard,
        ScoreRule::MaxSoftmax,
        &s.data.test,
        &suites,
    )
    .unwrap();
    assert!(t.get("faraway_rd", "fpr95").unwrap() >= 0.9);
}

#[test]
fn far_away_scores_sit_below_every_in_distribution_score() {
    let m = preload_model();
    let cfg = ExperimentConfig::two_moons(MethodKind::PreLoad);
    let ins = score_batch(&m.params, ScoreRule::NotExtraClass, &m.data.test.unlabeled()).unwrap();
    let floor = ins.iter().copied().fold(f64::INFINITY, f64::min);
    for (_, suite) in ood_suites(&cfg.eval, 2, 0, None).unwrap() {
        let outs = score_batch(&m.params, ScoreRule::NotExtraClass, &suite).unwrap();
        assert!(outs.iter().all(|&o| o < floor));
    }
}

#[test]
fn evaluate_rejects_bad_input() {
    let m = preload_model();
    assert!(matches!(
        evaluate(
            &m.params,
            MethodKind::PreLoad,
            ScoreRule::NotExtraClass,
            &m.data.test,
            &[]
        ),
        Err(Error::EmptyInput(_))
    ));
    let s = standard_model();
    let suites = vec![("x".to_string(), m.data.test.unlabeled())];
    assert!(matches!(
        evaluate(
            &s.params,
            MethodKind::PreLoad,
            ScoreRule::NotExtraClass,
            &s.data.test,
            &suites
        ),
        Err(Error::MethodMismatch { .. })
    ));
}

#[test]
fn probe_preload_ends_on_extra_class() {
    let m = preload_model();
    let t = [1.0, 10.0, 1e2, 1e3, 1e4];
    let hits = directions(50, 0)
        .iter()
        .filter(|u| {
            scaling_probe(&m.params, u, &t)
                .unwrap()
                .last()
                .unwrap()
                .predicted_class
                == 2
        })
        .count();
    assert!(hits >= 49, "{hits}/50");
}

#[test]
fn probe_standard_stays_confident() {
    let s = standard_model();
    let confident = directions(50, 1)
        .iter()
        .filter(|u| scaling_probe(&s.params, u, &[1e4]).unwrap()[0].max_prob > 0.95)
        .count();
    assert!(confident >= 45, "{confident}/50");
}

#[test]
fn probe_at_origin_matches_forward() {
    let m = preload_model();
    let rows = scaling_probe(&m.params, &[0.6, 0.8], &[0.0]).unwrap();
    let trace = m.params.forward(&[0.0, 0.0]).unwrap();
    assert_eq!(
        rows[0].predicted_class,
        preload_core::head::probs(&trace).argmax()
    );
}

#[test]
fn divergence_is_driven_by_extra_class() {
    let m = preload_model();
    for u in directions(10, 2) {
        let r = logit_divergence_diagnostic(&m.params, &u, 1e2, 1e4).unwrap();
        assert_eq!(r.dominant_class, 2);
        assert!(r.gap_growth > 0.0);
        let none = logit_divergence_diagnostic(&m.params, &u, 50.0, 50.0).unwrap();
        assert!(none.per_class.iter().all(|&g| g == 0.0));
    }
}

#[test]
fn confidence_drops_on_a_far_ring() {
    let m = preload_model();
    let on_support: f64 = m
        .data
        .train
        .inputs
        .row_iter()
        .map(|x| confidence(&m.params.forward(x).unwrap()))
        .sum::<f64>()
        / m.data.train.len() as f64;
    let ring: f64 = (0..360)
        .map(|d| {
            let a = (d as f64).to_radians();
            confidence(&m.params.forward(&[1e3 * a.cos(), 1e3 * a.sin()]).unwrap())
        })
        .sum::<f64>()
        / 360.0;
    assert!(on_support - ring >= 0.3, "{on_support} vs {ring}");

    let b = GridBounds {
        x_min: -2.0,
        x_max: 3.0,
        y_min: -1.5,
        y_max: 2.0,
    };
    let grid = confidence_grid(&m.params, b, (3, 3)).unwrap();
    assert_eq!(grid.len(), 9);
    assert!(grid.iter().all(|r| r.confidence > 0.0 && r.confidence <= 1.0));
}

#[test]
fn saved_model_evaluates_identically() {
    let m = preload_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    m.params.save(&path).unwrap();
    let loaded = ModelParams::load(&path).unwrap();
    assert_eq!(loaded, m.params);
    let suites = ood_suites(&ExperimentConfig::two_moons(MethodKind::PreLoad).eval, 2, 0, None).unwrap();
    let a = evaluate(
        &m.params,
        MethodKind::PreLoad,
        ScoreRule::NotExtraClass,
        &m.data.test,
        &suites,
    )
    .unwrap();
    let b = evaluate(
        &loaded,
        MethodKind::PreLoad,
        ScoreRule::NotExtraClass,
        &m.data.test,
        &suites,
    )
    .unwrap();
    assert_eq!(a.to_csv_string(), b.to_csv_string());
}

#[test]
fn aggregate_reports_mean_and_stderr() {
    let table = |v: f64| MetricTable {
        rows: vec![MetricRow {
            dataset: "faraway".into(),
            method: "preload".into(),
            metric: "fpr95".into(),
            value: v,
            stderr: 0.0,
        }],
    };
    let agg = MetricTable::aggregate(&[table(1.0), table(3.0)]);
    assert_eq!(agg.rows[0].value, 2.0);
    assert!((agg.rows[0].stderr - 1.0).abs() < 1e-15);
    assert_eq!(
        agg.to_csv_string(),
        "dataset,method,metric,value,stderr\nfaraway,preload,fpr95,2.000000,1.000000\n"
    );
}
