use preload_core::data::split;
use preload_core::metrics::{auroc, ece, fpr_at_95_tpr, CalibrationInput, ScoreSet};
use preload_core::objectives::method_loss;
use preload_core::optimizer::cosine_lr;
use preload_core::tensor::stable_softmax;
use preload_core::{
    data::{rescale_unit, LabeledSet},
    init_params, Architecture, LossConfig, Matrix, MethodKind, ModelParams, RngState,
};
use proptest::prelude::*;

fn model(seed: u64, method: MethodKind, hidden: Vec<usize>) -> ModelParams {
    let arch = Architecture::new(2, hidden, 2).unwrap();
    let mut rng = RngState::new(seed);
    let mut p = init_params(&arch, method.extra_head(), &mut rng).unwrap();
    for w in p.extra_raw_w.iter_mut() {
        *w = rng.next_normal();
    }
    p.extra_b = rng.next_normal();
    p
}

fn finite_vec(len: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(z in finite_vec(1..12), shift in -1e3f64..1e3) {
        let p = stable_softmax(&z).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let q = stable_softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn extra_logit_never_below_bias(seed in any::<u64>(), x in finite_vec(2)) {
        let p = model(seed, MethodKind::PreLoad, vec![6, 5]);
        let t = p.forward(&x).unwrap();
        prop_assert!(t.extra_logit.unwrap() >= p.extra_b);
    }

    #[test]
    fn extra_logit_is_quadratically_homogeneous_without_biases(
        seed in any::<u64>(),
        x in finite_vec(2),
        s in 0.01f64..100.0,
    ) {
        let mut p = model(seed, MethodKind::PreLoad, vec![5, 4]);
        for layer in p.layers.iter_mut() {
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let sx: Vec<f64> = x.iter().map(|v| s * v).collect();
        let base = p.forward(&x).unwrap().extra_logit.unwrap() - p.extra_b;
        let scaled = p.forward(&sx).unwrap().extra_logit.unwrap() - p.extra_b;
        let expect = s * s * base;
        prop_assert!((scaled - expect).abs() <= 1e-9 * expect.abs().max(1.0));
    }

    #[test]
    fn batch_forward_equals_single_forward(seed in any::<u64>(), xs in prop::collection::vec(finite_vec(2), 1..8)) {
        let p = model(seed, MethodKind::PreLoad, vec![4]);
        let batch = p.forward_batch(&Matrix::from_rows(&xs).unwrap()).unwrap();
        for (x, t) in xs.iter().zip(&batch) {
            prop_assert_eq!(&p.forward(x).unwrap(), t);
        }
    }

    #[test]
    fn objectives_ignore_batch_order(
        seed in any::<u64>(),
        method in prop::sample::select(vec![
            MethodKind::Standard,
            MethodKind::PreLoad,
            MethodKind::NoneClass,
            MethodKind::OutlierExposure,
            MethodKind::EnergyFt,
        ]),
        rot in 0usize..5,
    ) {
        let p = model(seed, method, vec![4]);
        let mut rng = RngState::new(seed ^ 0x55);
        let xs: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.next_normal(), rng.next_normal()]).collect();
        let ys: Vec<usize> = (0..5).map(|i| i % 2).collect();
        let traces: Vec<_> = xs.iter().map(|x| p.forward(x).unwrap()).collect();
        let ood: Vec<_> = xs.iter().map(|x| p.forward(&[x[1] * 4.0, x[0] * 4.0]).unwrap()).collect();
        let cfg = LossConfig { lambda: 0.7, ..LossConfig::default() };
        let a = method_loss(method, &traces, &ys, &ood, &cfg).unwrap().value;

        let mut t2 = traces.clone();
        let mut y2 = ys.clone();
        let mut o2 = ood.clone();
        t2.rotate_left(rot);
        y2.rotate_left(rot);
        o2.rotate_right(rot);
        let b = method_loss(method, &t2, &y2, &o2, &cfg).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn metrics_stay_in_range(ins in finite_vec(1..40), outs in finite_vec(1..40)) {
        let s = ScoreSet::new(ins, outs);
        let f = fpr_at_95_tpr(&s).unwrap();
        let a = auroc(&s).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((0.0..=1.0).contains(&a));
        // flipping the sign of every score reflects AUROC about one half
        let flipped = ScoreSet::new(
            s.in_scores.iter().map(|v| -v).collect(),
            s.out_scores.iter().map(|v| -v).collect(),
        );
        prop_assert!((auroc(&flipped).unwrap() - (1.0 - a)).abs() <= 1e-12);
    }

    #[test]
    fn ece_stays_in_range(rows in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..60)) {
        let (conf, correct): (Vec<f64>, Vec<bool>) = rows.into_iter().unzip();
        let e = ece(&CalibrationInput::new(conf, correct)).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn split_partitions_every_index(n in 4usize..80, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let inputs = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let set = LabeledSet::new(inputs, labels, 3).unwrap();
        let (a, b) = split(&set, frac, &mut RngState::new(seed)).unwrap();
        prop_assert_eq!(a.len() + b.len(), n);
        let mut seen: Vec<usize> = a.inputs.as_slice().iter().chain(b.inputs.as_slice()).map(|&v| v as usize).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for part in [&a, &b] {
            for (i, &y) in part.labels.iter().enumerate() {
                prop_assert_eq!(part.inputs.get(i, 0) as usize % 3, y);
            }
        }
    }

    #[test]
    fn cosine_schedule_is_nonincreasing(total in 1usize..500, eta in 1e-5f64..1.0) {
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = cosine_lr(step, total, eta).unwrap();
            prop_assert!(lr <= prev + 1e-18);
            prop_assert!(lr >= -1e-18 && lr <= eta);
            prev = lr;
        }
    }

    #[test]
    fn rescale_is_idempotent(img in finite_vec(1..50)) {
        let once = rescale_unit(&img);
        let twice = rescale_unit(&once);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert!(once.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
