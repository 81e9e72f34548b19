use criterion::{black_box, criterion_group, criterion_main, Criterion};
use preload_bench::{calibration, inputs, model, scores, short_config};
use preload_core::harness::{prepare_data, train_scratch};
use preload_core::metrics::{auroc, ece, fpr_at_95_tpr};
use preload_core::objectives::method_loss;
use preload_core::{LossConfig, MethodKind};

fn forward_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("network");
    let xs = inputs(128, 1);
    let ood = inputs(128, 2);
    for method in [MethodKind::Standard, MethodKind::PreLoad] {
        let p = model(method, &[64, 64], 0);
        g.bench_function(format!("forward_batch128/{method}"), |b| {
            b.iter(|| p.forward_batch(black_box(&xs)).unwrap())
        });
        let traces = p.forward_batch(&xs).unwrap();
        let ood_traces = p.forward_batch(&ood).unwrap();
        let labels: Vec<usize> = (0..128).map(|i| i % 2).collect();
        let cfg = LossConfig::default();
        g.bench_function(format!("loss_and_backward128/{method}"), |b| {
            b.iter(|| {
                let loss = method_loss(method, &traces, &labels, &ood_traces, &cfg).unwrap();
                for (t, gl) in traces.iter().zip(&loss.grad_in) {
                    black_box(p.backward(t, gl).unwrap());
                }
            })
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut g = c.benchmark_group("metrics");
    let s = scores(10_000, 3);
    g.bench_function("fpr95/10k", |b| b.iter(|| fpr_at_95_tpr(black_box(&s)).unwrap()));
    g.bench_function("auroc/10k", |b| b.iter(|| auroc(black_box(&s)).unwrap()));
    let cal = calibration(10_000, 4);
    g.bench_function("ece/10k", |b| b.iter(|| ece(black_box(&cal)).unwrap()));
    g.finish();
}

fn training_epoch(c: &mut Criterion) {
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    for method in [MethodKind::Standard, MethodKind::PreLoad] {
        let cfg = short_config(method, 1);
        let data = prepare_data(&cfg, 0).unwrap();
        g.bench_function(format!("one_epoch/{method}"), |b| {
            b.iter(|| train_scratch(&cfg, &data, 0).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward_backward, metrics, training_epoch);
criterion_main!(benches);
