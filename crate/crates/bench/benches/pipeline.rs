use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use unirobust_bench::{classification_batch, moons};
use unirobust_core::aggregate::agg_with_weights;
use unirobust_core::numgrad::Evaluation;
use unirobust_core::perturb_x::pgd_perturb;
use unirobust_core::pipeline::train;
use unirobust_core::{AggSpec, InputPerturbSpec, LossSpec, Norm, RobustSpec, Selection, Stance, TrainSettings};

fn forward_backward(c: &mut Criterion) {
    let (model, batch) = classification_batch(64);
    let spec = LossSpec::Credal { stance: Stance::Pessimistic, alpha: 0.1 };
    c.bench_function("forward_backward_64", |b| {
        b.iter(|| {
            let e = Evaluation::new(&model, black_box(&batch), &spec).unwrap();
            let w = vec![1.0 / 64.0; 64];
            black_box(e.backward(&w).unwrap())
        })
    });
}

fn pgd(c: &mut Criterion) {
    let (model, batch) = classification_batch(64);
    let spec = InputPerturbSpec { stance: Stance::Pessimistic, radius: 0.1, norm: Norm::L2, ..Default::default() };
    c.bench_function("pgd_7_steps_64", |b| {
        b.iter(|| black_box(pgd_perturb(&model, black_box(&batch), &LossSpec::CrossEntropy, &spec).unwrap()))
    });
}

fn aggregate(c: &mut Criterion) {
    let losses: Vec<f64> = (0..1024).map(|i| (i as f64 * 0.37).sin().abs() * 3.0).collect();
    let spec = AggSpec { stance: Stance::Pessimistic, tau: 0.5 };
    c.bench_function("kl_dual_1024", |b| b.iter(|| black_box(agg_with_weights(black_box(&losses), &spec).unwrap())));
}

fn epoch(c: &mut Criterion) {
    let ds = moons();
    let settings = TrainSettings { epochs: 1, batch_size: 32, hidden: vec![16] };
    let mut joint = RobustSpec::erm();
    joint.enrich = unirobust_core::EnrichSpec::vrm(0.1);
    joint.input = InputPerturbSpec { stance: Stance::Pessimistic, radius: 0.1, ..Default::default() };
    joint.label.alpha = 0.1;
    joint.aggregate = AggSpec { stance: Stance::Pessimistic, tau: 1.0 };
    let mut g = c.benchmark_group("train_epoch_400");
    g.sample_size(20);
    g.bench_function("erm", |b| {
        b.iter(|| black_box(train(&RobustSpec::erm(), &ds, &settings, &Selection::default(), 0).unwrap()))
    });
    g.bench_function("all_stages", |b| {
        b.iter(|| black_box(train(&joint, &ds, &settings, &Selection::default(), 0).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, forward_backward, pgd, aggregate, epoch);
criterion_main!(benches);
