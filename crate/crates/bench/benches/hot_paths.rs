use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use infoseg::evaluator::{hungarian_match, ConfusionMatrix};
use infoseg::mi_objectives::{mi_step_loss, AssignmentMode, EstimatorKind};
use infoseg::network::{Network, NetworkConfig};
use infoseg::segmenter::{class_scores, prob_volume};
use infoseg_bench::{random_counts, random_tensor};

fn hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian_match");
    for k in [3, 15, 27] {
        let cm = ConfusionMatrix::from_counts(random_counts(k, k as u64)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(k), &cm, |b, cm| {
            b.iter(|| hungarian_match(cm).unwrap())
        });
    }
    group.finish();
}

fn desk_network() -> Network {
    Network::init(&NetworkConfig {
        feature_dim: 32,
        block_a_widths: [16, 32, 32, 32],
        ..Default::default()
    })
    .unwrap()
}

fn forward_and_loss(c: &mut Criterion) {
    let net = desk_network();
    let x = random_tensor(&[32, 3, 32, 32], 1);
    c.bench_function("forward_b32_32x32", |b| b.iter(|| net.forward(&x).unwrap()));

    let (local, global) = net.forward(&x).unwrap();
    c.bench_function("scores_and_softmax", |b| {
        b.iter(|| prob_volume(&class_scores(&local, &global).unwrap(), 0.8).unwrap())
    });

    let volume = prob_volume(&class_scores(&local, &global).unwrap(), 0.8).unwrap();
    let pairing: Vec<usize> = (0..32).map(|i| (i + 1) % 32).collect();
    for mode in [AssignmentMode::Soft, AssignmentMode::Hard] {
        c.bench_function(&format!("mi_step_loss_{mode}"), |b| {
            b.iter(|| mi_step_loss(&local, &volume, &global, &pairing, mode, EstimatorKind::Jsd).unwrap())
        });
    }

    let mut net = desk_network();
    c.bench_function("train_step_backward", |b| {
        b.iter(|| {
            let (local, global) = net.forward_train(&x).unwrap();
            let volume = prob_volume(&class_scores(&local, &global).unwrap(), 0.8).unwrap();
            let step = mi_step_loss(
                &local,
                &volume,
                &global,
                &pairing,
                AssignmentMode::Soft,
                EstimatorKind::Jsd,
            )
            .unwrap();
            step.loss.backward().unwrap()
        })
    });
}

criterion_group!(benches, hungarian, forward_and_loss);
criterion_main!(benches);
