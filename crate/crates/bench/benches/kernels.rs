//! Microbenchmarks for the numeric kernels that dominate experiment wall
//! time: the denoiser forward pass, the fused loss/gradient pass, the
//! round-trip membership score, the rank AUC, the energy distance, and a
//! full training iteration.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use mdlab_core::rng::{new_rng, normal_tensor};
use mdlab_core::{
    auc, energy_distance, gen_dataset, secmi_score, train_ddpm, Arch, AttackScores, DatasetSpec,
    Denoiser, Generator, LabeledSample, NoiseSchedule, Orientation, Tensor, TrainConfig,
};

fn toy_arch() -> Arch {
    Arch { input_dim: 2, hidden: vec![64, 64], embed_dim: 16, num_conditions: None, t_steps: 100 }
}

fn toy_data() -> Vec<LabeledSample> {
    let spec = DatasetSpec {
        generator: Generator::GaussianMixtureRing,
        n_member: 64,
        n_test: 1,
        dim: 2,
        n_classes: 8,
        sigma: 0.5,
        conditional: false,
        diversification_k: 1,
        duplication: None,
    };
    gen_dataset(&spec, 7).unwrap()
}

fn bench_kernels(c: &mut Criterion) {
    let arch = toy_arch();
    let model = Denoiser::init(arch, 3).unwrap();
    let sched = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
    let mut rng = new_rng(11);
    let x = normal_tensor(vec![2], &mut rng);

    c.bench_function("forward_64x64", |b| {
        b.iter(|| model.forward(black_box(&x), black_box(50), None).unwrap())
    });

    let xs: Vec<Tensor> = (0..64).map(|_| normal_tensor(vec![2], &mut rng)).collect();
    let ts: Vec<usize> = (1..=64).collect();
    let conds = vec![None; 64];
    let targets: Vec<Tensor> = (0..64).map(|_| normal_tensor(vec![2], &mut rng)).collect();
    c.bench_function("loss_and_grads_batch64", |b| {
        b.iter(|| model.loss_and_grads(black_box(&xs), &ts, &conds, &targets).unwrap())
    });

    c.bench_function("secmi_score_t10_stride1", |b| {
        b.iter(|| secmi_score(&model, black_box(&x), None, &sched, 10, 1).unwrap())
    });

    let scores = AttackScores {
        attack: "bench".into(),
        orientation: Orientation::LowerMeansMember,
        params: serde_json::Value::Null,
        member_scores: (0..512).map(|i| ((i * 37) % 101) as f64 / 101.0).collect(),
        nonmember_scores: (0..512).map(|i| ((i * 53) % 103) as f64 / 103.0).collect(),
    };
    c.bench_function("auc_512v512", |b| b.iter(|| auc(black_box(&scores)).unwrap()));

    let a: Vec<Tensor> = (0..256).map(|_| normal_tensor(vec![2], &mut rng)).collect();
    let bset: Vec<Tensor> = (0..256).map(|_| normal_tensor(vec![2], &mut rng)).collect();
    c.bench_function("energy_distance_256v256", |b| {
        b.iter(|| energy_distance(black_box(&a), black_box(&bset)).unwrap())
    });

    let data = toy_data();
    let refs: Vec<&LabeledSample> = data.iter().filter(|s| s.member).collect();
    let train_cfg = TrainConfig {
        iterations: 100,
        batch_size: 64,
        lr: 2e-3,
        lr_final: None,
        seed: 5,
        conditional: false,
    };
    c.bench_function("train_100_iterations_batch64", |b| {
        b.iter_batched(
            || model.clone(),
            |m| train_ddpm(&m, black_box(&refs), &sched, &train_cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_kernels
}
criterion_main!(benches);
