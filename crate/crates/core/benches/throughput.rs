//! Sequential versus rayon throughput for the three data-parallel workloads.
//! Run with `--features parallel` to get the parallel side of each group.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speechbci::diffusion::{batch_loss_and_grad, infer_window, LossOptions, ModelConfig, ModelParams, NoiseSchedule, TrainingExample, TAU_INFER};
use speechbci::par;
use speechbci::protocol::{preprocess_dataset, SessionTiming};
use speechbci::synth::{generate_dataset, generate_trial, SynthConfig};
use speechbci::tensor::Tensor;

const BATCH: usize = 16;

fn windows() -> Vec<Tensor> {
    let config = SynthConfig { trials_per_class: BATCH / 4, ..SynthConfig::default() };
    let data = generate_dataset(&config).unwrap();
    preprocess_dataset(&data, &SessionTiming::default()).unwrap().into_iter().map(|w| w.x).collect()
}

fn throughput(c: &mut Criterion) {
    let params = ModelParams::init(&ModelConfig::default(), 42).unwrap();
    let schedule = NoiseSchedule::default();
    let xs = windows();
    let opts = LossOptions::default();

    let gradient = |i: usize, x: &Tensor| {
        let batch = [TrainingExample { x0: x, label: i % 4 }];
        batch_loss_and_grad(&batch, &params, &schedule, &opts, i as u64).unwrap().1
    };
    let inference = |_: usize, x: &Tensor| infer_window(x, &params, &schedule, TAU_INFER).unwrap();
    let synth_config = SynthConfig::default();
    let labels: Vec<usize> = (0..BATCH).map(|i| i % 4).collect();
    let synthesis = |i: usize, &label: &usize| {
        generate_trial(label, &synth_config, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap()
    };

    let mut g = c.benchmark_group("batch_gradient");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("sequential", BATCH), |b| b.iter(|| par::sequential_map(&xs, gradient)));
    #[cfg(feature = "parallel")]
    g.bench_function(BenchmarkId::new("parallel", BATCH), |b| b.iter(|| par::parallel_map(&xs, gradient)));
    g.finish();

    let mut g = c.benchmark_group("predict_batch");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("sequential", BATCH), |b| b.iter(|| par::sequential_map(&xs, inference)));
    #[cfg(feature = "parallel")]
    g.bench_function(BenchmarkId::new("parallel", BATCH), |b| b.iter(|| par::parallel_map(&xs, inference)));
    g.finish();

    let mut g = c.benchmark_group("synthesis");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("sequential", BATCH), |b| b.iter(|| par::sequential_map(&labels, synthesis)));
    #[cfg(feature = "parallel")]
    g.bench_function(BenchmarkId::new("parallel", BATCH), |b| b.iter(|| par::parallel_map(&labels, synthesis)));
    g.finish();
}

criterion_group!(benches, throughput);
criterion_main!(benches);
