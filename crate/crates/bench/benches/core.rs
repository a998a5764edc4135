use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use roimt_bench::fixture;
use roimt_core::eval::auc_n;
use roimt_core::roi::{compute_stack_rois, RoiConfig};
use roimt_core::trainer::{dataset_rois, prepare_batch, train_step, BatchSampler, TrainState};
use roimt_core::{Architecture, Label, Network, TrainConfig};

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_batch64");
    for size in [32usize, 64] {
        let ds = fixture(size, 3);
        let net = Network::new(Architecture::reference(size)).unwrap();
        let params = net.init_params::<f32>(&mut ChaCha8Rng::seed_from_u64(0));
        let inputs: Vec<_> = ds.slices().take(64).map(|s| &s.pixels).collect();
        g.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, _| {
            b.iter(|| net.forward_batch(&params, &inputs).unwrap())
        });
    }
    g.finish();
}

fn step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    let ds = fixture(32, 4);
    let ds = ds.with_label_budget(40, &mut ChaCha8Rng::seed_from_u64(1));
    for (name, cfg) in [
        ("proposed", TrainConfig::desk()),
        ("supervised_weights", TrainConfig::desk().supervised()),
    ] {
        let net = Network::new(Architecture::reference(32)).unwrap();
        let rois = dataset_rois(&ds, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sampler = BatchSampler::new(&ds, &cfg).unwrap();
        let batch = sampler.sample(&mut rng);
        let prepared = prepare_batch(&ds, &batch, &rois, &cfg, 1, &mut rng).unwrap();
        let mut state = TrainState::<f32>::new(&net, 0);
        g.bench_function(name, |b| {
            b.iter(|| train_step(&net, &mut state, &prepared, &cfg, 1_000_000).unwrap())
        });
    }
    g.finish();
}

fn roi(c: &mut Criterion) {
    let ds = fixture(64, 4);
    let cfg = RoiConfig::from_fraction(64, 64, 0.01).unwrap();
    c.bench_function("compute_stack_rois_120x64", |b| {
        b.iter(|| compute_stack_rois(ds.slices(), &cfg, 0.4).unwrap())
    });
}

fn auc(c: &mut Criterion) {
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
    let truth: Vec<Label> = (0..n).map(|i| Label::from_index(i % 3).unwrap()).collect();
    c.bench_function("auc_n_10k", |b| b.iter(|| auc_n(&scores, &truth).unwrap()));
}

criterion_group!(benches, forward, step, roi, auc);
criterion_main!(benches);
