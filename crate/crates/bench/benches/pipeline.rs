use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgcl_bench::synthetic_dataset;
use tgcl_core::model::infer_flows;
use tgcl_core::{build_graph, ModelDims, ModelParams, Origin, Split, TrainConfig, Trainer};

fn graph_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_graph");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for len in [60usize, 300, 1500] {
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen_range(0..64)).collect();
        group.throughput(Throughput::Bytes(len as u64));
        group.bench_with_input(BenchmarkId::from_parameter(len), &bytes, |b, bytes| {
            b.iter(|| build_graph(bytes, 5, Origin::Payload).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let ds = synthetic_dataset(4, 16, 2);
    let flows: Vec<_> = ds.indices(Split::Test).into_iter().map(|i| &ds.flows[i]).collect();
    let params = ModelParams::init(ModelDims::uniform(50, ds.num_classes()), 0).unwrap();
    let packets: usize = flows.iter().map(|f| f.graphs.len()).sum();
    let mut group = c.benchmark_group("forward");
    group.throughput(Throughput::Elements(packets as u64));
    group.bench_function("infer_flows", |b| b.iter(|| infer_flows(&params, &flows, 64).unwrap()));
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let ds = synthetic_dataset(4, 16, 3);
    let cfg = TrainConfig::default();
    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    group.bench_function("optimizer_step", |b| {
        b.iter_batched(
            || Trainer::new(&ds, cfg.clone()).unwrap(),
            |mut t| t.step().unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, graph_build, forward, train_step);
criterion_main!(benches);
