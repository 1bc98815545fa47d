use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use splitsim_bench::bench_dataset;
use splitsim_core::{
    gpsl_schedule, iid_partition, train_epoch, Architecture, GradientWeighting, OptimizerConfig,
    SplitModel,
};

fn train_step(c: &mut Criterion) {
    let dataset = bench_dataset();
    let partition = iid_partition(&dataset, 16, 3).unwrap();
    let arch = Architecture::mlp(32, &[32, 32], 10, false).unwrap();

    c.bench_function("split_train_epoch_10k_samples", |b| {
        b.iter(|| {
            let mut model = SplitModel::new(arch.clone(), 16, 5).unwrap();
            let mut opt = model.optimizer_state(OptimizerConfig::default());
            let schedule = gpsl_schedule(partition.client_sizes(), 128, 7).unwrap();
            train_epoch(
                black_box(&mut model),
                &mut opt,
                &dataset,
                &partition,
                &schedule,
                9,
                GradientWeighting::DatasetFraction,
            )
            .unwrap()
        })
    });
}

fn bench_config() -> Criterion {
    Criterion::default().sample_size(10)
}

criterion_group! {
    name = benches;
    config = bench_config();
    targets = train_step
}
criterion_main!(benches);
