use criterion::{criterion_group, criterion_main, Criterion};
use dapperfl_core::experiment::{prepare_run, ExperimentConfig};
use dapperfl_core::server::{run_round, LocalUpdate, RoundConfig};

fn bench_round(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let (fed, initial) = prepare_run(&cfg, 1).unwrap();
    let mut group = c.benchmark_group("round");
    group.sample_size(20);
    for update in [LocalUpdate::FusionPruning, LocalUpdate::Dense, LocalUpdate::RandomDrop] {
        for parallel in [false, true] {
            let rc = RoundConfig {
                hyper: cfg.hyper_params(),
                update,
                parallel,
            };
            let name = format!("{update:?}/{}", if parallel { "parallel" } else { "sequential" });
            group.bench_function(name, |b| b.iter(|| run_round(&initial, &fed, 1, &rc).unwrap()));
        }
    }
    group.finish();
}

criterion_group!(benches, bench_round);
criterion_main!(benches);
