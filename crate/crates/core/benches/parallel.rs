//! Parallel vs sequential execution of the data-parallel stages.
//!
//! With `--no-default-features` both variants run on the calling thread,
//! which gives the fallback's baseline.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use formctl::config::ExperimentConfig;
use formctl::datagen::{generate_dataset_with, GenerationConfig};
use formctl::par::{self, Execution};
use formctl::pipeline;
use formctl::simcore::{run_closed_loop_with, ControllerMode};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset();
    cfg.generation.trajectories = 8;
    cfg.generation.horizon = 5.0;
    cfg.training.epochs = 3;
    cfg.training.hidden = vec![32, 32];
    cfg
}

fn datagen(c: &mut Criterion) {
    let cfg = small_config();
    let scenario = cfg.scenario().unwrap();
    let gen: GenerationConfig = cfg.generation_config();
    let mut group = c.benchmark_group("datagen");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(generate_dataset_with(&scenario, &gen, exec).unwrap()))
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let cfg = small_config();
    let (ds, _) = pipeline::generate(&cfg, Execution::Auto).unwrap();
    let mut group = c.benchmark_group("train_policies");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(pipeline::train_policies(&cfg, &ds, exec).unwrap()))
        });
    }
    group.finish();
}

fn batch_simulation(c: &mut Criterion) {
    // Independent closed-loop runs, one per seed.
    let sims: Vec<_> = (0..8u64)
        .map(|seed| {
            let mut cfg = ExperimentConfig::preset();
            cfg.seed = seed;
            cfg.simulation.dt = 1e-3;
            cfg.simulation.t_end = 5.0;
            cfg.simulation.log_stride = 100;
            cfg.sim_config(ControllerMode::AdaptiveOnly).unwrap()
        })
        .collect();
    let mut group = c.benchmark_group("batch_simulation");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                black_box(par::map_indexed(exec, sims.len(), 1, |k| {
                    run_closed_loop_with(&sims[k], None, Execution::Sequential).unwrap()
                }))
            })
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(5));
    targets = datagen, training, batch_simulation
}
criterion_main!(benches);
