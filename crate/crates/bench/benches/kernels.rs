use std::hint::black_box;

use corticarc_core::connectivity::{compute_stencil, for_each_target, GridSpec, KernelSpec};
use corticarc_core::engine::generate_external_events;
use corticarc_core::model::{decay_state, integrate_input_queue, InputEvent, NeuronParams, NeuronState};
use corticarc_core::{run, SimConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn neuron(c: &mut Criterion) {
    let p = NeuronParams::excitatory();
    let s = NeuronState {
        c: 0.3,
        ..NeuronState::with_potential(-58.0)
    };
    c.bench_function("decay_state", |b| b.iter(|| decay_state(black_box(&s), &p, black_box(0.37))));

    // A step's worth of inputs for one neuron in a busy regime.
    let events: Vec<InputEvent> = (0..64)
        .map(|i| InputEvent {
            time: i as f64 / 64.0,
            weight: if i % 5 == 0 { -1.2 } else { 0.4 },
            source: i,
        })
        .collect();
    let mut group = c.benchmark_group("integrate_input_queue");
    group.throughput(Throughput::Elements(events.len() as u64));
    group.bench_function("64_events", |b| {
        let mut spikes = Vec::new();
        b.iter(|| {
            spikes.clear();
            integrate_input_queue(black_box(&s), &p, black_box(&events), &mut spikes)
        })
    });
    group.finish();
}

fn synapse_generation(c: &mut Criterion) {
    let grid = GridSpec::reference(24);
    let source = grid.gid(grid.column_index(12, 12), 0);
    let mut group = c.benchmark_group("for_each_target");
    for (name, kernel) in [
        ("gaussian", KernelSpec::reference_gaussian()),
        ("exponential", KernelSpec::reference_exponential()),
    ] {
        let stencil = compute_stencil(&kernel, &grid);
        let mut fanout = 0u64;
        for_each_target(source, &grid, &stencil, 1, |_| fanout += 1);
        group.throughput(Throughput::Elements(fanout));
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut n = 0u32;
                for_each_target(black_box(source), &grid, &stencil, 1, |t| n ^= t);
                n
            })
        });
    }
    group.finish();
}

fn external_drive(c: &mut Criterion) {
    let spec = SimConfig::reference(GridSpec::reference(1), KernelSpec::reference_gaussian()).external;
    c.bench_function("external_events", |b| {
        let mut step = 0u64;
        b.iter(|| {
            step += 1;
            generate_external_events(black_box(17), step, &spec, 1.0, 1)
        })
    });
}

/// Whole simulation of a small grid, so collection, delivery, and sorting
/// are measured together.
fn small_network(c: &mut Criterion) {
    let grid = GridSpec {
        neurons_per_column: 200,
        ..GridSpec::reference(4)
    };
    let mut cfg = SimConfig::reference(grid, KernelSpec::reference_gaussian());
    cfg.duration_s = 0.05;
    let mut group = c.benchmark_group("run_4x4_50ms");
    group.sample_size(10);
    for workers in [1, 4] {
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &w| {
            b.iter(|| run(&cfg, w).expect("small run").total_spikes)
        });
    }
    group.finish();
}

criterion_group!(benches, neuron, synapse_generation, external_drive, small_network);
criterion_main!(benches);
