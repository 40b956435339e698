mod common;

use common::{with_group, Backend, BACKENDS};
use corticarc_core::connectivity::{
    compute_stencil, expected_recurrent_synapses, generate_outgoing_synapses,
    recurrent_synapses_variance, GridSpec, KernelSpec, SynapseChecksum, SynapseGenSpec,
};
use corticarc_core::construction::{construct_network, NetworkSpec, WorkerNetwork};
use corticarc_core::delivery::{deliver_spikes, DeliveryStats};
use corticarc_core::model::SpikeEvent;
use corticarc_core::partition::map_columns_to_workers;
use corticarc_core::rng::{KeyedRng, Purpose};

fn small_grid(side: usize, per_column: usize) -> GridSpec {
    GridSpec {
        nx: side,
        ny: side,
        spacing_um: 100.0,
        neurons_per_column: per_column,
        excitatory_fraction: 0.8,
    }
}

fn spec(grid: GridSpec, kernel: KernelSpec) -> NetworkSpec {
    NetworkSpec {
        grid,
        kernel,
        synapses: SynapseGenSpec::default(),
        seed: 11,
    }
}

fn build(b: Backend, n: usize, spec: &NetworkSpec) -> Vec<WorkerNetwork> {
    let stencil = compute_stencil(&spec.kernel, &spec.grid);
    let pmap = map_columns_to_workers(&spec.grid, n).unwrap();
    with_group(b, n, |t| construct_network(t, spec, &stencil, &pmap).unwrap())
}

fn total_checksum(nets: &[WorkerNetwork]) -> SynapseChecksum {
    let mut c = SynapseChecksum::default();
    for n in nets {
        c.merge(&n.stats.checksum);
    }
    c
}

#[test]
fn every_generated_synapse_is_received_once() {
    let s = spec(small_grid(6, 40), KernelSpec::reference_gaussian());
    for b in BACKENDS {
        let nets = build(b, 4, &s);
        let generated: u64 = nets.iter().map(|n| n.stats.synapses_generated).sum();
        let received: u64 = nets.iter().map(|n| n.stats.synapses_received).sum();
        let stored: usize = nets.iter().map(|n| n.incoming.synapse_count()).sum();
        assert_eq!(generated, received);
        assert_eq!(received, stored as u64);
        // Per pair: what w sends to v is what v expects from w.
        for (w, nw) in nets.iter().enumerate() {
            for (v, nv) in nets.iter().enumerate() {
                assert_eq!(nw.directory.outgoing_counts[v], nv.directory.incoming_counts[w]);
                assert_eq!(nw.directory.is_target(v), nv.directory.is_source(w));
            }
        }
    }
}

#[test]
fn synaptic_matrix_does_not_depend_on_worker_count() {
    let s = spec(small_grid(6, 40), KernelSpec::reference_exponential());
    let one = total_checksum(&build(Backend::InProcess, 1, &s));
    for n in [2, 3, 4, 6, 9] {
        assert_eq!(total_checksum(&build(Backend::InProcess, n, &s)), one, "{n} workers");
    }
    assert_eq!(total_checksum(&build(Backend::Tcp, 4, &s)), one);
}

#[test]
fn stored_synapses_match_the_source_side_generator() {
    let s = spec(small_grid(4, 30), KernelSpec::reference_gaussian());
    let stencil = compute_stencil(&s.kernel, &s.grid);
    let nets = build(Backend::InProcess, 4, &s);
    for source in 0..s.grid.neurons() as u32 {
        let mut want: Vec<(u32, u16, u32)> =
            generate_outgoing_synapses(source, &s.grid, &stencil, &s.synapses, s.seed)
                .iter()
                .map(|r| (r.target, r.delay, r.weight.to_bits()))
                .collect();
        want.sort_unstable();
        let mut got = Vec::new();
        for n in &nets {
            n.incoming.arborize(source, |d, targets, weights| {
                for (&t, &w) in targets.iter().zip(weights) {
                    got.push((n.layout.gid(t as usize), d, w.to_bits()));
                }
            });
        }
        got.sort_unstable();
        assert_eq!(got, want, "source {source}");
    }
}

#[test]
fn quadrants_of_a_24_grid_all_reach_each_other() {
    let s = spec(small_grid(24, 10), KernelSpec::reference_gaussian());
    let nets = build(Backend::InProcess, 4, &s);
    for n in &nets {
        let others: Vec<usize> = (0..4).collect();
        assert_eq!(n.directory.targets, others, "worker {}", n.layout.rank);
        assert_eq!(n.directory.sources, others);
    }
}

#[test]
fn synapse_count_is_within_three_sigma_of_forecast() {
    let grid = small_grid(12, 60);
    for kernel in [KernelSpec::reference_gaussian(), KernelSpec::reference_exponential()] {
        let s = spec(grid, kernel);
        let stencil = compute_stencil(&kernel, &grid);
        let nets = build(Backend::InProcess, 4, &s);
        let got: usize = nets.iter().map(|n| n.incoming.synapse_count()).sum();
        let mean = expected_recurrent_synapses(&stencil, &grid);
        let sd = recurrent_synapses_variance(&stencil, &grid).sqrt();
        assert!(((got as f64 - mean) / sd).abs() < 3.0, "{kernel:?}: {got} vs {mean} ± {sd}");
    }
}

/// Spikes a worker emits in a fuzzed step: each owned neuron fires with a
/// small probability, at a time inside the step.
fn fuzz_spikes(net: &WorkerNetwork, step: u64) -> Vec<(usize, SpikeEvent)> {
    let mut out = Vec::new();
    for local in 0..net.layout.len() {
        let gid = net.layout.gid(local);
        let mut r = KeyedRng::new(99, Purpose::External, gid as u64, step);
        if r.uniform() < 0.01 {
            out.push((local, SpikeEvent { source: gid, time: step as f64 + r.uniform() }));
        }
    }
    out
}

fn route(net: &WorkerNetwork, spikes: &[(usize, SpikeEvent)], size: usize) -> Vec<Vec<SpikeEvent>> {
    let mut out = vec![Vec::new(); size];
    for (local, s) in spikes {
        for &w in net.target_workers_of(*local) {
            out[w as usize].push(*s);
        }
    }
    out
}

#[test]
fn hundred_step_fuzz_conserves_spikes_per_pair() {
    let s = spec(small_grid(8, 30), KernelSpec::reference_gaussian());
    let size = 4;
    for b in BACKENDS {
        let nets = build(b, size, &s);
        let nets_ref = &nets;
        let per_worker: Vec<DeliveryStats> = with_group(b, size, |t| {
            let me = t.rank();
            let net = &nets_ref[me];
            let mut total = DeliveryStats::default();
            for step in 0..100 {
                let mut outgoing = route(net, &fuzz_spikes(net, step), size);
                let (msgs, stats) = deliver_spikes(t, &net.directory, step, &mut outgoing).unwrap();
                assert!(outgoing.iter().all(Vec::is_empty));
                // Every peer's spikes for me, recomputed independently.
                for w in 0..size {
                    let want = &route(&nets_ref[w], &fuzz_spikes(&nets_ref[w], step), size)[me];
                    let got = msgs.iter().find(|m| m.source_worker == w);
                    match got {
                        Some(m) => {
                            assert_eq!(&m.spikes, want, "step {step} {w}->{me}");
                            assert!(net.directory.is_source(w));
                        }
                        None => assert!(want.is_empty(), "step {step} {w}->{me} lost"),
                    }
                }
                assert!(stats.payload_messages_sent <= stats.nonzero_counters_sent);
                total.accumulate(&stats);
            }
            total
        });
        let sent: u64 = per_worker.iter().map(|s| s.spikes_sent).sum();
        let received: u64 = per_worker.iter().map(|s| s.spikes_received).sum();
        assert_eq!(sent, received);
        assert!(sent > 0);
        let payload_out: u64 = per_worker.iter().map(|s| s.payload_messages_sent).sum();
        let payload_in: u64 = per_worker.iter().map(|s| s.payload_messages_received).sum();
        assert_eq!(payload_out, payload_in);
    }
}

#[test]
fn silent_step_sends_counters_but_no_payload() {
    let s = spec(small_grid(8, 20), KernelSpec::reference_gaussian());
    let nets = build(Backend::InProcess, 4, &s);
    let nets_ref = &nets;
    let stats = with_group(Backend::InProcess, 4, |t| {
        let net = &nets_ref[t.rank()];
        let mut out = vec![Vec::new(); 4];
        deliver_spikes(t, &net.directory, 0, &mut out).unwrap().1
    });
    for (w, st) in stats.iter().enumerate() {
        let peers = nets[w].directory.targets.iter().filter(|&&v| v != w).count() as u64;
        assert_eq!(st.counter_messages_sent, peers);
        assert_eq!(st.payload_messages_sent, 0);
        assert_eq!(st.spikes_sent, 0);
    }
}

#[test]
fn one_spike_travels_only_to_workers_holding_its_targets() {
    // 12x12 on 4 workers: 6x6 blocks. Column (5, 5) touches all four blocks.
    let grid = small_grid(12, 300);
    let s = spec(grid, KernelSpec::reference_gaussian());
    let nets = build(Backend::InProcess, 4, &s);
    for (column, expected_payloads) in [(grid.column_index(5, 5), 3u64), (grid.column_index(5, 2), 1), (grid.column_index(2, 2), 0)] {
        let gid = grid.gid(column, 0);
        let nets_ref = &nets;
        let stats = with_group(Backend::InProcess, 4, |t| {
            let net = &nets_ref[t.rank()];
            let spikes: Vec<(usize, SpikeEvent)> = net
                .layout
                .local_id(gid)
                .map(|l| (l, SpikeEvent { source: gid, time: 0.5 }))
                .into_iter()
                .collect();
            let mut out = route(net, &spikes, 4);
            deliver_spikes(t, &net.directory, 0, &mut out).unwrap().1
        });
        let payloads: u64 = stats.iter().map(|s| s.payload_messages_sent).sum();
        assert_eq!(payloads, expected_payloads, "column {column}");
        let owner = nets.iter().find(|n| n.layout.local_id(gid).is_some()).unwrap();
        let routed = owner.target_workers_of(owner.layout.local_id(gid).unwrap());
        assert_eq!(routed.len() as u64, expected_payloads + 1);
        let delivered: u64 = stats.iter().map(|s| s.spikes_received + s.local_spikes).sum();
        assert_eq!(delivered, expected_payloads + 1);
    }
}
