//! Distributed network construction.
//!
//! Every worker generates the synapses projected by the neurons it owns.
//! Step one exchanges a single synapse counter per worker pair, which fixes
//! the connectivity directory and lets targets size their databases exactly.
//! Step two ships the synapse lists to the workers owning the targets, one
//! source column per worker per round to bound the memory in flight. Each
//! round announces its byte lengths before the payloads, the same
//! counter-then-payload pattern as step one.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connectivity::{for_each_target, GridSpec, KernelSpec, Stencil, SynapseChecksum, SynapseGenSpec};
use crate::model::SynapseRecord;
use crate::partition::{decode_segments, encode_segment, ProcessMap};
use crate::transport::{Transport, TransportError};

#[derive(Debug, Error)]
pub enum ExchangeError {
    #[error("transport fault during {phase}: {source}")]
    Transport {
        phase: String,
        #[source]
        source: TransportError,
    },
    #[error("protocol violation on link {from} -> {to} during {phase}: {detail}")]
    Protocol {
        from: usize,
        to: usize,
        phase: String,
        detail: String,
    },
}

impl ExchangeError {
    pub(crate) fn transport(phase: impl Into<String>) -> impl FnOnce(TransportError) -> Self {
        let phase = phase.into();
        move |source| ExchangeError::Transport { phase, source }
    }
}

/// Neurons owned by one worker, numbered column by column.
#[derive(Debug, Clone)]
pub struct LocalLayout {
    pub rank: usize,
    pub columns: Vec<usize>,
    column_slot: Vec<u32>,
    neurons_per_column: usize,
}

impl LocalLayout {
    pub fn new(grid: &GridSpec, pmap: &ProcessMap, rank: usize) -> Self {
        let columns = pmap.owned_columns(rank).to_vec();
        let mut column_slot = vec![u32::MAX; grid.columns()];
        for (slot, &c) in columns.iter().enumerate() {
            column_slot[c] = slot as u32;
        }
        Self {
            rank,
            columns,
            column_slot,
            neurons_per_column: grid.neurons_per_column,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.columns.len() * self.neurons_per_column
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    #[inline]
    pub fn gid(&self, local: usize) -> u32 {
        let col = self.columns[local / self.neurons_per_column];
        (col * self.neurons_per_column + local % self.neurons_per_column) as u32
    }

    /// Local id of `gid`, if this worker owns it.
    #[inline]
    pub fn local_id(&self, gid: u32) -> Option<usize> {
        let col = gid as usize / self.neurons_per_column;
        let slot = *self.column_slot.get(col)?;
        (slot != u32::MAX)
            .then(|| slot as usize * self.neurons_per_column + gid as usize % self.neurons_per_column)
    }
}

/// Which workers exchange spikes with which. `targets` are the workers this
/// one projects to, `sources` those projecting to it; the worker itself is
/// included when it has local synapses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityDirectory {
    pub rank: usize,
    pub size: usize,
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
    pub outgoing_counts: Vec<u64>,
    pub incoming_counts: Vec<u64>,
}

impl ConnectivityDirectory {
    pub fn is_target(&self, w: usize) -> bool {
        self.outgoing_counts[w] > 0
    }

    pub fn is_source(&self, w: usize) -> bool {
        self.incoming_counts[w] > 0
    }

    /// Collective cross-check that every target lists this worker as a
    /// source and vice versa.
    pub fn verify(&self, t: &mut dyn Transport) -> Result<(), ExchangeError> {
        let words: Vec<u32> = (0..self.size).map(|w| self.is_target(w) as u32).collect();
        let flags = t
            .all_to_all_words(&words)
            .map_err(ExchangeError::transport("directory check"))?;
        for (w, &f) in flags.iter().enumerate() {
            if (f != 0) != self.is_source(w) {
                return Err(ExchangeError::Protocol {
                    from: w,
                    to: self.rank,
                    phase: "directory check".into(),
                    detail: format!(
                        "source lists target: {}, target lists source: {}",
                        f != 0,
                        self.is_source(w)
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Incoming synapses of one worker, keyed by source neuron and grouped by
/// delay. Only target ids and weights are stored per synapse; delays are
/// implied by the group.
#[derive(Debug, Clone, Default)]
pub struct IncomingDb {
    max_delay: u16,
    /// Sorted source ids and the segment holding each.
    sources: Vec<u32>,
    segment_of: Vec<u32>,
    /// `max_delay + 1` offsets per segment; group `d` spans
    /// `groups[s][d - 1]..groups[s][d]`.
    groups: Vec<u32>,
    targets: Vec<u32>,
    weights: Vec<f32>,
}

impl IncomingDb {
    fn with_capacity(max_delay: u16, synapses: usize) -> Self {
        Self {
            max_delay,
            targets: Vec::with_capacity(synapses),
            weights: Vec::with_capacity(synapses),
            ..Default::default()
        }
    }

    pub fn max_delay(&self) -> u16 {
        self.max_delay
    }

    pub fn synapse_count(&self) -> usize {
        self.targets.len()
    }

    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    fn segment(&self, source: u32) -> Option<usize> {
        self.sources
            .binary_search(&source)
            .ok()
            .map(|i| self.segment_of[i] as usize)
    }

    /// Calls `visit(delay, targets, weights)` for each non-empty delay group
    /// of `source`. Returns the number of synapses visited.
    #[inline]
    pub fn arborize(&self, source: u32, mut visit: impl FnMut(u16, &[u32], &[f32])) -> usize {
        let Some(seg) = self.segment(source) else {
            return 0;
        };
        let stride = self.max_delay as usize + 1;
        let offs = &self.groups[seg * stride..(seg + 1) * stride];
        for d in 1..stride {
            let (a, b) = (offs[d - 1] as usize, offs[d] as usize);
            if a < b {
                visit(d as u16, &self.targets[a..b], &self.weights[a..b]);
            }
        }
        (offs[stride - 1] - offs[0]) as usize
    }

    /// Targets and weights of the synapses of `source` with delay `delay`.
    #[inline]
    pub fn group(&self, source: u32, delay: u16) -> (&[u32], &[f32]) {
        let Some(seg) = self.segment(source) else {
            return (&[], &[]);
        };
        let stride = self.max_delay as usize + 1;
        let d = delay as usize;
        if d == 0 || d >= stride {
            return (&[], &[]);
        }
        let a = self.groups[seg * stride + d - 1] as usize;
        let b = self.groups[seg * stride + d] as usize;
        (&self.targets[a..b], &self.weights[a..b])
    }

    /// Number of synapses of `source` stored here.
    pub fn fanout_of(&self, source: u32) -> usize {
        self.arborize(source, |_, _, _| {})
    }

    /// Appends one source's synapses (targets already translated to local ids).
    fn push_segment(&mut self, source: u32, scratch: &mut [(u16, u32, f32)]) {
        scratch.sort_unstable_by_key(|&(d, t, _)| (d, t));
        let seg = self.segment_of.len() as u32;
        self.sources.push(source);
        self.segment_of.push(seg);
        let mut d = 1u16;
        self.groups.push(self.targets.len() as u32);
        for &(delay, target, weight) in scratch.iter() {
            while d < delay {
                self.groups.push(self.targets.len() as u32);
                d += 1;
            }
            self.targets.push(target);
            self.weights.push(weight);
        }
        while d <= self.max_delay {
            self.groups.push(self.targets.len() as u32);
            d += 1;
        }
    }

    fn finish(&mut self) -> Result<(), u32> {
        let mut order: Vec<(u32, u32)> = self
            .sources
            .iter()
            .copied()
            .zip(self.segment_of.iter().copied())
            .collect();
        order.sort_unstable();
        if let Some(w) = order.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(w[0].0);
        }
        self.sources = order.iter().map(|p| p.0).collect();
        self.segment_of = order.iter().map(|p| p.1).collect();
        Ok(())
    }

    /// Resident bytes of the per-synapse arrays.
    pub fn synapse_bytes(&self) -> usize {
        self.targets.capacity() * 4 + self.weights.capacity() * 4
    }

    /// Resident bytes of the source index and delay groups.
    pub fn index_bytes(&self) -> usize {
        (self.sources.capacity() + self.segment_of.capacity() + self.groups.capacity()) * 4
    }
}

/// Everything one worker holds after construction.
#[derive(Debug)]
pub struct WorkerNetwork {
    pub layout: LocalLayout,
    pub incoming: IncomingDb,
    pub directory: ConnectivityDirectory,
    /// For each local neuron, the workers holding at least one of its
    /// synapses (CSR over `target_workers`).
    target_offsets: Vec<u32>,
    target_workers: Vec<u16>,
    pub stats: ConstructionStats,
}

impl WorkerNetwork {
    #[inline]
    pub fn target_workers_of(&self, local: usize) -> &[u16] {
        &self.target_workers[self.target_offsets[local] as usize..self.target_offsets[local + 1] as usize]
    }

    /// Resident bytes of the per-neuron routing table.
    pub fn routing_bytes(&self) -> usize {
        self.target_offsets.capacity() * 4 + self.target_workers.capacity() * 2
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstructionStats {
    pub synapses_generated: u64,
    pub synapses_received: u64,
    pub checksum: SynapseChecksum,
    pub rounds: usize,
    pub payload_bytes_sent: u64,
    pub wall_seconds: f64,
    /// Largest number of synapse list bytes held for sending in one round.
    pub peak_send_buffer_bytes: u64,
}

/// Inputs shared by every worker.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub grid: GridSpec,
    pub kernel: KernelSpec,
    pub synapses: SynapseGenSpec,
    pub seed: u64,
}

/// Builds this worker's share of the network. Collective: every worker of
/// the group must call it with the same spec and map.
pub fn construct_network(
    t: &mut dyn Transport,
    spec: &NetworkSpec,
    stencil: &Stencil,
    pmap: &ProcessMap,
) -> Result<WorkerNetwork, ExchangeError> {
    let start = Instant::now();
    let rank = t.rank();
    let size = t.size();
    let grid = &spec.grid;
    let layout = LocalLayout::new(grid, pmap, rank);
    let n_local = layout.len();

    // Step one: count synapses per target worker and record routing.
    let mut outgoing_counts = vec![0u64; size];
    let mut target_offsets = Vec::with_capacity(n_local + 1);
    let mut target_workers: Vec<u16> = Vec::new();
    let mut hit = vec![false; size];
    target_offsets.push(0u32);
    for local in 0..n_local {
        let src = layout.gid(local);
        for_each_target(src, grid, stencil, spec.seed, |target| {
            let w = pmap.owner_of_neuron(grid, target);
            outgoing_counts[w] += 1;
            hit[w] = true;
        });
        for (w, h) in hit.iter_mut().enumerate() {
            if std::mem::take(h) {
                target_workers.push(w as u16);
            }
        }
        target_offsets.push(target_workers.len() as u32);
    }
    let words = outgoing_counts
        .iter()
        .enumerate()
        .map(|(w, &c)| {
            u32::try_from(c).map_err(|_| ExchangeError::Protocol {
                from: rank,
                to: w,
                phase: "synapse counters".into(),
                detail: format!("{c} synapses do not fit a 32-bit counter"),
            })
        })
        .collect::<Result<Vec<u32>, _>>()?;
    let incoming_counts: Vec<u64> = t
        .all_to_all_words(&words)
        .map_err(ExchangeError::transport("synapse counters"))?
        .into_iter()
        .map(u64::from)
        .collect();
    let directory = ConnectivityDirectory {
        rank,
        size,
        targets: (0..size).filter(|&w| outgoing_counts[w] > 0).collect(),
        sources: (0..size).filter(|&w| incoming_counts[w] > 0).collect(),
        outgoing_counts,
        incoming_counts,
    };

    // Step two: synapse lists, one owned column per round.
    let total_in: u64 = directory.incoming_counts.iter().sum();
    let mut incoming = IncomingDb::with_capacity(spec.synapses.max_delay_steps, total_in as usize);
    let mut checksum = SynapseChecksum::default();
    let mut received = vec![0u64; size];
    let mut stats = ConstructionStats {
        rounds: pmap.max_owned_columns(),
        ..Default::default()
    };
    let mut per_worker: Vec<Vec<SynapseRecord>> = vec![Vec::new(); size];
    let mut scratch: Vec<(u16, u32, f32)> = Vec::new();
    let npc = grid.neurons_per_column;

    for round in 0..stats.rounds {
        let phase = || format!("synapse lists, round {round}");
        let mut sends: Vec<Vec<u8>> = vec![Vec::new(); size];
        if round < layout.columns.len() {
            for local in round * npc..(round + 1) * npc {
                let src = layout.gid(local);
                for_each_target(src, grid, stencil, spec.seed, |target| {
                    let w = pmap.owner_of_neuron(grid, target);
                    per_worker[w].push(SynapseRecord {
                        target,
                        weight: spec.synapses.draw_weight(spec.seed, src, target, grid),
                        delay: spec.synapses.draw_delay(spec.seed, src, target),
                        flags: 0,
                    });
                });
                for (w, list) in per_worker.iter_mut().enumerate() {
                    if !list.is_empty() {
                        stats.synapses_generated += list.len() as u64;
                        encode_segment(&mut sends[w], src, list);
                        list.clear();
                    }
                }
            }
        }
        let lens = sends
            .iter()
            .map(|b| u32::try_from(b.len()).expect("round payload below 4 GiB"))
            .collect::<Vec<u32>>();
        let buffered: u64 = lens.iter().map(|&l| l as u64).sum();
        stats.peak_send_buffer_bytes = stats.peak_send_buffer_bytes.max(buffered);
        stats.payload_bytes_sent += buffered - lens[rank] as u64;
        let recv_lens: Vec<usize> = t
            .all_to_all_words(&lens)
            .map_err(ExchangeError::transport(phase()))?
            .into_iter()
            .map(|l| l as usize)
            .collect();
        for (w, &l) in recv_lens.iter().enumerate() {
            if l > 0 && directory.incoming_counts[w] == 0 {
                return Err(ExchangeError::Protocol {
                    from: w,
                    to: rank,
                    phase: phase(),
                    detail: "payload from a worker outside the directory".into(),
                });
            }
        }
        let payloads = t
            .all_to_all_v(sends, &recv_lens)
            .map_err(ExchangeError::transport(phase()))?;
        for (w, bytes) in payloads.iter().enumerate() {
            let mut bad: Option<String> = None;
            decode_segments(bytes, |src, recs| {
                scratch.clear();
                for r in recs {
                    checksum.add(src, &r);
                    match layout.local_id(r.target) {
                        Some(local) if (1..=incoming.max_delay).contains(&r.delay) => {
                            scratch.push((r.delay, local as u32, r.weight));
                        }
                        Some(_) => {
                            bad.get_or_insert(format!("synapse {src}->{} has delay {}", r.target, r.delay));
                        }
                        None => {
                            bad.get_or_insert(format!("synapse target {} is not owned here", r.target));
                        }
                    }
                }
                received[w] += scratch.len() as u64;
                incoming.push_segment(src, &mut scratch);
            })
            .map_err(|e| ExchangeError::Protocol {
                from: w,
                to: rank,
                phase: phase(),
                detail: e.to_string(),
            })?;
            if let Some(detail) = bad {
                return Err(ExchangeError::Protocol {
                    from: w,
                    to: rank,
                    phase: phase(),
                    detail,
                });
            }
        }
    }
    drop(per_worker);

    for w in 0..size {
        if received[w] != directory.incoming_counts[w] {
            return Err(ExchangeError::Protocol {
                from: w,
                to: rank,
                phase: "synapse lists".into(),
                detail: format!(
                    "received {} synapses, counter announced {}",
                    received[w], directory.incoming_counts[w]
                ),
            });
        }
    }
    incoming.finish().map_err(|src| ExchangeError::Protocol {
        from: pmap.owner_of_neuron(grid, src),
        to: rank,
        phase: "synapse lists".into(),
        detail: format!("source neuron {src} delivered more than one segment"),
    })?;
    directory.verify(t)?;

    stats.synapses_received = received.iter().sum();
    stats.checksum = checksum;
    stats.wall_seconds = start.elapsed().as_secs_f64();
    Ok(WorkerNetwork {
        layout,
        incoming,
        directory,
        target_offsets,
        target_workers,
        stats,
    })
}
