//! Per-timestep spike delivery in two phases: a spike counter word to every
//! target in the directory, then AER payloads only on the links whose
//! counter is non-zero. Spikes for the worker itself skip serialization.

use serde::{Deserialize, Serialize};

use crate::construction::{ConnectivityDirectory, ExchangeError};
use crate::model::SpikeEvent;
use crate::partition::{decode_counter, decode_spikes, encode_counter, encode_spikes, COUNTER_BYTES, SPIKE_BYTES};
use crate::transport::Transport;

/// Spikes of one worker destined to another, ordered by (time, source).
#[derive(Debug, Clone, PartialEq)]
pub struct AxonalSpikeMessage {
    pub source_worker: usize,
    pub spikes: Vec<SpikeEvent>,
}

/// Counters of one delivery round, from the point of view of one worker.
/// The worker's own link is not counted as a message.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryStats {
    pub counter_messages_sent: u64,
    pub counter_messages_received: u64,
    pub nonzero_counters_sent: u64,
    pub payload_messages_sent: u64,
    pub payload_messages_received: u64,
    pub spikes_sent: u64,
    pub spikes_received: u64,
    pub local_spikes: u64,
}

impl DeliveryStats {
    pub fn accumulate(&mut self, o: &DeliveryStats) {
        self.counter_messages_sent += o.counter_messages_sent;
        self.counter_messages_received += o.counter_messages_received;
        self.nonzero_counters_sent += o.nonzero_counters_sent;
        self.payload_messages_sent += o.payload_messages_sent;
        self.payload_messages_received += o.payload_messages_received;
        self.spikes_sent += o.spikes_sent;
        self.spikes_received += o.spikes_received;
        self.local_spikes += o.local_spikes;
    }
}

/// Exchanges the spikes emitted in one timestep. `outgoing[w]` holds the
/// spikes for worker `w`; only directory targets may receive spikes.
/// Collective over the worker group.
pub fn deliver_spikes(
    t: &mut dyn Transport,
    directory: &ConnectivityDirectory,
    step: u64,
    outgoing: &mut [Vec<SpikeEvent>],
) -> Result<(Vec<AxonalSpikeMessage>, DeliveryStats), ExchangeError> {
    let rank = t.rank();
    let size = t.size();
    let mut stats = DeliveryStats::default();
    for (w, spikes) in outgoing.iter().enumerate() {
        if !spikes.is_empty() && !directory.is_target(w) {
            return Err(ExchangeError::Protocol {
                from: rank,
                to: w,
                phase: format!("step {step} spike payload"),
                detail: "spikes addressed to a worker outside the directory".into(),
            });
        }
    }

    // Phase one: counters to every directory target, zero included.
    let mut sends = vec![Vec::new(); size];
    for &w in &directory.targets {
        if w != rank {
            let n = outgoing[w].len() as u32;
            sends[w] = encode_counter(n);
            stats.counter_messages_sent += 1;
            stats.nonzero_counters_sent += (n > 0) as u64;
        }
    }
    let mut lens = vec![0usize; size];
    for &w in &directory.sources {
        if w != rank {
            lens[w] = COUNTER_BYTES;
            stats.counter_messages_received += 1;
        }
    }
    let counters = t
        .all_to_all_v(sends, &lens)
        .map_err(ExchangeError::transport(format!("step {step} spike counters")))?;

    // Phase two: payloads on links with a non-zero counter only.
    let mut announced = vec![0u32; size];
    for &w in &directory.sources {
        if w != rank {
            announced[w] = decode_counter(&counters[w]).map_err(|e| ExchangeError::Protocol {
                from: w,
                to: rank,
                phase: format!("step {step} spike counters"),
                detail: e.to_string(),
            })?;
        }
    }
    let mut sends = vec![Vec::new(); size];
    for &w in &directory.targets {
        if w != rank && !outgoing[w].is_empty() {
            sends[w] = encode_spikes(&outgoing[w]);
            stats.payload_messages_sent += 1;
            stats.spikes_sent += outgoing[w].len() as u64;
        }
    }
    let lens: Vec<usize> = announced.iter().map(|&n| n as usize * SPIKE_BYTES).collect();
    let payloads = t.all_to_all_v(sends, &lens).map_err(|e| match e {
        crate::transport::TransportError::LengthMismatch { peer, expected, got, .. } => {
            ExchangeError::Protocol {
                from: peer,
                to: rank,
                phase: format!("step {step} spike payload"),
                detail: format!("payload of {got} bytes after a counter announcing {expected}"),
            }
        }
        other => ExchangeError::Transport {
            phase: format!("step {step} spike payload"),
            source: other,
        },
    })?;

    let mut incoming = Vec::new();
    for (w, bytes) in payloads.into_iter().enumerate() {
        if w == rank {
            let local = std::mem::take(&mut outgoing[rank]);
            if !local.is_empty() {
                stats.local_spikes += local.len() as u64;
                incoming.push(AxonalSpikeMessage {
                    source_worker: rank,
                    spikes: local,
                });
            }
            continue;
        }
        if announced[w] == 0 {
            continue;
        }
        let spikes = decode_spikes(&bytes).map_err(|e| ExchangeError::Protocol {
            from: w,
            to: rank,
            phase: format!("step {step} spike payload"),
            detail: e.to_string(),
        })?;
        stats.payload_messages_received += 1;
        stats.spikes_received += spikes.len() as u64;
        incoming.push(AxonalSpikeMessage {
            source_worker: w,
            spikes,
        });
    }
    for list in outgoing.iter_mut() {
        list.clear();
    }
    Ok((incoming, stats))
}
