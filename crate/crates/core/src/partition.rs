//! Mapping of columns onto workers and the little-endian wire formats used
//! between them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connectivity::GridSpec;
use crate::model::{SpikeEvent, SynapseRecord};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PartitionError {
    #[error("need at least one worker")]
    NoWorkers,
    #[error("{workers} workers exceed the {columns} columns of the grid")]
    TooManyWorkers { workers: usize, columns: usize },
    #[error("no rectangular tiling of a {nx}x{ny} grid into {workers} blocks")]
    NoTiling { nx: usize, ny: usize, workers: usize },
}

/// Rectangular tiling of the column grid: worker `by * px + bx` owns block
/// `(bx, by)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessMap {
    pub worker_count: usize,
    pub px: usize,
    pub py: usize,
    x_bounds: Vec<usize>,
    y_bounds: Vec<usize>,
    owner: Vec<u32>,
    owned: Vec<Vec<usize>>,
}

fn bounds(n: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|k| k * n / parts).collect()
}

/// Tiles the grid into `worker_count` near-square blocks, splitting rows and
/// columns as evenly as possible.
pub fn map_columns_to_workers(
    grid: &GridSpec,
    worker_count: usize,
) -> Result<ProcessMap, PartitionError> {
    if worker_count == 0 {
        return Err(PartitionError::NoWorkers);
    }
    if worker_count > grid.columns() {
        return Err(PartitionError::TooManyWorkers {
            workers: worker_count,
            columns: grid.columns(),
        });
    }
    // Factor pairs (a >= b), most square first.
    let mut pairs: Vec<(usize, usize)> = (1..=worker_count)
        .filter(|&b| worker_count.is_multiple_of(b))
        .map(|b| (worker_count / b, b))
        .filter(|(a, b)| a >= b)
        .collect();
    pairs.sort_by_key(|(a, b)| a - b);
    let (px, py) = pairs
        .into_iter()
        .flat_map(|(a, b)| {
            let wide = grid.nx >= grid.ny;
            let first = if wide { (a, b) } else { (b, a) };
            [first, (first.1, first.0)]
        })
        .find(|&(px, py)| px <= grid.nx && py <= grid.ny)
        .ok_or(PartitionError::NoTiling {
            nx: grid.nx,
            ny: grid.ny,
            workers: worker_count,
        })?;

    let x_bounds = bounds(grid.nx, px);
    let y_bounds = bounds(grid.ny, py);
    let mut owner = vec![0u32; grid.columns()];
    let mut owned = vec![Vec::new(); worker_count];
    for by in 0..py {
        for bx in 0..px {
            let w = by * px + bx;
            for j in y_bounds[by]..y_bounds[by + 1] {
                for i in x_bounds[bx]..x_bounds[bx + 1] {
                    let c = grid.column_index(i, j);
                    owner[c] = w as u32;
                    owned[w].push(c);
                }
            }
        }
    }
    Ok(ProcessMap {
        worker_count,
        px,
        py,
        x_bounds,
        y_bounds,
        owner,
        owned,
    })
}

impl ProcessMap {
    #[inline]
    pub fn owner_of_column(&self, column: usize) -> usize {
        self.owner[column] as usize
    }

    #[inline]
    pub fn owner_of_neuron(&self, grid: &GridSpec, gid: u32) -> usize {
        self.owner_of_column(grid.column_of(gid))
    }

    /// Columns owned by `worker`, row-major within its block.
    pub fn owned_columns(&self, worker: usize) -> &[usize] {
        &self.owned[worker]
    }

    /// Block extent `(x0..x1, y0..y1)` of `worker`.
    pub fn block(&self, worker: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (bx, by) = (worker % self.px, worker / self.px);
        (
            self.x_bounds[bx]..self.x_bounds[bx + 1],
            self.y_bounds[by]..self.y_bounds[by + 1],
        )
    }

    pub fn max_owned_columns(&self) -> usize {
        self.owned.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("payload of {len} bytes is not a whole number of {record}-byte records")]
    Truncated { len: usize, record: usize },
}

pub const COUNTER_BYTES: usize = 4;
pub const SPIKE_BYTES: usize = 12;
pub const SYNAPSE_WIRE_BYTES: usize = 12;
pub const SEGMENT_HEADER_BYTES: usize = 8;

pub fn encode_counter(n: u32) -> Vec<u8> {
    n.to_le_bytes().to_vec()
}

pub fn decode_counter(bytes: &[u8]) -> Result<u32, WireError> {
    let b: [u8; 4] = bytes.try_into().map_err(|_| WireError::Truncated {
        len: bytes.len(),
        record: COUNTER_BYTES,
    })?;
    Ok(u32::from_le_bytes(b))
}

/// AER payload: `(u32 neuron id, f64 emission time)` per spike.
pub fn encode_spikes(spikes: &[SpikeEvent]) -> Vec<u8> {
    let mut out = Vec::with_capacity(spikes.len() * SPIKE_BYTES);
    for s in spikes {
        out.extend_from_slice(&s.source.to_le_bytes());
        out.extend_from_slice(&s.time.to_le_bytes());
    }
    out
}

pub fn decode_spikes(bytes: &[u8]) -> Result<Vec<SpikeEvent>, WireError> {
    if !bytes.len().is_multiple_of(SPIKE_BYTES) {
        return Err(WireError::Truncated {
            len: bytes.len(),
            record: SPIKE_BYTES,
        });
    }
    Ok(bytes
        .chunks_exact(SPIKE_BYTES)
        .map(|c| SpikeEvent {
            source: u32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
            time: f64::from_le_bytes(c[4..].try_into().expect("8 bytes")),
        })
        .collect())
}

/// Appends one source neuron's synapses towards a worker:
/// `u32 source, u32 count`, then per synapse `u32 target, f32 weight, u16
/// delay, u16 flags`.
pub fn encode_segment(out: &mut Vec<u8>, source: u32, synapses: &[SynapseRecord]) {
    out.reserve(SEGMENT_HEADER_BYTES + synapses.len() * SYNAPSE_WIRE_BYTES);
    out.extend_from_slice(&source.to_le_bytes());
    out.extend_from_slice(&(synapses.len() as u32).to_le_bytes());
    for r in synapses {
        out.extend_from_slice(&r.target.to_le_bytes());
        out.extend_from_slice(&r.weight.to_le_bytes());
        out.extend_from_slice(&r.delay.to_le_bytes());
        out.extend_from_slice(&r.flags.to_le_bytes());
    }
}

/// Iterates the segments of a synapse-list payload.
pub fn decode_segments(
    mut bytes: &[u8],
    mut visit: impl FnMut(u32, &mut dyn Iterator<Item = SynapseRecord>),
) -> Result<(), WireError> {
    let bad = |len| WireError::Truncated {
        len,
        record: SYNAPSE_WIRE_BYTES,
    };
    while !bytes.is_empty() {
        if bytes.len() < SEGMENT_HEADER_BYTES {
            return Err(bad(bytes.len()));
        }
        let source = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
        let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let end = SEGMENT_HEADER_BYTES + count * SYNAPSE_WIRE_BYTES;
        if bytes.len() < end {
            return Err(bad(bytes.len()));
        }
        let body = &bytes[SEGMENT_HEADER_BYTES..end];
        let mut it = body.chunks_exact(SYNAPSE_WIRE_BYTES).map(|c| SynapseRecord {
            target: u32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
            weight: f32::from_le_bytes(c[4..8].try_into().expect("4 bytes")),
            delay: u16::from_le_bytes(c[8..10].try_into().expect("2 bytes")),
            flags: u16::from_le_bytes(c[10..12].try_into().expect("2 bytes")),
        });
        visit(source, &mut it);
        bytes = &bytes[end..];
    }
    Ok(())
}
