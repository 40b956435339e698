//! Collective exchange among a fixed group of workers.
//!
//! The only primitive a backend has to provide is a sparse all-to-all of
//! byte payloads with per-pair lengths known to both sides (the semantics of
//! `MPI_Alltoallv`). A zero length means nothing travels on that pair.
//! Word all-to-all and barrier are built on top of it.

mod inprocess;
mod tcp;

use std::time::Duration;

use thiserror::Error;

pub use inprocess::{in_process_group, InProcessEndpoint};
pub use tcp::{TcpTransport, ENV_HOSTS, ENV_RANK, ENV_SIZE};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("worker {rank}: timed out after {waited:?} waiting for worker {peer}")]
    Timeout {
        rank: usize,
        peer: usize,
        waited: Duration,
    },
    #[error("worker {rank}: message from worker {peer} has {got} bytes, {expected} were announced")]
    LengthMismatch {
        rank: usize,
        peer: usize,
        expected: usize,
        got: usize,
    },
    #[error("worker {rank}: out-of-sequence message from worker {peer} (round {got}, expected {expected})")]
    OutOfSequence {
        rank: usize,
        peer: usize,
        expected: u64,
        got: u64,
    },
    #[error("worker {rank}: link to worker {peer} is closed")]
    Disconnected { rank: usize, peer: usize },
    #[error("worker {rank}: i/o error on link to worker {peer}: {source}")]
    Io {
        rank: usize,
        peer: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("transport setup failed: {0}")]
    Setup(String),
}

pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;

    /// Sends `sends[p]` to every peer `p` with a non-empty payload and
    /// receives exactly `recv_lens[p]` bytes from every peer with a non-zero
    /// length. Delivery is reliable and ordered per pair.
    fn all_to_all_v(
        &mut self,
        sends: Vec<Vec<u8>>,
        recv_lens: &[usize],
    ) -> Result<Vec<Vec<u8>>, TransportError>;

    /// Every worker sends one 32-bit word to every worker (itself included)
    /// and receives one from each.
    fn all_to_all_words(&mut self, words: &[u32]) -> Result<Vec<u32>, TransportError> {
        assert_eq!(words.len(), self.size(), "one word per worker");
        let sends = words.iter().map(|w| w.to_le_bytes().to_vec()).collect();
        let lens = vec![4; self.size()];
        let got = self.all_to_all_v(sends, &lens)?;
        Ok(got
            .iter()
            .map(|b| u32::from_le_bytes(b[..4].try_into().expect("4-byte word")))
            .collect())
    }

    fn barrier(&mut self) -> Result<(), TransportError> {
        let zeros = vec![0u32; self.size()];
        self.all_to_all_words(&zeros).map(|_| ())
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn rank(&self) -> usize {
        (**self).rank()
    }
    fn size(&self) -> usize {
        (**self).size()
    }
    fn all_to_all_v(
        &mut self,
        sends: Vec<Vec<u8>>,
        recv_lens: &[usize],
    ) -> Result<Vec<Vec<u8>>, TransportError> {
        (**self).all_to_all_v(sends, recv_lens)
    }
}

/// Collects one payload from every worker at worker 0. Returns `Some` only
/// on worker 0.
pub fn gather_to_root(
    t: &mut dyn Transport,
    payload: Vec<u8>,
) -> Result<Option<Vec<Vec<u8>>>, TransportError> {
    let size = t.size();
    let len = u32::try_from(payload.len()).map_err(|_| {
        TransportError::Setup(format!("gather payload of {} bytes is too large", payload.len()))
    })?;
    let mut words = vec![0u32; size];
    words[0] = len;
    let lens = t.all_to_all_words(&words)?;
    let mut sends = vec![Vec::new(); size];
    sends[0] = payload;
    let recv: Vec<usize> = if t.rank() == 0 {
        lens.iter().map(|&l| l as usize).collect()
    } else {
        vec![0; size]
    };
    let got = t.all_to_all_v(sends, &recv)?;
    Ok((t.rank() == 0).then_some(got))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn run_group<R: Send>(
        n: usize,
        f: impl Fn(&mut InProcessEndpoint) -> R + Sync,
    ) -> Vec<R> {
        let eps = in_process_group(n, Duration::from_secs(10));
        std::thread::scope(|s| {
            let handles: Vec<_> = eps
                .into_iter()
                .map(|mut ep| {
                    let f = &f;
                    s.spawn(move || f(&mut ep))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn gather_collects_at_root() {
        let out = run_group(4, |ep| {
            let r = ep.rank() as u8;
            gather_to_root(ep, vec![r; r as usize + 1]).unwrap()
        });
        let root = out[0].as_ref().unwrap();
        for (w, p) in root.iter().enumerate() {
            assert_eq!(p, &vec![w as u8; w + 1]);
        }
        assert!(out[1..].iter().all(|o| o.is_none()));
    }
}
