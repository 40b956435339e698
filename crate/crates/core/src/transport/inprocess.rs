use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::{Transport, TransportError};

struct Frame {
    round: u64,
    bytes: Vec<u8>,
}

/// One worker's end of a group of threads exchanging through queues.
pub struct InProcessEndpoint {
    rank: usize,
    size: usize,
    to: Vec<Sender<Frame>>,
    from: Vec<Receiver<Frame>>,
    round: u64,
    timeout: Duration,
}

/// Creates `size` connected endpoints, one per worker thread.
pub fn in_process_group(size: usize, timeout: Duration) -> Vec<InProcessEndpoint> {
    assert!(size >= 1, "worker group must not be empty");
    // links[src][dst]
    let mut senders: Vec<Vec<Sender<Frame>>> = (0..size).map(|_| Vec::new()).collect();
    let mut receivers: Vec<Vec<Option<Receiver<Frame>>>> =
        (0..size).map(|_| (0..size).map(|_| None).collect()).collect();
    for (src, row) in senders.iter_mut().enumerate() {
        for dst in 0..size {
            let (tx, rx) = channel();
            row.push(tx);
            receivers[dst][src] = Some(rx);
        }
    }
    senders
        .into_iter()
        .zip(receivers)
        .enumerate()
        .map(|(rank, (to, from))| InProcessEndpoint {
            rank,
            size,
            to,
            from: from.into_iter().map(|r| r.expect("link")).collect(),
            round: 0,
            timeout,
        })
        .collect()
}

impl Transport for InProcessEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn all_to_all_v(
        &mut self,
        mut sends: Vec<Vec<u8>>,
        recv_lens: &[usize],
    ) -> Result<Vec<Vec<u8>>, TransportError> {
        assert_eq!(sends.len(), self.size);
        assert_eq!(recv_lens.len(), self.size);
        self.round += 1;
        let mut own = Some(std::mem::take(&mut sends[self.rank]));
        for (peer, bytes) in sends.into_iter().enumerate() {
            if peer == self.rank || bytes.is_empty() {
                continue;
            }
            self.to[peer]
                .send(Frame {
                    round: self.round,
                    bytes,
                })
                .map_err(|_| TransportError::Disconnected {
                    rank: self.rank,
                    peer,
                })?;
        }
        let mut out = vec![Vec::new(); self.size];
        for (peer, &expected) in recv_lens.iter().enumerate() {
            let bytes = if peer == self.rank {
                let own = own.take().unwrap_or_default();
                if own.len() != expected {
                    return Err(TransportError::LengthMismatch {
                        rank: self.rank,
                        peer,
                        expected,
                        got: own.len(),
                    });
                }
                own
            } else if expected == 0 {
                continue;
            } else {
                let frame = self.from[peer].recv_timeout(self.timeout).map_err(|e| match e {
                    RecvTimeoutError::Timeout => TransportError::Timeout {
                        rank: self.rank,
                        peer,
                        waited: self.timeout,
                    },
                    RecvTimeoutError::Disconnected => TransportError::Disconnected {
                        rank: self.rank,
                        peer,
                    },
                })?;
                if frame.round != self.round {
                    return Err(TransportError::OutOfSequence {
                        rank: self.rank,
                        peer,
                        expected: self.round,
                        got: frame.round,
                    });
                }
                if frame.bytes.len() != expected {
                    return Err(TransportError::LengthMismatch {
                        rank: self.rank,
                        peer,
                        expected,
                        got: frame.bytes.len(),
                    });
                }
                frame.bytes
            };
            out[peer] = bytes;
        }
        Ok(out)
    }
}
