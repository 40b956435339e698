//! Multi-process backend: a full mesh of TCP links on the loopback or a LAN.
//!
//! Each worker listens on its own entry of the host list, dials every lower
//! rank and accepts every higher one. Every link has a dedicated writer
//! thread so that large simultaneous sends cannot deadlock; reads happen on
//! the caller's thread with a timeout.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{Transport, TransportError};

pub const ENV_RANK: &str = "CORTICARC_RANK";
pub const ENV_SIZE: &str = "CORTICARC_SIZE";
pub const ENV_HOSTS: &str = "CORTICARC_HOSTS";

const HELLO_MAGIC: u64 = 0xc0c7_1ca7_c000_0001;

struct Link {
    reader: TcpStream,
    outbox: Option<Sender<Vec<u8>>>,
    writer: Option<JoinHandle<()>>,
}

pub struct TcpTransport {
    rank: usize,
    size: usize,
    links: Vec<Option<Link>>,
    write_errors: Arc<Mutex<Vec<Option<String>>>>,
    round: u64,
    timeout: Duration,
}

fn setup<E: std::fmt::Display>(msg: &str) -> impl FnOnce(E) -> TransportError + '_ {
    move |e| TransportError::Setup(format!("{msg}: {e}"))
}

impl TcpTransport {
    /// Reads rank, size and the comma-separated `host:port` list from the
    /// environment.
    pub fn from_env(timeout: Duration) -> Result<Self, TransportError> {
        let var = |k: &str| {
            std::env::var(k).map_err(|_| TransportError::Setup(format!("{k} is not set")))
        };
        let rank: usize = var(ENV_RANK)?.trim().parse().map_err(setup("bad rank"))?;
        let size: usize = var(ENV_SIZE)?.trim().parse().map_err(setup("bad size"))?;
        let hosts = parse_hosts(&var(ENV_HOSTS)?)?;
        if hosts.len() != size {
            return Err(TransportError::Setup(format!(
                "{ENV_HOSTS} lists {} endpoints but {ENV_SIZE} is {size}",
                hosts.len()
            )));
        }
        Self::connect(rank, &hosts, timeout)
    }

    pub fn connect(
        rank: usize,
        hosts: &[SocketAddr],
        timeout: Duration,
    ) -> Result<Self, TransportError> {
        let size = hosts.len();
        if rank >= size {
            return Err(TransportError::Setup(format!("rank {rank} out of range for {size} workers")));
        }
        let deadline = Instant::now() + timeout;
        let listener = TcpListener::bind(hosts[rank]).map_err(setup("cannot listen"))?;
        let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();

        for (peer, addr) in hosts.iter().enumerate().take(rank) {
            let mut s = loop {
                match TcpStream::connect_timeout(addr, Duration::from_millis(500)) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() < deadline => {
                        let _ = e;
                        std::thread::sleep(Duration::from_millis(20));
                    }
                    Err(_) => {
                        return Err(TransportError::Timeout {
                            rank,
                            peer,
                            waited: timeout,
                        })
                    }
                }
            };
            let mut hello = [0u8; 16];
            hello[..8].copy_from_slice(&HELLO_MAGIC.to_le_bytes());
            hello[8..].copy_from_slice(&(rank as u64).to_le_bytes());
            s.write_all(&hello).map_err(|source| TransportError::Io { rank, peer, source })?;
            streams[peer] = Some(s);
        }

        listener.set_nonblocking(true).map_err(setup("listener"))?;
        let mut pending = size - rank - 1;
        while pending > 0 {
            match listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false).map_err(setup("accept"))?;
                    s.set_read_timeout(Some(timeout)).map_err(setup("accept"))?;
                    let mut hello = [0u8; 16];
                    s.read_exact(&mut hello).map_err(setup("handshake"))?;
                    let magic = u64::from_le_bytes(hello[..8].try_into().expect("8 bytes"));
                    let peer = u64::from_le_bytes(hello[8..].try_into().expect("8 bytes")) as usize;
                    if magic != HELLO_MAGIC || peer <= rank || peer >= size || streams[peer].is_some()
                    {
                        return Err(TransportError::Setup(format!(
                            "worker {rank}: unexpected handshake from {peer}"
                        )));
                    }
                    streams[peer] = Some(s);
                    pending -= 1;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let peer = (rank + 1..size).find(|&p| streams[p].is_none()).unwrap_or(rank);
                        return Err(TransportError::Timeout {
                            rank,
                            peer,
                            waited: timeout,
                        });
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(TransportError::Setup(format!("accept: {e}"))),
            }
        }

        let write_errors = Arc::new(Mutex::new(vec![None; size]));
        let mut links = Vec::with_capacity(size);
        for (peer, s) in streams.into_iter().enumerate() {
            let Some(s) = s else {
                links.push(None);
                continue;
            };
            s.set_nodelay(true).map_err(setup("socket"))?;
            s.set_read_timeout(Some(timeout)).map_err(setup("socket"))?;
            let mut w = s.try_clone().map_err(setup("socket"))?;
            let (tx, rx) = channel::<Vec<u8>>();
            let errors = Arc::clone(&write_errors);
            let writer = std::thread::Builder::new()
                .name(format!("corticarc-link-{rank}-{peer}"))
                .spawn(move || {
                    for frame in rx {
                        if let Err(e) = w.write_all(&frame) {
                            errors.lock().expect("error slot")[peer] = Some(e.to_string());
                            return;
                        }
                    }
                    let _ = w.flush();
                })
                .map_err(setup("writer thread"))?;
            links.push(Some(Link {
                reader: s,
                outbox: Some(tx),
                writer: Some(writer),
            }));
        }
        Ok(Self {
            rank,
            size,
            links,
            write_errors,
            round: 0,
            timeout,
        })
    }

    fn check_writes(&self) -> Result<(), TransportError> {
        let errors = self.write_errors.lock().expect("error slot");
        if let Some((peer, e)) = errors
            .iter()
            .enumerate()
            .find_map(|(p, e)| e.as_ref().map(|e| (p, e)))
        {
            return Err(TransportError::Io {
                rank: self.rank,
                peer,
                source: io::Error::other(e.clone()),
            });
        }
        Ok(())
    }
}

pub fn parse_hosts(list: &str) -> Result<Vec<SocketAddr>, TransportError> {
    list.split(',')
        .map(str::trim)
        .filter(|h| !h.is_empty())
        .map(|h| {
            h.to_socket_addrs()
                .map_err(|e| TransportError::Setup(format!("bad endpoint `{h}`: {e}")))?
                .next()
                .ok_or_else(|| TransportError::Setup(format!("endpoint `{h}` did not resolve")))
        })
        .collect()
}

impl Transport for TcpTransport {
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
        self.check_writes()?;
        self.round += 1;
        let rank = self.rank;
        let mut own = Some(std::mem::take(&mut sends[rank]));
        for (peer, bytes) in sends.into_iter().enumerate() {
            if peer == rank || bytes.is_empty() {
                continue;
            }
            let link = self.links[peer].as_ref().expect("mesh link");
            let mut frame = Vec::with_capacity(16 + bytes.len());
            frame.extend_from_slice(&self.round.to_le_bytes());
            frame.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            frame.extend_from_slice(&bytes);
            link.outbox
                .as_ref()
                .expect("open link")
                .send(frame)
                .map_err(|_| TransportError::Disconnected { rank, peer })?;
        }
        let mut out = vec![Vec::new(); self.size];
        for (peer, &expected) in recv_lens.iter().enumerate() {
            if peer == rank {
                let own = own.take().unwrap_or_default();
                if own.len() != expected {
                    return Err(TransportError::LengthMismatch {
                        rank,
                        peer,
                        expected,
                        got: own.len(),
                    });
                }
                out[peer] = own;
                continue;
            }
            if expected == 0 {
                continue;
            }
            let timeout = self.timeout;
            let link = self.links[peer].as_mut().expect("mesh link");
            let io_err = |source: io::Error| match source.kind() {
                io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Timeout {
                    rank,
                    peer,
                    waited: timeout,
                },
                io::ErrorKind::UnexpectedEof => TransportError::Disconnected { rank, peer },
                _ => TransportError::Io { rank, peer, source },
            };
            let mut header = [0u8; 16];
            link.reader.read_exact(&mut header).map_err(io_err)?;
            let round = u64::from_le_bytes(header[..8].try_into().expect("8 bytes"));
            let len = u64::from_le_bytes(header[8..].try_into().expect("8 bytes")) as usize;
            if round != self.round {
                return Err(TransportError::OutOfSequence {
                    rank,
                    peer,
                    expected: self.round,
                    got: round,
                });
            }
            if len != expected {
                return Err(TransportError::LengthMismatch {
                    rank,
                    peer,
                    expected,
                    got: len,
                });
            }
            let mut bytes = vec![0u8; len];
            link.reader.read_exact(&mut bytes).map_err(io_err)?;
            out[peer] = bytes;
        }
        Ok(out)
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for link in self.links.iter_mut().flatten() {
            link.outbox.take();
        }
        for link in self.links.iter_mut().flatten() {
            if let Some(h) = link.writer.take() {
                let _ = h.join();
            }
        }
    }
}
