//! Socket transport: star links over loopback TCP byte streams.
//!
//! Rendezvous: rank 0 binds 127.0.0.1:port and accepts world−1
//! connections; every connector opens with a 13-byte preamble
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BPAR"
//! 4       1     version (1)
//! 5       4     rank u32 LE (the connector's configured rank)
//! 9       4     world_size u32 LE
//! ```
//!
//! The hub validates world size and rank uniqueness and answers with its
//! own preamble (rank 0). After the handshake every frame on the stream is
//! a [`WireMessage`], byte-exact per `wire.rs`.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::time::{Duration, Instant};

use super::wire::{WireMessage, HEADER_LEN, MAGIC, VERSION};
use super::{CollectiveError, Links, ProcessGroup};

const PREAMBLE_LEN: usize = 13;

fn preamble(rank: u32, world: u32) -> [u8; PREAMBLE_LEN] {
    let mut out = [0u8; PREAMBLE_LEN];
    out[0..4].copy_from_slice(&MAGIC);
    out[4] = VERSION;
    out[5..9].copy_from_slice(&rank.to_le_bytes());
    out[9..13].copy_from_slice(&world.to_le_bytes());
    out
}

fn parse_preamble(bytes: &[u8; PREAMBLE_LEN]) -> Result<(u32, u32), CollectiveError> {
    if bytes[0..4] != MAGIC {
        return Err(CollectiveError::Protocol(format!(
            "handshake magic {:?} is not BPAR",
            &bytes[0..4]
        )));
    }
    if bytes[4] != VERSION {
        return Err(CollectiveError::Protocol(format!(
            "handshake version {} unsupported",
            bytes[4]
        )));
    }
    let rank = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    let world = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
    Ok((rank, world))
}

fn io_err(context: &str, e: std::io::Error) -> CollectiveError {
    if matches!(
        e.kind(),
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
    ) {
        CollectiveError::Timeout(Duration::ZERO)
    } else {
        CollectiveError::Transport(format!("{context}: {e}"))
    }
}

fn write_frame(stream: &mut TcpStream, msg: &WireMessage) -> Result<(), CollectiveError> {
    stream
        .write_all(&msg.encode())
        .map_err(|e| io_err("write frame", e))
}

fn read_frame(stream: &mut TcpStream, timeout: Duration) -> Result<WireMessage, CollectiveError> {
    stream
        .set_read_timeout(Some(timeout))
        .map_err(|e| io_err("set timeout", e))?;
    let mut header = [0u8; HEADER_LEN];
    stream
        .read_exact(&mut header)
        .map_err(|e| match io_err("read header", e) {
            CollectiveError::Timeout(_) => CollectiveError::Timeout(timeout),
            other => other,
        })?;
    let (opcode, rank, sequence, payload_len) = WireMessage::decode_header(&header)?;
    let mut payload = vec![0u8; payload_len as usize];
    stream
        .read_exact(&mut payload)
        .map_err(|e| io_err("read payload", e))?;
    Ok(WireMessage {
        opcode,
        rank,
        sequence,
        payload: WireMessage::decode_payload(&payload),
    })
}

enum Role {
    Hub { to_peer: Vec<Option<TcpStream>> },
    Leaf { rank: usize, hub: Option<TcpStream> },
}

pub struct SocketLinks {
    world: usize,
    role: Role,
}

impl Links for SocketLinks {
    fn rank(&self) -> usize {
        match &self.role {
            Role::Hub { .. } => 0,
            Role::Leaf { rank, .. } => *rank,
        }
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn send_to(&mut self, peer: usize, msg: &WireMessage) -> Result<(), CollectiveError> {
        let stream = match &mut self.role {
            Role::Hub { to_peer } => to_peer.get_mut(peer).and_then(|s| s.as_mut()),
            Role::Leaf { hub, .. } if peer == 0 => hub.as_mut(),
            Role::Leaf { .. } => None,
        };
        let stream = stream.ok_or_else(|| {
            CollectiveError::Transport(format!("no stream to peer {peer}"))
        })?;
        write_frame(stream, msg)
    }

    fn recv_from(&mut self, peer: usize, timeout: Duration) -> Result<WireMessage, CollectiveError> {
        let stream = match &mut self.role {
            Role::Hub { to_peer } => to_peer.get_mut(peer).and_then(|s| s.as_mut()),
            Role::Leaf { hub, .. } if peer == 0 => hub.as_mut(),
            Role::Leaf { .. } => None,
        };
        let stream = stream.ok_or_else(|| {
            CollectiveError::Transport(format!("no stream from peer {peer}"))
        })?;
        read_frame(stream, timeout)
    }

    fn poison(&mut self) {
        match &mut self.role {
            Role::Hub { to_peer } => {
                for s in to_peer.iter_mut() {
                    if let Some(stream) = s.take() {
                        let _ = stream.shutdown(Shutdown::Both);
                    }
                }
            }
            Role::Leaf { hub, .. } => {
                if let Some(stream) = hub.take() {
                    let _ = stream.shutdown(Shutdown::Both);
                }
            }
        }
    }
}

/// Joins the loopback rendezvous as `rank` and returns a ready group.
/// Rank 0 binds the port and accepts; other ranks retry connecting until
/// the hub is up or the timeout elapses.
pub fn connect(
    rank: usize,
    world: usize,
    port: u16,
    timeout: Duration,
) -> Result<ProcessGroup, CollectiveError> {
    if world == 0 || rank >= world {
        return Err(CollectiveError::Protocol(format!(
            "rank {rank} out of range for world size {world}"
        )));
    }
    if world == 1 {
        return Ok(ProcessGroup::solo());
    }
    let links = if rank == 0 {
        accept_peers(world, port, timeout)?
    } else {
        connect_to_hub(rank, world, port, timeout)?
    };
    Ok(ProcessGroup::new(links, timeout))
}

fn accept_peers(
    world: usize,
    port: u16,
    timeout: Duration,
) -> Result<Box<dyn Links>, CollectiveError> {
    let addr: SocketAddr = format!("127.0.0.1:{port}").parse().unwrap();
    let listener = TcpListener::bind(addr)
        .map_err(|e| CollectiveError::Transport(format!("bind {addr}: {e}")))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| io_err("set nonblocking", e))?;
    let deadline = Instant::now() + timeout;
    let mut to_peer: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();
    let mut connected = 0usize;
    while connected + 1 < world {
        if Instant::now() > deadline {
            return Err(CollectiveError::Timeout(timeout));
        }
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream
                    .set_nonblocking(false)
                    .map_err(|e| io_err("set blocking", e))?;
                stream
                    .set_read_timeout(Some(timeout))
                    .map_err(|e| io_err("set timeout", e))?;
                let mut buf = [0u8; PREAMBLE_LEN];
                stream
                    .read_exact(&mut buf)
                    .map_err(|e| io_err("read handshake", e))?;
                let (peer_rank, peer_world) = parse_preamble(&buf)?;
                if peer_world as usize != world {
                    return Err(CollectiveError::Protocol(format!(
                        "rank {peer_rank} configured world {peer_world}, hub expects {world}"
                    )));
                }
                let peer_rank = peer_rank as usize;
                if peer_rank == 0 || peer_rank >= world {
                    return Err(CollectiveError::Protocol(format!(
                        "handshake carries invalid rank {peer_rank}"
                    )));
                }
                if to_peer[peer_rank].is_some() {
                    return Err(CollectiveError::Protocol(format!(
                        "duplicate handshake for rank {peer_rank}"
                    )));
                }
                stream
                    .write_all(&preamble(0, world as u32))
                    .map_err(|e| io_err("write handshake", e))?;
                stream.set_nodelay(true).ok();
                to_peer[peer_rank] = Some(stream);
                connected += 1;
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(io_err("accept", e)),
        }
    }
    Ok(Box::new(SocketLinks {
        world,
        role: Role::Hub { to_peer },
    }))
}

fn connect_to_hub(
    rank: usize,
    world: usize,
    port: u16,
    timeout: Duration,
) -> Result<Box<dyn Links>, CollectiveError> {
    let addr: SocketAddr = format!("127.0.0.1:{port}").parse().unwrap();
    let deadline = Instant::now() + timeout;
    let mut stream = loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(250)) {
            Ok(s) => break s,
            Err(e) => {
                if Instant::now() > deadline {
                    return Err(CollectiveError::Transport(format!(
                        "rank {rank} could not reach hub at {addr}: {e}"
                    )));
                }
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    };
    stream
        .set_read_timeout(Some(timeout))
        .map_err(|e| io_err("set timeout", e))?;
    stream
        .write_all(&preamble(rank as u32, world as u32))
        .map_err(|e| io_err("write handshake", e))?;
    let mut buf = [0u8; PREAMBLE_LEN];
    stream
        .read_exact(&mut buf)
        .map_err(|e| io_err("read handshake", e))?;
    let (hub_rank, hub_world) = parse_preamble(&buf)?;
    if hub_rank != 0 || hub_world as usize != world {
        return Err(CollectiveError::Protocol(format!(
            "unexpected hub handshake: rank {hub_rank}, world {hub_world}"
        )));
    }
    stream.set_nodelay(true).ok();
    Ok(Box::new(SocketLinks {
        world,
        role: Role::Leaf {
            rank,
            hub: Some(stream),
        },
    }))
}

/// Runs `body(rank, group)` on `world` scoped threads wired over loopback
/// sockets. Test helper for transport-equivalence checks; multi-process
/// runs use [`connect`] directly.
pub fn run_socket_workers<T, F>(
    world: usize,
    port: u16,
    timeout: Duration,
    body: F,
) -> Vec<Result<T, crate::error::EngineError>>
where
    T: Send,
    F: Fn(usize, &mut ProcessGroup) -> Result<T, crate::error::EngineError> + Sync,
{
    let mut results: Vec<Option<Result<T, crate::error::EngineError>>> = Vec::new();
    results.resize_with(world, || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for rank in 0..world {
            let body = &body;
            handles.push(scope.spawn(move || {
                let mut group = connect(rank, world, port, timeout)?;
                body(rank, &mut group)
            }));
        }
        for (rank, h) in handles.into_iter().enumerate() {
            results[rank] = Some(match h.join() {
                Ok(r) => r,
                Err(_) => Err(crate::error::EngineError::WorkerPanic { rank }),
            });
        }
    });
    results.into_iter().map(|r| r.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collectives::DEFAULT_TIMEOUT;
    use std::sync::atomic::{AtomicU16, Ordering};

    // Each test binds its own port; keep them distinct within this binary.
    static NEXT_PORT: AtomicU16 = AtomicU16::new(41200);

    pub(crate) fn fresh_port() -> u16 {
        NEXT_PORT.fetch_add(1, Ordering::SeqCst)
    }

    #[test]
    fn socket_allreduce_matches_expected() {
        let port = fresh_port();
        let results = run_socket_workers(3, port, DEFAULT_TIMEOUT, |rank, group| {
            let buf = vec![rank as f64; 4];
            Ok(group.allreduce_average(&buf)?)
        });
        for r in results {
            assert_eq!(r.unwrap(), vec![1.0; 4]);
        }
    }

    #[test]
    fn socket_handshake_rejects_wrong_world() {
        let port = fresh_port();
        let hub = std::thread::spawn(move || accept_peers(3, port, Duration::from_secs(5)));
        // rank 1 claims a different world size
        let conn = connect_to_hub(1, 4, port, Duration::from_secs(5));
        // connector may or may not observe the teardown before its read
        let hub_result = hub.join().unwrap();
        assert!(matches!(hub_result, Err(CollectiveError::Protocol(_))));
        drop(conn);
    }

    #[test]
    fn socket_roundtrip_large_payload() {
        let port = fresh_port();
        let n = 100_000;
        let results = run_socket_workers(2, port, DEFAULT_TIMEOUT, |rank, group| {
            let buf = vec![rank as f64 + 0.5; n];
            Ok(group.allreduce_average(&buf)?)
        });
        for r in results {
            let out = r.unwrap();
            assert_eq!(out.len(), n);
            assert!(out.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn killed_peer_surfaces_transport_error() {
        let port = fresh_port();
        let results = run_socket_workers(3, port, Duration::from_secs(5), |rank, group| {
            if rank == 2 {
                // simulate a dying worker: tear down the links mid-run
                group.barrier()?;
                return Err(crate::error::EngineError::WorkerPanic { rank });
            }
            group.barrier()?;
            // rank 2 never joins this one
            group.barrier()?;
            Ok(())
        });
        assert!(results[0].is_err());
        assert!(results[1].is_err());
    }
}
