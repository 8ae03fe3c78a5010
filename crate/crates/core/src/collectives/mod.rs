//! Process-group collectives over interchangeable transports.
//!
//! Topology is a star through rank 0: every rank sends its contribution to
//! the hub, the hub folds in FIXED rank order (0, 1, …, P−1) and sends the
//! identical result buffer back. Fixed-order folding makes every collective
//! a pure function of (inputs, rank order), so results are bit-identical
//! across runs and across transports. Collectives are the only
//! synchronization points; a round completes on every rank or raises a
//! transport/desync error on all surviving ranks within the timeout.
//!
//! Error propagation is by teardown: when the hub detects a protocol or
//! desync violation it poisons its links, so blocked peers observe a
//! disconnect and raise a transport error rather than hanging.

pub mod inproc;
pub mod socket;
pub mod wire;

use std::time::Duration;

use thiserror::Error;

use crate::losses::{merge_statistics, SampleStatistics};
use crate::tensor::Tensor;
use wire::{Opcode, WireMessage};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollectiveError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("collective desync: {0}")]
    Desync(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("collective timed out after {0:?}")]
    Timeout(Duration),
    #[error("process group is poisoned by an earlier failure")]
    Poisoned,
}

/// Point-to-point links of one rank in the star. Rank 0 holds a link per
/// peer; other ranks hold a single link to rank 0.
pub trait Links: Send {
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;
    fn send_to(&mut self, peer: usize, msg: &WireMessage) -> Result<(), CollectiveError>;
    fn recv_from(&mut self, peer: usize, timeout: Duration) -> Result<WireMessage, CollectiveError>;
    /// Tears the links down so every blocked peer unblocks with a
    /// transport error.
    fn poison(&mut self);
}

/// Rank/world-size handle exposing collective operations.
///
/// A collective returns on any rank only after every rank has contributed.
/// The sequence counter increases by one per completed collective and is
/// carried in every frame; a mismatch between ranks is detected at the hub
/// and surfaces as a desync error.
pub struct ProcessGroup {
    links: Box<dyn Links>,
    sequence: u32,
    timeout: Duration,
    poisoned: bool,
}

impl ProcessGroup {
    pub fn new(links: Box<dyn Links>, timeout: Duration) -> Self {
        ProcessGroup {
            links,
            sequence: 0,
            timeout,
            poisoned: false,
        }
    }

    /// Single-rank group; every collective is the identity.
    pub fn solo() -> Self {
        ProcessGroup::new(Box::new(SoloLinks), DEFAULT_TIMEOUT)
    }

    pub fn rank(&self) -> usize {
        self.links.rank()
    }

    pub fn world_size(&self) -> usize {
        self.links.world_size()
    }

    pub fn sequence(&self) -> u32 {
        self.sequence
    }

    /// Elementwise arithmetic mean across ranks, summed in rank order.
    pub fn allreduce_average(&mut self, buffer: &[f64]) -> Result<Vec<f64>, CollectiveError> {
        self.round(Opcode::Allreduce, buffer.to_vec())
    }

    /// Every rank receives `root`'s buffer bit-exactly. Non-root ranks may
    /// pass any same-length buffer; its content is ignored.
    pub fn broadcast(&mut self, buffer: &[f64], root: usize) -> Result<Vec<f64>, CollectiveError> {
        if root >= self.world_size() {
            return Err(CollectiveError::Protocol(format!(
                "broadcast root {root} out of range for world size {}",
                self.world_size()
            )));
        }
        // payload carries the intended root so the hub can verify agreement;
        // only the root rank attaches its data.
        let mut payload = vec![root as f64];
        if self.rank() == root {
            payload.extend_from_slice(buffer);
        }
        self.round(Opcode::Broadcast, payload)
    }

    /// Count-weighted merge of per-rank statistics, folded in rank order.
    pub fn allgather_statistics(
        &mut self,
        local: &SampleStatistics,
    ) -> Result<SampleStatistics, CollectiveError> {
        let shape = local.mean.shape().to_vec();
        let n = local.mean.numel();
        let mut payload = Vec::with_capacity(1 + 2 * n);
        payload.push(local.count as f64);
        payload.extend_from_slice(local.mean.data());
        payload.extend_from_slice(local.second_moment.data());
        let merged = self.round(Opcode::AllgatherStats, payload)?;
        decode_stats(&merged, &shape)
    }

    /// No rank passes until all ranks arrive.
    pub fn barrier(&mut self) -> Result<(), CollectiveError> {
        self.round(Opcode::Barrier, Vec::new()).map(|_| ())
    }

    fn round(&mut self, opcode: Opcode, payload: Vec<f64>) -> Result<Vec<f64>, CollectiveError> {
        if self.poisoned {
            return Err(CollectiveError::Poisoned);
        }
        let result = if self.rank() == 0 {
            self.hub_round(opcode, payload)
        } else {
            self.leaf_round(opcode, payload)
        };
        match result {
            Ok(v) => {
                self.sequence += 1;
                Ok(v)
            }
            Err(e) => {
                self.poisoned = true;
                self.links.poison();
                Err(e)
            }
        }
    }

    fn hub_round(&mut self, opcode: Opcode, payload: Vec<f64>) -> Result<Vec<f64>, CollectiveError> {
        let world = self.world_size();
        let mut contributions: Vec<Vec<f64>> = Vec::with_capacity(world);
        contributions.push(payload);
        for peer in 1..world {
            let msg = self.links.recv_from(peer, self.timeout)?;
            if msg.rank as usize != peer {
                return Err(CollectiveError::Protocol(format!(
                    "frame from peer {peer} carries rank {}",
                    msg.rank
                )));
            }
            if msg.opcode != opcode {
                return Err(CollectiveError::Desync(format!(
                    "rank {peer} sent {:?} while rank 0 runs {:?} at sequence {}",
                    msg.opcode, opcode, self.sequence
                )));
            }
            if msg.sequence != self.sequence {
                return Err(CollectiveError::Desync(format!(
                    "rank {peer} is at sequence {} while rank 0 is at {}",
                    msg.sequence, self.sequence
                )));
            }
            contributions.push(msg.payload);
        }
        let result = fold(opcode, &contributions)?;
        let reply = WireMessage::new(opcode, 0, self.sequence, result.clone());
        for peer in 1..world {
            self.links.send_to(peer, &reply)?;
        }
        Ok(result)
    }

    fn leaf_round(&mut self, opcode: Opcode, payload: Vec<f64>) -> Result<Vec<f64>, CollectiveError> {
        let msg = WireMessage::new(opcode, self.rank() as u32, self.sequence, payload);
        self.links.send_to(0, &msg)?;
        let reply = self.links.recv_from(0, self.timeout)?;
        if reply.opcode != opcode || reply.sequence != self.sequence {
            return Err(CollectiveError::Desync(format!(
                "reply carries {:?}/seq {} but rank {} expected {:?}/seq {}",
                reply.opcode,
                reply.sequence,
                self.rank(),
                opcode,
                self.sequence
            )));
        }
        Ok(reply.payload)
    }
}

/// Hub-side reduction in fixed rank order.
fn fold(opcode: Opcode, contributions: &[Vec<f64>]) -> Result<Vec<f64>, CollectiveError> {
    let world = contributions.len();
    match opcode {
        Opcode::Allreduce => {
            let len = contributions[0].len();
            for (rank, c) in contributions.iter().enumerate() {
                if c.len() != len {
                    let lengths: Vec<String> = contributions
                        .iter()
                        .enumerate()
                        .map(|(r, c)| format!("rank {r}: {}", c.len()))
                        .collect();
                    return Err(CollectiveError::Protocol(format!(
                        "allreduce buffer length mismatch at rank {rank} ({})",
                        lengths.join(", ")
                    )));
                }
            }
            let mut acc = contributions[0].clone();
            for c in &contributions[1..] {
                for (a, v) in acc.iter_mut().zip(c) {
                    *a += v;
                }
            }
            let inv = 1.0 / world as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
            Ok(acc)
        }
        Opcode::Broadcast => {
            let root = contributions[0].first().copied().ok_or_else(|| {
                CollectiveError::Protocol("broadcast frame missing root field".into())
            })? as usize;
            for (rank, c) in contributions.iter().enumerate() {
                match c.first() {
                    Some(&r) if r as usize == root => {}
                    other => {
                        return Err(CollectiveError::Desync(format!(
                            "rank {rank} disagrees on broadcast root: {other:?} vs {root}"
                        )))
                    }
                }
            }
            if root >= world {
                return Err(CollectiveError::Protocol(format!(
                    "broadcast root {root} out of range for world size {world}"
                )));
            }
            Ok(contributions[root][1..].to_vec())
        }
        Opcode::Barrier => {
            for (rank, c) in contributions.iter().enumerate() {
                if !c.is_empty() {
                    return Err(CollectiveError::Protocol(format!(
                        "barrier frame from rank {rank} carries {} payload values",
                        c.len()
                    )));
                }
            }
            Ok(Vec::new())
        }
        Opcode::AllgatherStats => {
            let len = contributions[0].len();
            for (rank, c) in contributions.iter().enumerate() {
                if c.len() != len || c.is_empty() {
                    return Err(CollectiveError::Protocol(format!(
                        "allgather_stats length mismatch at rank {rank}: {} vs {len}",
                        c.len()
                    )));
                }
            }
            let n = (len - 1) / 2;
            let shape = vec![n];
            let mut acc = decode_stats(&contributions[0], &shape)
                .map_err(|e| CollectiveError::Protocol(e.to_string()))?;
            for c in &contributions[1..] {
                let next =
                    decode_stats(c, &shape).map_err(|e| CollectiveError::Protocol(e.to_string()))?;
                acc = merge_statistics(&acc, &next)
                    .map_err(|e| CollectiveError::Protocol(e.to_string()))?;
            }
            let mut out = Vec::with_capacity(len);
            out.push(acc.count as f64);
            out.extend_from_slice(acc.mean.data());
            out.extend_from_slice(acc.second_moment.data());
            Ok(out)
        }
    }
}

fn decode_stats(payload: &[f64], shape: &[usize]) -> Result<SampleStatistics, CollectiveError> {
    let n: usize = shape.iter().product();
    if payload.len() != 1 + 2 * n {
        return Err(CollectiveError::Protocol(format!(
            "statistics payload length {} does not match shape {shape:?}",
            payload.len()
        )));
    }
    let count = payload[0] as usize;
    let mean = Tensor::new(shape.to_vec(), payload[1..1 + n].to_vec())
        .map_err(|e| CollectiveError::Protocol(e.to_string()))?;
    let second_moment = Tensor::new(shape.to_vec(), payload[1 + n..].to_vec())
        .map_err(|e| CollectiveError::Protocol(e.to_string()))?;
    Ok(SampleStatistics {
        mean,
        second_moment,
        count,
    })
}

struct SoloLinks;

impl Links for SoloLinks {
    fn rank(&self) -> usize {
        0
    }
    fn world_size(&self) -> usize {
        1
    }
    fn send_to(&mut self, _peer: usize, _msg: &WireMessage) -> Result<(), CollectiveError> {
        Err(CollectiveError::Protocol(
            "solo group has no peers".into(),
        ))
    }
    fn recv_from(
        &mut self,
        _peer: usize,
        _timeout: Duration,
    ) -> Result<WireMessage, CollectiveError> {
        Err(CollectiveError::Protocol(
            "solo group has no peers".into(),
        ))
    }
    fn poison(&mut self) {}
}

/// Runs `body(rank, group)` on `world` scoped threads wired with in-process
/// links, returning per-rank results in rank order. The first panic or
/// error is surfaced; surviving ranks fail via poisoned links.
pub fn run_inproc_workers<T, F>(
    world: usize,
    timeout: Duration,
    body: F,
) -> Vec<Result<T, crate::error::EngineError>>
where
    T: Send,
    F: Fn(usize, &mut ProcessGroup) -> Result<T, crate::error::EngineError> + Sync,
{
    if world == 1 {
        let mut group = ProcessGroup::solo();
        return vec![body(0, &mut group)];
    }
    let links = inproc::wire_up(world);
    let mut results: Vec<Option<Result<T, crate::error::EngineError>>> = Vec::new();
    results.resize_with(world, || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (rank, link) in links.into_iter().enumerate() {
            let body = &body;
            handles.push(scope.spawn(move || {
                let mut group = ProcessGroup::new(link, timeout);
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
