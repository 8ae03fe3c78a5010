//! In-process transport: star links over mpsc channels.
//!
//! Frames cross thread boundaries as structs; the numeric fold in the hub
//! is shared with the socket transport, which is what makes the two
//! transports bit-identical.

use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::wire::WireMessage;
use super::{CollectiveError, Links};

enum Role {
    Hub {
        to_peer: Vec<Option<Sender<WireMessage>>>,
        from_peer: Vec<Option<Receiver<WireMessage>>>,
    },
    Leaf {
        rank: usize,
        to_hub: Option<Sender<WireMessage>>,
        from_hub: Option<Receiver<WireMessage>>,
    },
}

pub struct InprocLinks {
    world: usize,
    role: Role,
}

/// Builds the channel star for `world` ranks; element `r` is rank r's links.
pub fn wire_up(world: usize) -> Vec<Box<dyn Links>> {
    assert!(world >= 2, "wire_up needs at least two ranks");
    let mut to_peer: Vec<Option<Sender<WireMessage>>> = vec![None];
    let mut from_peer: Vec<Option<Receiver<WireMessage>>> = vec![None];
    let mut leaves: Vec<Box<dyn Links>> = Vec::new();
    for rank in 1..world {
        let (up_tx, up_rx) = channel();
        let (down_tx, down_rx) = channel();
        to_peer.push(Some(down_tx));
        from_peer.push(Some(up_rx));
        leaves.push(Box::new(InprocLinks {
            world,
            role: Role::Leaf {
                rank,
                to_hub: Some(up_tx),
                from_hub: Some(down_rx),
            },
        }));
    }
    let mut all: Vec<Box<dyn Links>> = vec![Box::new(InprocLinks {
        world,
        role: Role::Hub { to_peer, from_peer },
    })];
    all.extend(leaves);
    all
}

impl Links for InprocLinks {
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
        let sender = match &self.role {
            Role::Hub { to_peer, .. } => to_peer.get(peer).and_then(|s| s.as_ref()),
            Role::Leaf { to_hub, .. } if peer == 0 => to_hub.as_ref(),
            Role::Leaf { .. } => None,
        };
        let sender = sender.ok_or_else(|| {
            CollectiveError::Transport(format!("no link from rank {} to {peer}", self.rank()))
        })?;
        sender
            .send(msg.clone())
            .map_err(|_| CollectiveError::Transport(format!("peer {peer} disconnected")))
    }

    fn recv_from(&mut self, peer: usize, timeout: Duration) -> Result<WireMessage, CollectiveError> {
        let receiver = match &self.role {
            Role::Hub { from_peer, .. } => from_peer.get(peer).and_then(|r| r.as_ref()),
            Role::Leaf { from_hub, .. } if peer == 0 => from_hub.as_ref(),
            Role::Leaf { .. } => None,
        };
        let receiver = receiver.ok_or_else(|| {
            CollectiveError::Transport(format!("no link from {peer} to rank {}", self.rank()))
        })?;
        match receiver.recv_timeout(timeout) {
            Ok(msg) => Ok(msg),
            Err(RecvTimeoutError::Timeout) => Err(CollectiveError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(CollectiveError::Transport(format!(
                "peer {peer} disconnected"
            ))),
        }
    }

    fn poison(&mut self) {
        match &mut self.role {
            Role::Hub { to_peer, from_peer } => {
                to_peer.iter_mut().for_each(|s| *s = None);
                from_peer.iter_mut().for_each(|r| *r = None);
            }
            Role::Leaf { to_hub, from_hub, .. } => {
                *to_hub = None;
                *from_hub = None;
            }
        }
    }
}
