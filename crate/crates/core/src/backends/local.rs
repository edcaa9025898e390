//! In-process transport over channels, for running several ranks as threads.

use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};

use super::wire::{WireHeader, HEADER_LEN};
use super::{Frame, Transport, TransportError};

pub struct LocalTransport {
    rank: usize,
    peers: Vec<Sender<Frame>>,
    inbox: Receiver<Frame>,
    bytes_sent: u64,
}

impl LocalTransport {
    /// One fully connected endpoint per rank.
    pub fn mesh(world: usize) -> Vec<LocalTransport> {
        let (senders, receivers): (Vec<_>, Vec<_>) = (0..world).map(|_| mpsc::channel()).unzip();
        receivers
            .into_iter()
            .enumerate()
            .map(|(rank, inbox)| LocalTransport {
                rank,
                peers: senders.clone(),
                inbox,
                bytes_sent: 0,
            })
            .collect()
    }
}

impl Transport for LocalTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.peers.len()
    }

    fn send(&mut self, to: usize, header: &WireHeader, payload: &[u8]) -> Result<(), TransportError> {
        if payload.len() != header.payload_len as usize {
            return Err(TransportError::HeaderCorrupt("payload length mismatch".into()));
        }
        let peer = self
            .peers
            .get(to)
            .ok_or_else(|| TransportError::HeaderCorrupt(format!("no rank {to}")))?;
        peer.send(Frame {
            from: self.rank,
            header: *header,
            payload: payload.to_vec(),
        })
        .map_err(|_| TransportError::PeerClosed { peer: to })?;
        self.bytes_sent += (HEADER_LEN + payload.len()) as u64;
        Ok(())
    }

    fn try_recv(&mut self) -> Result<Option<Frame>, TransportError> {
        match self.inbox.try_recv() {
            Ok(f) => Ok(Some(f)),
            // Our own sender keeps the channel open, so Disconnected cannot happen.
            Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => Ok(None),
        }
    }

    fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }
}
