//! Transports for the runtime, plus the discrete-event network simulator.

pub mod local;
pub mod sim;
pub mod socket;
pub mod wire;

pub use local::LocalTransport;
pub use socket::{sock_connect_all, SocketEnv, SocketTransport};
pub use wire::{MsgType, WireHeader};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("peer rank {peer} closed the connection")]
    PeerClosed { peer: usize },
    #[error("corrupt header: {0}")]
    HeaderCorrupt(String),
    #[error("handshake with {peer} failed: {reason}")]
    Handshake { peer: String, reason: String },
    #[error("timed out connecting to rank {peer} at {addr}")]
    ConnectTimeout { peer: usize, addr: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A received chunk.
#[derive(Debug, Clone)]
pub struct Frame {
    pub from: usize,
    pub header: WireHeader,
    pub payload: Vec<u8>,
}

/// Point-to-point message delivery between ranks. Messages from one sender
/// to one receiver arrive in order.
pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;
    fn send(&mut self, to: usize, header: &WireHeader, payload: &[u8]) -> Result<(), TransportError>;
    /// Non-blocking receive.
    fn try_recv(&mut self) -> Result<Option<Frame>, TransportError>;
    /// Header plus payload bytes written so far.
    fn bytes_sent(&self) -> u64;
}
