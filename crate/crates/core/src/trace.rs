//! Event traces shared by the runtime and the simulator.
//!
//! CSV form: `time_s,event,request_id,chunk_index,link`. For compute events
//! the request column carries the layer id and the chunk column the
//! iteration.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceKind {
    Submit,
    ChunkStart,
    ChunkArrive,
    Preempt,
    Promote,
    Done,
    Failed,
    ForwardStart,
    BackwardStart,
    WaitStart,
    WaitEnd,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Submit => "submit",
            TraceKind::ChunkStart => "chunk_start",
            TraceKind::ChunkArrive => "chunk_arrive",
            TraceKind::Preempt => "preempt",
            TraceKind::Promote => "promote",
            TraceKind::Done => "done",
            TraceKind::Failed => "failed",
            TraceKind::ForwardStart => "fwd_start",
            TraceKind::BackwardStart => "bwd_start",
            TraceKind::WaitStart => "wait_start",
            TraceKind::WaitEnd => "wait_end",
        }
    }
}

/// Where an event happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Link {
    /// Transmit direction of a node's NIC.
    Tx(usize),
    /// Receive direction of a node's NIC.
    Rx(usize),
    /// A node, for compute and request-level events.
    Node(usize),
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Link::Tx(n) => write!(f, "tx{n}"),
            Link::Rx(n) => write!(f, "rx{n}"),
            Link::Node(n) => write!(f, "node{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    pub time_s: f64,
    pub kind: TraceKind,
    pub request_id: u64,
    pub chunk_index: u64,
    pub link: Link,
}

pub const TRACE_HEADER: &str = "time_s,event,request_id,chunk_index,link";

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.time_s,
            self.kind.as_str(),
            self.request_id,
            self.chunk_index,
            self.link
        )
    }
}

pub fn trace_csv(events: &[TraceEvent]) -> String {
    let mut out = String::with_capacity(events.len() * 40 + 64);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for e in events {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}
