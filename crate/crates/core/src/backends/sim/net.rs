//! Event engine for the simulated network.
//!
//! Each node has one NIC with independent transmit and receive
//! directions. A chunk of `b` payload bytes occupies the sender's transmit
//! side for `alpha + b / beta` seconds. The receive side is a FIFO: a chunk
//! starts landing when both the transfer has started and the previous
//! arrival has finished, and lands one chunk duration later. Transfers
//! started while the sender computes are stretched by `1 / eta`; with
//! `eta == 0` nothing starts while computing.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use crate::collectives::{codec, CollectiveKind, ReduceOp, RingBuffer, RingCursor, RingLayout, StepOp};
use crate::profile::Precision;
use crate::scheduler::{Priority, PriorityKey};
use crate::trace::{Link, TraceEvent, TraceKind};

pub type ReqId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
}

/// Corrupts one payload byte of one transfer. Test hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub request: ReqId,
    pub member: usize,
    pub transfer_index: usize,
    pub byte: usize,
}

#[derive(Debug, Clone)]
pub struct RequestSpec {
    pub kind: CollectiveKind,
    /// Node id of each ring member, in ring order.
    pub nodes: Vec<usize>,
    pub elems: usize,
    pub op: ReduceOp,
    pub priority: Priority,
    /// Per-member input data. Without it only timing is simulated.
    pub inputs: Option<Vec<Vec<f32>>>,
}

pub(crate) struct Req {
    layout: RingLayout,
    nodes: Vec<usize>,
    cursors: Vec<RingCursor>,
    submitted: Vec<bool>,
    prio: Vec<Priority>,
    queued: Vec<bool>,
    inflight: Vec<u32>,
    done: Vec<bool>,
    pub(crate) submit_at: Vec<f64>,
    pub(crate) done_at: Vec<f64>,
    buffers: Option<Vec<RingBuffer>>,
    pub(crate) results: Option<Vec<Vec<f32>>>,
    pub(crate) max_partial_abs: f32,
    pub(crate) bytes: u64,
    members_left: usize,
}

enum Ev {
    TxDone { node: usize },
    Arrival { req: ReqId, member: usize, payload: Option<Vec<u8>> },
    External(u64),
}

struct Queued {
    time: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

pub struct SimNet {
    now: f64,
    link: LinkParams,
    wire: Precision,
    chunk_bytes: usize,
    prioritize: bool,
    pub(crate) reqs: Vec<Req>,
    ready: Vec<BTreeSet<(PriorityKey, ReqId, usize)>>,
    tx_busy: Vec<bool>,
    tx_current: Vec<Option<(ReqId, usize)>>,
    last_tx: Vec<Option<(ReqId, usize)>>,
    rx_free: Vec<f64>,
    computing: Vec<bool>,
    tx_busy_time: f64,
    node_seq: Vec<u64>,
    heap: BinaryHeap<Queued>,
    seq: u64,
    dirty: Vec<usize>,
    dirty_flag: Vec<bool>,
    completions: Vec<(ReqId, usize)>,
    trace: Option<Vec<TraceEvent>>,
    fault: Option<Fault>,
    total_bytes: u64,
    transfers: u64,
    preemptions: u64,
}

impl SimNet {
    pub fn new(world: usize, link: LinkParams, wire: Precision, chunk_bytes: usize, prioritize: bool, capture_trace: bool) -> Self {
        SimNet {
            now: 0.0,
            link,
            wire,
            chunk_bytes,
            prioritize,
            reqs: Vec::new(),
            ready: vec![BTreeSet::new(); world],
            tx_busy: vec![false; world],
            tx_current: vec![None; world],
            last_tx: vec![None; world],
            rx_free: vec![0.0; world],
            computing: vec![false; world],
            tx_busy_time: 0.0,
            node_seq: vec![0; world],
            heap: BinaryHeap::new(),
            seq: 0,
            dirty: Vec::new(),
            dirty_flag: vec![false; world],
            completions: Vec::new(),
            trace: capture_trace.then(Vec::new),
            fault: None,
            total_bytes: 0,
            transfers: 0,
            preemptions: 0,
        }
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn world(&self) -> usize {
        self.tx_busy.len()
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn transfers(&self) -> u64 {
        self.transfers
    }

    pub fn preemptions(&self) -> u64 {
        self.preemptions
    }

    /// Sum of transmit busy time over all nodes.
    pub fn tx_busy_time(&self) -> f64 {
        self.tx_busy_time
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.take().unwrap_or_default()
    }

    pub fn record(&mut self, kind: TraceKind, id: u64, chunk: u64, link: Link) {
        if let Some(tr) = self.trace.as_mut() {
            tr.push(TraceEvent {
                time_s: self.now,
                kind,
                request_id: id,
                chunk_index: chunk,
                link,
            });
        }
    }

    fn push(&mut self, time: f64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Queued { time, seq: self.seq, ev });
    }

    fn mark(&mut self, node: usize) {
        if !self.dirty_flag[node] {
            self.dirty_flag[node] = true;
            self.dirty.push(node);
        }
    }

    pub fn schedule_external(&mut self, at: f64, token: u64) {
        self.push(at, Ev::External(token));
    }

    pub fn add_request(&mut self, spec: RequestSpec) -> ReqId {
        let n = spec.nodes.len();
        let layout = RingLayout::with_chunk_bytes(spec.kind, n, spec.elems, self.chunk_bytes, self.wire);
        let cursors = (0..n).map(|m| RingCursor::new(&layout, m)).collect();
        let buffers = spec.inputs.map(|ins| {
            ins.into_iter()
                .map(|v| RingBuffer::new(v, spec.op, self.wire))
                .collect()
        });
        self.reqs.push(Req {
            layout,
            nodes: spec.nodes,
            cursors,
            submitted: vec![false; n],
            prio: vec![spec.priority; n],
            queued: vec![false; n],
            inflight: vec![0; n],
            done: vec![false; n],
            submit_at: vec![f64::NAN; n],
            done_at: vec![f64::NAN; n],
            buffers,
            results: None,
            max_partial_abs: 0.0,
            bytes: 0,
            members_left: n,
        });
        self.reqs.len() - 1
    }

    pub fn node_of(&self, req: ReqId, member: usize) -> usize {
        self.reqs[req].nodes[member]
    }

    pub fn is_member_done(&self, req: ReqId, member: usize) -> bool {
        self.reqs[req].done[member]
    }

    pub fn request_bytes(&self, req: ReqId) -> u64 {
        self.reqs[req].bytes
    }

    pub fn submit(&mut self, req: ReqId, member: usize) {
        let now = self.now;
        let r = &mut self.reqs[req];
        assert!(!r.submitted[member], "request {req} member {member} submitted twice");
        let node = r.nodes[member];
        r.submitted[member] = true;
        r.submit_at[member] = now;
        r.prio[member].seq = self.node_seq[node];
        self.node_seq[node] += 1;
        self.record(TraceKind::Submit, req as u64, 0, Link::Node(node));
        self.enqueue_if_ready(req, member);
        self.check_done(req, member);
    }

    /// Moves the request to the front of its class on this member's node.
    pub fn promote(&mut self, req: ReqId, member: usize) {
        let prioritize = self.prioritize;
        let r = &mut self.reqs[req];
        if r.prio[member].promoted {
            return;
        }
        let node = r.nodes[member];
        let old = (r.prio[member].sort_key(prioritize), req, member);
        r.prio[member].promoted = true;
        let new = (r.prio[member].sort_key(prioritize), req, member);
        if r.queued[member] {
            self.ready[node].remove(&old);
            self.ready[node].insert(new);
        }
        self.record(TraceKind::Promote, req as u64, 0, Link::Tx(node));
    }

    pub fn set_computing(&mut self, node: usize, on: bool) {
        self.computing[node] = on;
        if !on {
            self.mark(node);
        }
    }

    pub fn take_completions(&mut self) -> Vec<(ReqId, usize)> {
        std::mem::take(&mut self.completions)
    }

    fn enqueue_if_ready(&mut self, req: ReqId, member: usize) {
        let r = &mut self.reqs[req];
        if !r.submitted[member] || r.queued[member] || r.cursors[member].ready_send(&r.layout).is_none() {
            return;
        }
        r.queued[member] = true;
        let node = r.nodes[member];
        let key = r.prio[member].sort_key(self.prioritize);
        self.ready[node].insert((key, req, member));
        self.mark(node);
    }

    fn check_done(&mut self, req: ReqId, member: usize) {
        let now = self.now;
        let r = &mut self.reqs[req];
        if r.done[member] || !r.submitted[member] || r.inflight[member] > 0 || !r.cursors[member].is_done() {
            return;
        }
        r.done[member] = true;
        r.done_at[member] = now;
        r.members_left -= 1;
        let node = r.nodes[member];
        if r.members_left == 0 {
            if let Some(bufs) = r.buffers.take() {
                r.max_partial_abs = bufs.iter().fold(0.0f32, |m, b| m.max(b.max_partial_abs()));
                let layout = &r.layout;
                r.results = Some(
                    bufs.into_iter()
                        .enumerate()
                        .map(|(m, b)| b.into_result(layout, m))
                        .collect(),
                );
            }
        }
        self.completions.push((req, member));
        self.record(TraceKind::Done, req as u64, member as u64, Link::Node(node));
    }

    /// Processes every event at the next timestamp. Returns the external
    /// tokens that fired, or `None` when the queue is empty.
    pub fn advance(&mut self) -> Option<Vec<u64>> {
        let t = self.heap.peek()?.time;
        self.now = t;
        let mut externals = Vec::new();
        while self.heap.peek().is_some_and(|q| q.time == t) {
            let q = self.heap.pop().expect("peeked");
            match q.ev {
                Ev::External(tok) => externals.push(tok),
                Ev::TxDone { node } => {
                    self.tx_busy[node] = false;
                    if let Some((req, member)) = self.tx_current[node].take() {
                        self.reqs[req].inflight[member] -= 1;
                        self.check_done(req, member);
                    }
                    self.mark(node);
                }
                Ev::Arrival { req, member, payload } => self.arrive(req, member, payload),
            }
        }
        Some(externals)
    }

    fn arrive(&mut self, req: ReqId, member: usize, payload: Option<Vec<u8>>) {
        let r = &mut self.reqs[req];
        let idx = r.cursors[member].received();
        let t = r.cursors[member].advance_recv(&r.layout);
        if let (Some(bufs), Some(p)) = (r.buffers.as_mut(), payload) {
            // A decode failure can only come from injected corruption of
            // the INT8 scale; the chunk is then dropped as garbage.
            let _ = bufs[member].apply_recv(&r.layout, &t, &p);
        }
        let node = r.nodes[member];
        self.record(TraceKind::ChunkArrive, req as u64, idx as u64, Link::Rx(node));
        self.enqueue_if_ready(req, member);
        self.check_done(req, member);
    }

    /// Starts one transfer on every idle transmit link that has work.
    pub fn dispatch(&mut self) {
        let mut nodes = std::mem::take(&mut self.dirty);
        nodes.sort_unstable();
        for &node in &nodes {
            self.dirty_flag[node] = false;
        }
        for node in nodes {
            if self.tx_busy[node] || (self.computing[node] && self.link.eta <= 0.0) {
                continue;
            }
            let Some(entry) = self.ready[node].pop_first() else {
                continue;
            };
            self.start_transfer(node, entry.1, entry.2);
        }
    }

    fn start_transfer(&mut self, node: usize, req: ReqId, member: usize) {
        if let Some(prev) = self.last_tx[node] {
            if prev != (req, member) && self.reqs[prev.0].queued[prev.1] {
                self.preemptions += 1;
                self.record(TraceKind::Preempt, prev.0 as u64, 0, Link::Tx(node));
            }
        }
        self.last_tx[node] = Some((req, member));

        let wire = self.wire;
        let fault = self.fault;
        let r = &mut self.reqs[req];
        let index = r.cursors[member].sent();
        let t = r.cursors[member].advance_send(&r.layout);
        let elems = r.layout.chunk_range(t.segment, t.chunk).len();
        let bytes = match r.layout.step_op(t.step) {
            StepOp::Token => 0,
            _ => codec::payload_bytes(wire, elems) as u64,
        };
        let mut payload = match r.buffers.as_mut() {
            Some(bufs) => Some(bufs[member].encode_send(&r.layout, &t).expect("finite simulated data")),
            None => None,
        };
        if let (Some(f), Some(p)) = (fault, payload.as_mut()) {
            if f.request == req && f.member == member && f.transfer_index == index && !p.is_empty() {
                let i = f.byte % p.len();
                p[i] ^= 0x5a;
            }
        }
        r.bytes += bytes;
        r.inflight[member] += 1;
        r.queued[member] = false;
        let right = r.layout.right(member);
        let dst = r.nodes[right];

        let mut dur = self.link.alpha + bytes as f64 / self.link.beta;
        if self.computing[node] {
            dur /= self.link.eta;
        }
        let now = self.now;
        self.tx_busy[node] = true;
        self.tx_current[node] = Some((req, member));
        self.tx_busy_time += dur;
        self.total_bytes += bytes;
        self.transfers += 1;
        self.push(now + dur, Ev::TxDone { node });
        let rx_start = now.max(self.rx_free[dst]);
        let arrival = rx_start + dur;
        self.rx_free[dst] = arrival;
        self.push(arrival, Ev::Arrival { req, member: right, payload });
        self.record(TraceKind::ChunkStart, req as u64, index as u64, Link::Tx(node));
        self.enqueue_if_ready(req, member);
    }
}
