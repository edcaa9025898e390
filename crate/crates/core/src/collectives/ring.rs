//! Chunked ring schedules.
//!
//! A collective over `n` members is a sequence of steps. At each step a
//! member sends one segment of the buffer to its ring successor, split into
//! chunks. Member `m` may send chunk `c` of step `s` once chunk `c` of step
//! `s - 1` has arrived from its predecessor: the two carry the same segment,
//! so chunks pipeline independently while each segment's reduction order
//! stays fixed by the step order. That is what makes results independent of
//! the chunk size and of any preemption interleaving.
//!
//! Allreduce is a reduce-scatter phase (`n - 1` steps) followed by an
//! allgather phase (`n - 1` steps). After reduce-scatter member `m` owns the
//! fully reduced segment `m`.

use std::collections::{HashMap, VecDeque};
use std::ops::Range;

use super::codec;
use super::{reduce_elementwise, CollectiveError, CollectiveKind, ReduceOp};
use crate::profile::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOp {
    /// Receiver combines the incoming chunk into its buffer.
    Reduce,
    /// Receiver overwrites its buffer with the incoming chunk.
    Copy,
    /// Zero-length synchronization message.
    Token,
}

/// One chunk sent by one member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub step: usize,
    pub segment: usize,
    pub chunk: usize,
    /// Position in the sender's transfer sequence.
    pub index: usize,
}

/// Shape of a ring collective, shared by all members.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingLayout {
    kind: CollectiveKind,
    n: usize,
    elems: usize,
    chunk_elems: usize,
}

impl RingLayout {
    pub fn new(kind: CollectiveKind, n: usize, elems: usize, chunk_elems: usize) -> Self {
        assert!(n >= 1, "ring needs at least one member");
        let elems = if kind == CollectiveKind::Barrier { 0 } else { elems };
        RingLayout {
            kind,
            n,
            elems,
            chunk_elems: chunk_elems.max(1),
        }
    }

    /// Chunk size given in bytes of the wire precision.
    pub fn with_chunk_bytes(
        kind: CollectiveKind,
        n: usize,
        elems: usize,
        chunk_bytes: usize,
        wire: Precision,
    ) -> Self {
        Self::new(kind, n, elems, (chunk_bytes / wire.bytes()).max(1))
    }

    pub fn kind(&self) -> CollectiveKind {
        self.kind
    }

    pub fn members(&self) -> usize {
        self.n
    }

    pub fn elems(&self) -> usize {
        self.elems
    }

    pub fn chunk_elems(&self) -> usize {
        self.chunk_elems
    }

    pub fn left(&self, member: usize) -> usize {
        (member + self.n - 1) % self.n
    }

    pub fn right(&self, member: usize) -> usize {
        (member + 1) % self.n
    }

    pub fn num_steps(&self) -> usize {
        if self.n == 1 {
            return 0;
        }
        match self.kind {
            CollectiveKind::Allreduce => 2 * (self.n - 1),
            _ => self.n - 1,
        }
    }

    pub fn step_op(&self, step: usize) -> StepOp {
        match self.kind {
            CollectiveKind::Allreduce if step < self.n - 1 => StepOp::Reduce,
            CollectiveKind::ReduceScatter => StepOp::Reduce,
            CollectiveKind::Barrier => StepOp::Token,
            _ => StepOp::Copy,
        }
    }

    pub fn num_segments(&self) -> usize {
        match self.kind {
            CollectiveKind::Broadcast | CollectiveKind::Barrier => 1,
            _ => self.n,
        }
    }

    /// Segment sizes differ by at most one element; the larger ones come first.
    pub fn segment_range(&self, seg: usize) -> Range<usize> {
        let parts = self.num_segments();
        let base = self.elems / parts;
        let rem = self.elems % parts;
        let start = seg * base + seg.min(rem);
        let len = base + usize::from(seg < rem);
        start..start + len
    }

    pub fn chunks_in_segment(&self, seg: usize) -> usize {
        self.segment_range(seg).len().div_ceil(self.chunk_elems).max(1)
    }

    pub fn chunk_range(&self, seg: usize, chunk: usize) -> Range<usize> {
        let seg_range = self.segment_range(seg);
        let start = (seg_range.start + chunk * self.chunk_elems).min(seg_range.end);
        let end = (start + self.chunk_elems).min(seg_range.end);
        start..end
    }

    /// Segment member `member` sends at `step`, if it sends at all.
    pub fn send_segment(&self, step: usize, member: usize) -> Option<usize> {
        if step >= self.num_steps() {
            return None;
        }
        let n = self.n;
        match self.kind {
            CollectiveKind::Allreduce | CollectiveKind::ReduceScatter if step < n - 1 => {
                Some((member + 2 * n - step - 1) % n)
            }
            CollectiveKind::Allreduce => Some((member + 2 * n - (step - (n - 1))) % n),
            CollectiveKind::Allgather => Some((member + n - step) % n),
            CollectiveKind::Broadcast => (member == step).then_some(0),
            CollectiveKind::Barrier => Some(0),
            CollectiveKind::ReduceScatter => None,
        }
    }

    pub fn sends_at(&self, step: usize, member: usize) -> usize {
        self.send_segment(step, member)
            .map_or(0, |seg| self.chunks_in_segment(seg))
    }

    pub fn total_sends(&self, member: usize) -> usize {
        (0..self.num_steps()).map(|s| self.sends_at(s, member)).sum()
    }

    pub fn total_recvs(&self, member: usize) -> usize {
        if self.n == 1 {
            0
        } else {
            self.total_sends(self.left(member))
        }
    }

    /// Range of the result a member keeps after a reduce-scatter.
    pub fn owned_range(&self, member: usize) -> Range<usize> {
        self.segment_range(member % self.num_segments())
    }

    fn first_pos(&self, member: usize) -> Option<(usize, usize)> {
        (0..self.num_steps())
            .find(|&s| self.sends_at(s, member) > 0)
            .map(|s| (s, 0))
    }

    fn next_pos(&self, member: usize, (step, chunk): (usize, usize)) -> Option<(usize, usize)> {
        if chunk + 1 < self.sends_at(step, member) {
            return Some((step, chunk + 1));
        }
        (step + 1..self.num_steps())
            .find(|&s| self.sends_at(s, member) > 0)
            .map(|s| (s, 0))
    }

    fn transfer(&self, member: usize, (step, chunk): (usize, usize), index: usize) -> Transfer {
        Transfer {
            step,
            segment: self.send_segment(step, member).expect("position has a segment"),
            chunk,
            index,
        }
    }

    /// All transfers of one member, in send order.
    pub fn transfers(&self, member: usize) -> Vec<Transfer> {
        let mut out = Vec::new();
        let mut pos = self.first_pos(member);
        while let Some(p) = pos {
            out.push(self.transfer(member, p, out.len()));
            pos = self.next_pos(member, p);
        }
        out
    }
}

/// One entry of an explicit schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub step: usize,
    pub member: usize,
    pub send_to: usize,
    pub recv_from: usize,
    pub chunk: usize,
    /// Byte offset of the chunk within the buffer.
    pub offset: usize,
    /// Byte length of the chunk.
    pub length: usize,
}

/// Explicit, fully expanded ring schedule for every member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunk_bytes: usize,
    pub num_chunks: usize,
    pub entries: Vec<ScheduleEntry>,
    pub layout: RingLayout,
}

impl ChunkPlan {
    pub fn for_member(&self, member: usize) -> impl Iterator<Item = &ScheduleEntry> {
        self.entries.iter().filter(move |e| e.member == member)
    }
}

/// Expands the schedule of a ring collective. `elem_bytes` is the size of a
/// buffer element; chunk and segment boundaries never split an element.
pub fn build_ring_schedule(
    kind: CollectiveKind,
    n: usize,
    buffer_bytes: usize,
    chunk_bytes: usize,
    elem_bytes: usize,
) -> ChunkPlan {
    let elem_bytes = elem_bytes.max(1);
    let layout = RingLayout::new(kind, n, buffer_bytes / elem_bytes, chunk_bytes / elem_bytes);
    let mut entries = Vec::new();
    for member in 0..n {
        for t in layout.transfers(member) {
            let range = layout.chunk_range(t.segment, t.chunk);
            entries.push(ScheduleEntry {
                step: t.step,
                member,
                send_to: layout.right(member),
                recv_from: layout.left(member),
                chunk: t.chunk,
                offset: range.start * elem_bytes,
                length: range.len() * elem_bytes,
            });
        }
    }
    ChunkPlan {
        chunk_bytes,
        num_chunks: entries.len(),
        entries,
        layout,
    }
}

/// Per-member progress through a ring collective.
#[derive(Debug, Clone)]
pub struct RingCursor {
    member: usize,
    sent: usize,
    send_pos: Option<(usize, usize)>,
    received: usize,
    recv_pos: Option<(usize, usize)>,
    total_sends: usize,
    total_recvs: usize,
}

impl RingCursor {
    pub fn new(layout: &RingLayout, member: usize) -> Self {
        let recv_pos = if layout.members() == 1 {
            None
        } else {
            layout.first_pos(layout.left(member))
        };
        RingCursor {
            member,
            sent: 0,
            send_pos: layout.first_pos(member),
            received: 0,
            recv_pos,
            total_sends: layout.total_sends(member),
            total_recvs: layout.total_recvs(member),
        }
    }

    pub fn member(&self) -> usize {
        self.member
    }

    pub fn sent(&self) -> usize {
        self.sent
    }

    pub fn received(&self) -> usize {
        self.received
    }

    pub fn total_sends(&self) -> usize {
        self.total_sends
    }

    pub fn total_recvs(&self) -> usize {
        self.total_recvs
    }

    pub fn sends_done(&self) -> bool {
        self.send_pos.is_none()
    }

    pub fn is_done(&self) -> bool {
        self.send_pos.is_none() && self.recv_pos.is_none()
    }

    /// Next transfer this member will send, whether or not it is ready.
    pub fn peek_send(&self, layout: &RingLayout) -> Option<Transfer> {
        self.send_pos.map(|p| layout.transfer(self.member, p, self.sent))
    }

    /// Next transfer if its input chunk has arrived.
    pub fn ready_send(&self, layout: &RingLayout) -> Option<Transfer> {
        let (step, chunk) = self.send_pos?;
        if step == 0 {
            return self.peek_send(layout);
        }
        let arrived = match self.recv_pos {
            None => true,
            Some(next) => next > (step - 1, chunk),
        };
        if arrived {
            self.peek_send(layout)
        } else {
            None
        }
    }

    pub fn advance_send(&mut self, layout: &RingLayout) -> Transfer {
        let pos = self.send_pos.expect("no transfer left to send");
        let t = layout.transfer(self.member, pos, self.sent);
        self.send_pos = layout.next_pos(self.member, pos);
        self.sent += 1;
        t
    }

    /// The transfer the predecessor will deliver next.
    pub fn expected_recv(&self, layout: &RingLayout) -> Option<Transfer> {
        self.recv_pos
            .map(|p| layout.transfer(layout.left(self.member), p, self.received))
    }

    pub fn advance_recv(&mut self, layout: &RingLayout) -> Transfer {
        let pos = self.recv_pos.expect("no transfer left to receive");
        let left = layout.left(self.member);
        let t = layout.transfer(left, pos, self.received);
        self.recv_pos = layout.next_pos(left, pos);
        self.received += 1;
        t
    }
}

/// Local data of one member while a collective runs.
#[derive(Debug, Clone)]
pub struct RingBuffer {
    data: Vec<f32>,
    op: ReduceOp,
    wire: Precision,
    // INT8 chunks received in copy steps are forwarded verbatim so that every
    // member ends with bit-identical values.
    forward: HashMap<(usize, usize), Vec<u8>>,
    max_abs: f32,
}

impl RingBuffer {
    pub fn new(data: Vec<f32>, op: ReduceOp, wire: Precision) -> Self {
        RingBuffer {
            data,
            op,
            wire,
            forward: HashMap::new(),
            max_abs: 0.0,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn wire(&self) -> Precision {
        self.wire
    }

    /// Largest magnitude of any value this member put on a lossy wire.
    pub fn max_partial_abs(&self) -> f32 {
        self.max_abs
    }

    fn track(&mut self, range: Range<usize>) {
        if self.wire.is_lossy() {
            let m = self.data[range].iter().fold(0.0f32, |m, v| m.max(v.abs()));
            self.max_abs = self.max_abs.max(m);
        }
    }

    pub fn encode_send(&mut self, layout: &RingLayout, t: &Transfer) -> Result<Vec<u8>, CollectiveError> {
        let range = layout.chunk_range(t.segment, t.chunk);
        match layout.step_op(t.step) {
            StepOp::Token => Ok(Vec::new()),
            StepOp::Reduce => {
                self.track(range.clone());
                codec::encode(&self.data[range], self.wire)
            }
            StepOp::Copy => {
                if let Some(bytes) = self.forward.remove(&(t.segment, t.chunk)) {
                    return Ok(bytes);
                }
                self.track(range.clone());
                let bytes = codec::encode(&self.data[range.clone()], self.wire)?;
                if self.wire.is_lossy() {
                    let decoded = codec::decode(&bytes, self.wire, range.len())?;
                    self.data[range].copy_from_slice(&decoded);
                }
                Ok(bytes)
            }
        }
    }

    pub fn apply_recv(
        &mut self,
        layout: &RingLayout,
        t: &Transfer,
        payload: &[u8],
    ) -> Result<(), CollectiveError> {
        let range = layout.chunk_range(t.segment, t.chunk);
        match layout.step_op(t.step) {
            StepOp::Token => {
                if payload.is_empty() {
                    Ok(())
                } else {
                    Err(CollectiveError::PayloadSize {
                        expected: 0,
                        actual: payload.len(),
                    })
                }
            }
            StepOp::Reduce => {
                let incoming = codec::decode(payload, self.wire, range.len())?;
                reduce_elementwise(self.op, &mut self.data[range], &incoming)
            }
            StepOp::Copy => {
                let incoming = codec::decode(payload, self.wire, range.len())?;
                self.data[range].copy_from_slice(&incoming);
                if self.wire == Precision::Int8 {
                    self.forward.insert((t.segment, t.chunk), payload.to_vec());
                }
                Ok(())
            }
        }
    }

    /// Final result for `member`: the owned segment for reduce-scatter, the
    /// whole buffer otherwise.
    pub fn into_result(self, layout: &RingLayout, member: usize) -> Vec<f32> {
        match layout.kind() {
            CollectiveKind::ReduceScatter => self.data[layout.owned_range(member)].to_vec(),
            CollectiveKind::Barrier => Vec::new(),
            _ => self.data,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RingOutcome {
    pub outputs: Vec<Vec<f32>>,
    /// Largest partial-sum magnitude placed on a lossy wire by any member.
    pub max_partial_abs: f32,
    pub transfers: usize,
    /// Payload bytes moved, excluding INT8 scales.
    pub wire_bytes: usize,
}

/// Runs a ring collective over in-memory FIFO links, one member after
/// another. Useful as an execution harness independent of any transport.
pub fn exchange_in_memory(
    kind: CollectiveKind,
    inputs: Vec<Vec<f32>>,
    op: ReduceOp,
    wire: Precision,
    chunk_bytes: usize,
) -> Result<RingOutcome, CollectiveError> {
    let n = inputs.len();
    if n == 0 {
        return Err(CollectiveError::InvalidGroup("empty group".into()));
    }
    let elems = inputs[0].len();
    if let Some(bad) = inputs.iter().find(|v| v.len() != elems) {
        return Err(CollectiveError::LengthMismatch {
            expected: elems,
            actual: bad.len(),
        });
    }
    let layout = RingLayout::with_chunk_bytes(kind, n, elems, chunk_bytes, wire);
    let mut cursors: Vec<RingCursor> = (0..n).map(|m| RingCursor::new(&layout, m)).collect();
    let mut buffers: Vec<RingBuffer> = inputs
        .into_iter()
        .map(|v| RingBuffer::new(v, op, wire))
        .collect();
    let mut inbox: Vec<VecDeque<Vec<u8>>> = vec![VecDeque::new(); n];
    let (mut transfers, mut wire_bytes) = (0, 0);

    while cursors.iter().any(|c| !c.is_done()) {
        let mut progressed = false;
        for m in 0..n {
            while let Some(payload) = inbox[m].pop_front() {
                let t = cursors[m].advance_recv(&layout);
                buffers[m].apply_recv(&layout, &t, &payload)?;
                progressed = true;
            }
            if let Some(t) = cursors[m].ready_send(&layout) {
                let payload = buffers[m].encode_send(&layout, &t)?;
                cursors[m].advance_send(&layout);
                transfers += 1;
                wire_bytes += codec::payload_bytes(wire, layout.chunk_range(t.segment, t.chunk).len());
                inbox[layout.right(m)].push_back(payload);
                progressed = true;
            }
        }
        assert!(progressed, "ring schedule stalled");
    }

    let max_partial_abs = buffers.iter().fold(0.0f32, |m, b| m.max(b.max_partial_abs()));
    let outputs = buffers
        .into_iter()
        .enumerate()
        .map(|(m, b)| b.into_result(&layout, m))
        .collect();
    Ok(RingOutcome {
        outputs,
        max_partial_abs,
        transfers,
        wire_bytes,
    })
}
