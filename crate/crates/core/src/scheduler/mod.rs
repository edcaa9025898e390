//! Per-process collective runtime: request submission, priority scheduling
//! at chunk granularity and an asynchronous progress engine.

pub mod priority;

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::backends::{Frame, LocalTransport, MsgType, Transport, WireHeader};
use crate::collectives::{
    codec, CollectiveError, CollectiveKind, CommGroup, ReduceOp, RingBuffer, RingCursor, RingLayout,
    DEFAULT_CHUNK_BYTES,
};
use crate::profile::Precision;
use crate::trace::{Link, TraceEvent, TraceKind};

pub use priority::{Priority, PriorityKey, TrafficClass};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchedulerError {
    #[error("runtime is not running")]
    NotStarted,
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("unknown or already consumed handle {0}")]
    InvalidHandle(u64),
    #[error("empty buffer for {0}")]
    EmptyBuffer(CollectiveKind),
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("drain timed out with {} requests pending", pending.len())]
    DrainTimeout { pending: Vec<u64> },
    #[error(transparent)]
    Collective(#[from] CollectiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RequestState {
    Queued,
    InFlight,
    Preempted,
    Done,
    Failed,
}

impl RequestState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RequestState::Done | RequestState::Failed)
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    /// Number of progress threads. Zero means progress only happens inside
    /// `wait` and explicit `progress_step` calls.
    pub progress_engines: usize,
    pub chunk_bytes: usize,
    pub wire: Precision,
    pub prioritize: bool,
    pub drain_timeout: Duration,
    pub capture_trace: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            progress_engines: 1,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            wire: Precision::Fp32,
            prioritize: true,
            drain_timeout: Duration::from_secs(30),
            capture_trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Handle(u64);

impl Handle {
    pub fn id(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub id: u64,
    pub state: RequestState,
    /// Result buffer. For reduce-scatter only the local segment.
    pub buffer: Vec<f32>,
    /// Largest partial-sum magnitude this rank placed on a lossy wire.
    pub max_partial_abs: f32,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DrainReport {
    pub completed: Vec<u64>,
    pub aborted: Vec<u64>,
}

struct Request {
    group: CommGroup,
    tag: u64,
    priority: Priority,
    layout: RingLayout,
    cursor: RingCursor,
    buf: Option<RingBuffer>,
    state: RequestState,
    result: Vec<f32>,
    max_partial_abs: f32,
    diagnostic: Option<String>,
}

impl Request {
    fn dest(&self) -> usize {
        self.group.right()
    }

    fn chunks_done(&self) -> usize {
        self.cursor.sent() + self.cursor.received()
    }
}

struct State {
    transport: Box<dyn Transport>,
    cfg: RuntimeConfig,
    running: bool,
    failure: Option<String>,
    next_id: u64,
    next_seq: u64,
    group_seq: HashMap<u32, u32>,
    requests: HashMap<u64, Request>,
    by_tag: HashMap<u64, u64>,
    unexpected: HashMap<u64, VecDeque<Frame>>,
    last_on_link: HashMap<usize, u64>,
    trace: Vec<TraceEvent>,
    epoch: Instant,
    payload_bytes: u64,
}

struct Shared {
    state: Mutex<State>,
    cond: Condvar,
}

/// One rank's runtime. All methods take `&self` and may be called from
/// several threads.
pub struct Runtime {
    shared: Arc<Shared>,
    engines: Mutex<Vec<JoinHandle<()>>>,
}

impl Runtime {
    pub fn start(transport: Box<dyn Transport>, cfg: RuntimeConfig) -> Runtime {
        let engines = cfg.progress_engines;
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                transport,
                cfg,
                running: true,
                failure: None,
                next_id: 1,
                next_seq: 0,
                group_seq: HashMap::new(),
                requests: HashMap::new(),
                by_tag: HashMap::new(),
                unexpected: HashMap::new(),
                last_on_link: HashMap::new(),
                trace: Vec::new(),
                epoch: Instant::now(),
                payload_bytes: 0,
            }),
            cond: Condvar::new(),
        });
        let handles = (0..engines)
            .map(|i| {
                let sh = Arc::clone(&shared);
                std::thread::Builder::new()
                    .name(format!("gsync-progress{i}"))
                    .spawn(move || engine_loop(&sh))
                    .expect("spawn progress engine")
            })
            .collect();
        Runtime {
            shared,
            engines: Mutex::new(handles),
        }
    }

    /// One runtime per rank over in-process channels.
    pub fn local_mesh(world: usize, cfg: RuntimeConfig) -> Vec<Runtime> {
        LocalTransport::mesh(world)
            .into_iter()
            .map(|t| Runtime::start(Box::new(t), cfg.clone()))
            .collect()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.shared.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn rank(&self) -> usize {
        self.lock().transport.rank()
    }

    pub fn world_size(&self) -> usize {
        self.lock().transport.world_size()
    }

    pub fn config(&self) -> RuntimeConfig {
        self.lock().cfg.clone()
    }

    /// Enqueues a collective. The buffer is owned by the runtime until the
    /// handle completes. The caller's `priority.seq` is replaced by the
    /// submission order.
    pub fn submit(
        &self,
        kind: CollectiveKind,
        buffer: Vec<f32>,
        group: &CommGroup,
        op: ReduceOp,
        priority: Priority,
    ) -> Result<Handle, SchedulerError> {
        let mut st = self.lock();
        let h = st.submit(kind, buffer, group, op, priority)?;
        drop(st);
        self.shared.cond.notify_all();
        Ok(h)
    }

    pub fn test(&self, h: &Handle) -> Result<bool, SchedulerError> {
        let st = self.lock();
        st.requests
            .get(&h.0)
            .map(|r| r.state.is_terminal())
            .ok_or(SchedulerError::InvalidHandle(h.0))
    }

    pub fn state(&self, h: &Handle) -> Option<RequestState> {
        self.lock().requests.get(&h.0).map(|r| r.state)
    }

    /// (chunks done, total chunks) counting both sends and receives.
    pub fn progress_of(&self, h: &Handle) -> Option<(usize, usize)> {
        self.lock()
            .requests
            .get(&h.0)
            .map(|r| (r.chunks_done(), r.cursor.total_sends() + r.cursor.total_recvs()))
    }

    /// Blocks until the request is done or failed and consumes the handle.
    /// The request is promoted to the front of its class first.
    pub fn wait(&self, h: Handle) -> Result<Completion, SchedulerError> {
        let mut st = self.lock();
        {
            let now = st.now();
            let trace = st.cfg.capture_trace;
            let r = st.requests.get_mut(&h.0).ok_or(SchedulerError::InvalidHandle(h.0))?;
            if !r.state.is_terminal() && !r.priority.promoted {
                r.priority.promoted = true;
                if trace {
                    let link = Link::Tx(r.dest());
                    st.trace.push(TraceEvent {
                        time_s: now,
                        kind: TraceKind::Promote,
                        request_id: h.0,
                        chunk_index: 0,
                        link,
                    });
                }
            }
        }
        loop {
            let r = &st.requests[&h.0];
            if r.state.is_terminal() {
                let r = st.requests.remove(&h.0).expect("present");
                st.by_tag.remove(&r.tag);
                return Ok(Completion {
                    id: h.0,
                    state: r.state,
                    buffer: r.result,
                    max_partial_abs: r.max_partial_abs,
                    diagnostic: r.diagnostic,
                });
            }
            if st.cfg.progress_engines == 0 {
                if !st.progress_step() {
                    drop(st);
                    std::thread::yield_now();
                    st = self.lock();
                }
            } else {
                st = self
                    .shared
                    .cond
                    .wait_timeout(st, Duration::from_millis(5))
                    .unwrap_or_else(|e| e.into_inner())
                    .0;
            }
        }
    }

    /// Drives progress once: drains arrivals, then sends at most one chunk
    /// per outgoing link. Returns whether anything happened.
    pub fn progress_step(&self) -> bool {
        let advanced = self.lock().progress_step();
        if advanced {
            self.shared.cond.notify_all();
        }
        advanced
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.lock().trace.clone()
    }

    /// Payload bytes sent by this rank, excluding headers and INT8 scales.
    pub fn payload_bytes_sent(&self) -> u64 {
        self.lock().payload_bytes
    }

    pub fn failure(&self) -> Option<String> {
        self.lock().failure.clone()
    }

    /// Stops the runtime. With `drain` pending requests are run to
    /// completion first (bounded by the drain timeout); without it they
    /// are aborted.
    pub fn shutdown(&self, drain: bool) -> Result<DrainReport, SchedulerError> {
        let mut report = DrainReport::default();
        let mut st = self.lock();
        if !st.running {
            return Ok(report);
        }
        let mut pending: Vec<u64> = st
            .requests
            .iter()
            .filter(|(_, r)| !r.state.is_terminal())
            .map(|(&id, _)| id)
            .collect();
        pending.sort_unstable();
        let mut timed_out = false;
        if drain {
            let deadline = Instant::now() + st.cfg.drain_timeout;
            while pending.iter().any(|id| !st.requests[id].state.is_terminal()) {
                if Instant::now() >= deadline {
                    timed_out = true;
                    break;
                }
                if st.cfg.progress_engines == 0 {
                    if !st.progress_step() {
                        drop(st);
                        std::thread::yield_now();
                        st = self.lock();
                    }
                } else {
                    st = self
                        .shared
                        .cond
                        .wait_timeout(st, Duration::from_millis(5))
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
            }
        }
        for id in &pending {
            let r = st.requests.get_mut(id).expect("pending request");
            if r.state == RequestState::Done {
                report.completed.push(*id);
            } else {
                if !r.state.is_terminal() {
                    r.state = RequestState::Failed;
                    r.diagnostic = Some("aborted at shutdown".into());
                }
                report.aborted.push(*id);
                let me = st.transport.rank();
                st.record(TraceKind::Failed, *id, 0, Link::Node(me));
            }
        }
        st.running = false;
        drop(st);
        self.shared.cond.notify_all();
        let engines = std::mem::take(&mut *self.engines.lock().unwrap_or_else(|e| e.into_inner()));
        for e in engines {
            let _ = e.join();
        }
        if timed_out {
            return Err(SchedulerError::DrainTimeout { pending: report.aborted });
        }
        Ok(report)
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        let _ = self.shutdown(false);
    }
}

fn engine_loop(sh: &Shared) {
    let mut st = sh.state.lock().unwrap_or_else(|e| e.into_inner());
    loop {
        if !st.running {
            return;
        }
        if st.progress_step() {
            sh.cond.notify_all();
            // Let application threads in between steps.
            drop(st);
            std::thread::yield_now();
            st = sh.state.lock().unwrap_or_else(|e| e.into_inner());
        } else {
            st = sh
                .cond
                .wait_timeout(st, Duration::from_micros(200))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }
}

impl State {
    fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    fn record(&mut self, kind: TraceKind, id: u64, chunk: usize, link: Link) {
        if self.cfg.capture_trace {
            let time_s = self.now();
            self.trace.push(TraceEvent {
                time_s,
                kind,
                request_id: id,
                chunk_index: chunk as u64,
                link,
            });
        }
    }

    fn submit(
        &mut self,
        kind: CollectiveKind,
        buffer: Vec<f32>,
        group: &CommGroup,
        op: ReduceOp,
        priority: Priority,
    ) -> Result<Handle, SchedulerError> {
        if !self.running {
            return Err(SchedulerError::NotStarted);
        }
        if let Some(f) = &self.failure {
            return Err(SchedulerError::TransportFailure(f.clone()));
        }
        let me = self.transport.rank();
        let world = self.transport.world_size();
        if group.my_rank() != me {
            return Err(SchedulerError::InvalidGroup(format!(
                "group is for rank {} but this runtime is rank {me}",
                group.my_rank()
            )));
        }
        if let Some(&bad) = group.ranks().iter().find(|&&r| r >= world) {
            return Err(SchedulerError::InvalidGroup(format!("rank {bad} outside world of {world}")));
        }
        if buffer.is_empty() && kind != CollectiveKind::Barrier {
            return Err(SchedulerError::EmptyBuffer(kind));
        }
        let buffer = if kind == CollectiveKind::Barrier { Vec::new() } else { buffer };

        let id = self.next_id;
        self.next_id += 1;
        let seq = self.next_seq;
        self.next_seq += 1;
        let gkey = group.key();
        let gseq = self.group_seq.entry(gkey).or_insert(0);
        let tag = (u64::from(gkey) << 32) | u64::from(*gseq);
        *gseq = gseq.wrapping_add(1);

        let wire = self.cfg.wire;
        let layout = RingLayout::with_chunk_bytes(kind, group.size(), buffer.len(), self.cfg.chunk_bytes, wire);
        let cursor = RingCursor::new(&layout, group.my_index());
        let mut req = Request {
            group: group.clone(),
            tag,
            priority: Priority { seq, ..priority },
            layout,
            cursor,
            buf: Some(RingBuffer::new(buffer, op, wire)),
            state: RequestState::Queued,
            result: Vec::new(),
            max_partial_abs: 0.0,
            diagnostic: None,
        };
        let dest = req.dest();
        self.record(TraceKind::Submit, id, 0, Link::Tx(dest));
        if req.cursor.is_done() {
            finish(&mut req);
            self.requests.insert(id, req);
            self.record(TraceKind::Done, id, 0, Link::Node(me));
            return Ok(Handle(id));
        }
        self.requests.insert(id, req);
        self.by_tag.insert(tag, id);
        if let Some(frames) = self.unexpected.remove(&tag) {
            for f in frames {
                if let Err(e) = self.deliver(id, f) {
                    self.fail_all(e);
                    break;
                }
            }
        }
        Ok(Handle(id))
    }

    fn fail_all(&mut self, msg: String) {
        if self.failure.is_none() {
            self.failure = Some(msg.clone());
        }
        let me = self.transport.rank();
        let mut ids: Vec<u64> = self
            .requests
            .iter()
            .filter(|(_, r)| !r.state.is_terminal())
            .map(|(&id, _)| id)
            .collect();
        ids.sort_unstable();
        for id in ids {
            let r = self.requests.get_mut(&id).expect("present");
            r.state = RequestState::Failed;
            r.diagnostic = Some(msg.clone());
            r.buf = None;
            self.record(TraceKind::Failed, id, 0, Link::Node(me));
        }
    }

    fn deliver(&mut self, id: u64, f: Frame) -> Result<(), String> {
        let now_trace = self.cfg.capture_trace;
        let r = self.requests.get_mut(&id).expect("routed request");
        if r.state.is_terminal() {
            return Err(format!("chunk for finished request {id} from rank {}", f.from));
        }
        let left = r.group.left();
        if f.from != left {
            return Err(format!("request {id}: chunk from rank {} but left neighbour is {left}", f.from));
        }
        let expected = r.cursor.received();
        if f.header.chunk_index as usize != expected {
            return Err(format!(
                "request {id}: chunk {} out of order, expected {expected}",
                f.header.chunk_index
            ));
        }
        if f.header.dtype != self.cfg.wire {
            return Err(format!("request {id}: dtype {} does not match wire {}", f.header.dtype, self.cfg.wire));
        }
        let t = r.cursor.advance_recv(&r.layout);
        let buf = r.buf.as_mut().expect("live buffer");
        buf.apply_recv(&r.layout, &t, &f.payload)
            .map_err(|e| format!("request {id} chunk {expected}: {e}"))?;
        let done = r.cursor.is_done();
        if done {
            finish(r);
        }
        if now_trace {
            self.record(TraceKind::ChunkArrive, id, expected, Link::Rx(f.from));
            if done {
                let me = self.transport.rank();
                self.record(TraceKind::Done, id, 0, Link::Node(me));
            }
        }
        Ok(())
    }

    fn progress_step(&mut self) -> bool {
        if !self.running || self.failure.is_some() {
            return false;
        }
        let mut advanced = false;
        loop {
            match self.transport.try_recv() {
                Ok(None) => break,
                Ok(Some(f)) => {
                    advanced = true;
                    if f.header.msg_type != MsgType::Chunk {
                        continue;
                    }
                    let res = match self.by_tag.get(&f.header.request_tag) {
                        Some(&id) => self.deliver(id, f),
                        None => {
                            self.unexpected.entry(f.header.request_tag).or_default().push_back(f);
                            Ok(())
                        }
                    };
                    if let Err(e) = res {
                        self.fail_all(e);
                        return true;
                    }
                }
                Err(e) => {
                    self.fail_all(e.to_string());
                    return true;
                }
            }
        }

        // Best ready request per outgoing link.
        let prioritize = self.cfg.prioritize;
        let mut best: HashMap<usize, (PriorityKey, u64)> = HashMap::new();
        for (&id, r) in &self.requests {
            if r.state.is_terminal() || r.cursor.ready_send(&r.layout).is_none() {
                continue;
            }
            let k = (r.priority.sort_key(prioritize), id);
            best.entry(r.dest())
                .and_modify(|cur| {
                    if k < *cur {
                        *cur = k;
                    }
                })
                .or_insert(k);
        }
        let mut links: Vec<(usize, u64)> = best.into_iter().map(|(d, (_, id))| (d, id)).collect();
        links.sort_unstable();
        for (dest, id) in links {
            if let Some(prev) = self.last_on_link.insert(dest, id) {
                if prev != id {
                    if let Some(p) = self.requests.get_mut(&prev) {
                        if p.state == RequestState::InFlight && p.cursor.ready_send(&p.layout).is_some() {
                            p.state = RequestState::Preempted;
                            self.record(TraceKind::Preempt, prev, 0, Link::Tx(dest));
                        }
                    }
                }
            }
            if let Err(e) = self.send_one(id) {
                self.fail_all(e);
                return true;
            }
            advanced = true;
        }
        advanced
    }

    fn send_one(&mut self, id: u64) -> Result<(), String> {
        let wire = self.cfg.wire;
        let r = self.requests.get_mut(&id).expect("selected request");
        let t = r.cursor.ready_send(&r.layout).expect("ready");
        let buf = r.buf.as_mut().expect("live buffer");
        let payload = buf
            .encode_send(&r.layout, &t)
            .map_err(|e| format!("request {id}: {e}"))?;
        let index = r.cursor.sent();
        let header = WireHeader::chunk(r.tag, index as u32, r.cursor.total_sends() as u32, wire, payload.len() as u32);
        let dest = r.dest();
        let elems = r.layout.chunk_range(t.segment, t.chunk).len();
        r.cursor.advance_send(&r.layout);
        r.state = RequestState::InFlight;
        let done = r.cursor.is_done();
        if done {
            finish(r);
        }
        let counts_payload = r.layout.kind() != CollectiveKind::Barrier;
        self.record(TraceKind::ChunkStart, id, index, Link::Tx(dest));
        self.transport
            .send(dest, &header, &payload)
            .map_err(|e| format!("send to rank {dest} failed: {e}"))?;
        if counts_payload {
            self.payload_bytes += codec::payload_bytes(wire, elems) as u64;
        }
        if done {
            let me = self.transport.rank();
            self.record(TraceKind::Done, id, 0, Link::Node(me));
        }
        Ok(())
    }
}

fn finish(r: &mut Request) {
    let buf = r.buf.take().expect("live buffer");
    r.max_partial_abs = buf.max_partial_abs();
    r.result = buf.into_result(&r.layout, r.group.my_index());
    r.state = RequestState::Done;
}
