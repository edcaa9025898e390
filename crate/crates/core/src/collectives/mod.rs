//! Transport-agnostic collective algorithms.
//!
//! Everything here is a pure function of its inputs: chunked ring schedules,
//! elementwise reductions, and chunk encodings. Transports (simulated or
//! real) move the bytes; the scheduler decides the order.

pub mod codec;
pub mod ring;

use std::fmt;

pub use codec::{dequantize_chunk, quantize_chunk, QuantChunk};
pub use ring::{
    build_ring_schedule, exchange_in_memory, ChunkPlan, RingBuffer, RingCursor, RingLayout,
    RingOutcome, ScheduleEntry, StepOp, Transfer,
};

/// Default chunk size for ring transfers.
pub const DEFAULT_CHUNK_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CollectiveError {
    #[error("length mismatch: expected {expected} elements, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value cannot be quantized")]
    NonFinite,
    #[error("payload size mismatch: expected {expected} bytes, got {actual}")]
    PayloadSize { expected: usize, actual: usize },
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("unexpected chunk: {0}")]
    UnexpectedChunk(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CollectiveKind {
    Allreduce,
    ReduceScatter,
    Allgather,
    Broadcast,
    Barrier,
}

impl CollectiveKind {
    pub const fn code(self) -> u8 {
        match self {
            CollectiveKind::Allreduce => 0,
            CollectiveKind::ReduceScatter => 1,
            CollectiveKind::Allgather => 2,
            CollectiveKind::Broadcast => 3,
            CollectiveKind::Barrier => 4,
        }
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ReduceOp {
    #[default]
    Sum,
    Max,
    Min,
}

/// An ordered set of distinct global ranks plus the position of the local one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CommGroup {
    ranks: Vec<usize>,
    my_index: usize,
}

impl CommGroup {
    pub fn new(ranks: Vec<usize>, my_rank: usize) -> Result<Self, CollectiveError> {
        if ranks.is_empty() {
            return Err(CollectiveError::InvalidGroup("empty group".into()));
        }
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CollectiveError::InvalidGroup(format!("duplicate rank in {ranks:?}")));
        }
        let my_index = ranks.iter().position(|&r| r == my_rank).ok_or_else(|| {
            CollectiveError::InvalidGroup(format!("rank {my_rank} is not a member of {ranks:?}"))
        })?;
        Ok(CommGroup { ranks, my_index })
    }

    pub fn singleton(rank: usize) -> Self {
        CommGroup {
            ranks: vec![rank],
            my_index: 0,
        }
    }

    /// Ranks `0..world` in order.
    pub fn world(world: usize, my_rank: usize) -> Result<Self, CollectiveError> {
        CommGroup::new((0..world).collect(), my_rank)
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    pub fn my_index(&self) -> usize {
        self.my_index
    }

    pub fn my_rank(&self) -> usize {
        self.ranks[self.my_index]
    }

    /// Ring successor (the rank we send to).
    pub fn right(&self) -> usize {
        self.ranks[(self.my_index + 1) % self.ranks.len()]
    }

    /// Ring predecessor (the rank we receive from).
    pub fn left(&self) -> usize {
        let n = self.ranks.len();
        self.ranks[(self.my_index + n - 1) % n]
    }

    /// Stable identifier shared by every member (FNV-1a over the rank list).
    pub fn key(&self) -> u32 {
        let mut h: u32 = 0x811c_9dc5;
        for r in &self.ranks {
            for b in (*r as u32).to_le_bytes() {
                h ^= b as u32;
                h = h.wrapping_mul(0x0100_0193);
            }
        }
        h
    }
}

/// Combines `incoming` into `acc` elementwise. Accumulation is always FP32.
pub fn reduce_elementwise(op: ReduceOp, acc: &mut [f32], incoming: &[f32]) -> Result<(), CollectiveError> {
    if acc.len() != incoming.len() {
        return Err(CollectiveError::LengthMismatch {
            expected: acc.len(),
            actual: incoming.len(),
        });
    }
    match op {
        ReduceOp::Sum => acc.iter_mut().zip(incoming).for_each(|(a, b)| *a += b),
        ReduceOp::Max => acc.iter_mut().zip(incoming).for_each(|(a, b)| *a = a.max(*b)),
        ReduceOp::Min => acc.iter_mut().zip(incoming).for_each(|(a, b)| *a = a.min(*b)),
    }
    Ok(())
}

/// Reference reduction: sequential, in rank order.
pub fn allreduce_oracle(inputs: &[Vec<f32>], op: ReduceOp) -> Result<Vec<f32>, CollectiveError> {
    let Some(first) = inputs.first() else {
        return Ok(Vec::new());
    };
    let mut acc = first.clone();
    for v in &inputs[1..] {
        reduce_elementwise(op, &mut acc, v)?;
    }
    Ok(acc)
}

/// Largest elementwise deviation relative to the largest magnitude in
/// `reference`. Sums that nearly cancel make per-element relative error
/// meaningless, so the reference's scale is the denominator.
pub fn max_relative_error(actual: &[f32], reference: &[f32]) -> f64 {
    assert_eq!(actual.len(), reference.len(), "length mismatch");
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
    let worst = actual
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((*a as f64 - *b as f64).abs()));
    if worst == 0.0 {
        0.0
    } else {
        worst / scale.max(f32::MIN_POSITIVE as f64)
    }
}

/// Largest elementwise absolute deviation.
pub fn max_abs_error(actual: &[f32], reference: &[f32]) -> f64 {
    assert_eq!(actual.len(), reference.len(), "length mismatch");
    actual
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((*a as f64 - *b as f64).abs()))
}
