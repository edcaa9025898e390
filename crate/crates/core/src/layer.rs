//! Per-layer communication under data, model or hybrid parallelism.
//!
//! Ranks are split into contiguous model groups of `g` ranks. A layer's
//! parameters are sharded over its model group; ranks holding the same
//! shard in different groups form its data peers.

use crate::collectives::{CollectiveKind, CommGroup, ReduceOp};
use crate::cost::{check_shardable, CostError};
use crate::profile::LayerDescriptor;
use crate::scheduler::{Handle, Priority, Runtime, SchedulerError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LayerError {
    #[error("layer {layer}: {what}={value} is not divisible by group size {group_size}")]
    IndivisibleShard {
        layer: usize,
        what: &'static str,
        value: u64,
        group_size: usize,
    },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("a {0} operation is already outstanding")]
    Busy(&'static str),
    #[error("no {0} operation outstanding")]
    NothingPending(&'static str),
    #[error("expected {expected} elements, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Distribution {
    world: usize,
    group_size: usize,
    model_group: CommGroup,
    data_peers: CommGroup,
}

impl Distribution {
    pub fn new(world: usize, group_size: usize, rank: usize) -> Result<Self, LayerError> {
        if group_size == 0 || world == 0 || world % group_size != 0 {
            return Err(LayerError::InvalidDistribution(format!(
                "group size {group_size} does not divide world {world}"
            )));
        }
        if rank >= world {
            return Err(LayerError::InvalidDistribution(format!("rank {rank} outside world {world}")));
        }
        let g = group_size;
        let base = rank / g * g;
        let model: Vec<usize> = (base..base + g).collect();
        let data: Vec<usize> = (0..world / g).map(|k| rank % g + k * g).collect();
        let bad = |e: crate::collectives::CollectiveError| LayerError::InvalidDistribution(e.to_string());
        Ok(Distribution {
            world,
            group_size,
            model_group: CommGroup::new(model, rank).map_err(bad)?,
            data_peers: CommGroup::new(data, rank).map_err(bad)?,
        })
    }

    pub fn world(&self) -> usize {
        self.world
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn data_groups(&self) -> usize {
        self.world / self.group_size
    }

    pub fn rank(&self) -> usize {
        self.model_group.my_rank()
    }

    pub fn model_group(&self) -> &CommGroup {
        &self.model_group
    }

    pub fn data_peers(&self) -> &CommGroup {
        &self.data_peers
    }
}

#[derive(Debug)]
enum Slot {
    Empty,
    Ready(Vec<f32>),
    Pending(Handle),
}

impl Slot {
    fn is_empty(&self) -> bool {
        matches!(self, Slot::Empty)
    }
}

/// Communication endpoint for one layer on one rank. At most one weight
/// gradient and one activation operation may be outstanding at a time.
pub struct LayerSession<'rt> {
    layer: LayerDescriptor,
    dist: Distribution,
    runtime: &'rt Runtime,
    wgrad: Slot,
    activation: Slot,
}

impl<'rt> LayerSession<'rt> {
    pub fn create(layer: &LayerDescriptor, dist: &Distribution, runtime: &'rt Runtime) -> Result<Self, LayerError> {
        check_shardable(layer, dist.group_size).map_err(|e| match e {
            CostError::IndivisibleShard {
                layer,
                what,
                value,
                group_size,
            } => LayerError::IndivisibleShard {
                layer,
                what,
                value,
                group_size,
            },
            other => LayerError::InvalidDistribution(other.to_string()),
        })?;
        if dist.rank() != runtime.rank() || dist.world() != runtime.world_size() {
            return Err(LayerError::InvalidDistribution(format!(
                "distribution is for rank {} of {}, runtime is rank {} of {}",
                dist.rank(),
                dist.world(),
                runtime.rank(),
                runtime.world_size()
            )));
        }
        Ok(LayerSession {
            layer: layer.clone(),
            dist: dist.clone(),
            runtime,
            wgrad: Slot::Empty,
            activation: Slot::Empty,
        })
    }

    pub fn layer(&self) -> &LayerDescriptor {
        &self.layer
    }

    pub fn distribution(&self) -> &Distribution {
        &self.dist
    }

    /// Parameters held locally: `param_count / g`.
    pub fn shard_params(&self) -> usize {
        (self.layer.param_count / self.dist.group_size as u64) as usize
    }

    /// Output activations produced locally for a minibatch.
    pub fn activation_block(&self, mb: usize) -> usize {
        mb * self.layer.activation_elems_per_sample() as usize / self.dist.group_size
    }

    /// Allgathers this rank's activation block over the model group.
    pub fn forward_activations_begin(&mut self, block: &[f32]) -> Result<(), LayerError> {
        if !self.activation.is_empty() {
            return Err(LayerError::Busy("activation"));
        }
        let g = self.dist.group_size;
        if g == 1 {
            self.activation = Slot::Ready(block.to_vec());
            return Ok(());
        }
        let group = self.dist.model_group();
        let me = group.my_index();
        let mut full = vec![0.0f32; block.len() * g];
        full[me * block.len()..(me + 1) * block.len()].copy_from_slice(block);
        let h = self.runtime.submit(
            CollectiveKind::Allgather,
            full,
            group,
            ReduceOp::Sum,
            Priority::activation(self.layer.id),
        )?;
        self.activation = Slot::Pending(h);
        Ok(())
    }

    /// Concatenated activations of the whole model group.
    pub fn forward_activations_wait(&mut self) -> Result<Vec<f32>, LayerError> {
        self.wait_slot(false)
    }

    /// Reduce-scatters activation gradients over the model group; this
    /// rank keeps the sum of its own segment.
    pub fn backward_inputgrad_begin(&mut self, grads: Vec<f32>) -> Result<(), LayerError> {
        if !self.activation.is_empty() {
            return Err(LayerError::Busy("activation"));
        }
        let g = self.dist.group_size;
        if g == 1 {
            self.activation = Slot::Ready(grads);
            return Ok(());
        }
        if grads.len() % g != 0 {
            return Err(LayerError::LengthMismatch {
                expected: grads.len().next_multiple_of(g),
                actual: grads.len(),
            });
        }
        let h = self.runtime.submit(
            CollectiveKind::ReduceScatter,
            grads,
            self.dist.model_group(),
            ReduceOp::Sum,
            Priority::activation(self.layer.id),
        )?;
        self.activation = Slot::Pending(h);
        Ok(())
    }

    pub fn backward_inputgrad_wait(&mut self) -> Result<Vec<f32>, LayerError> {
        self.wait_slot(false)
    }

    /// Allreduces this rank's partial weight gradients over its data peers.
    pub fn backward_wgrad_begin(&mut self, partial: Vec<f32>) -> Result<(), LayerError> {
        if !self.wgrad.is_empty() {
            return Err(LayerError::Busy("weight-gradient"));
        }
        if partial.len() != self.shard_params() {
            return Err(LayerError::LengthMismatch {
                expected: self.shard_params(),
                actual: partial.len(),
            });
        }
        if self.dist.data_groups() == 1 {
            self.wgrad = Slot::Ready(partial);
            return Ok(());
        }
        let h = self.runtime.submit(
            CollectiveKind::Allreduce,
            partial,
            self.dist.data_peers(),
            ReduceOp::Sum,
            Priority::weight_gradient(self.layer.id),
        )?;
        self.wgrad = Slot::Pending(h);
        Ok(())
    }

    /// Must be called before this layer's next forward compute.
    pub fn wgrad_wait(&mut self) -> Result<Vec<f32>, LayerError> {
        self.wait_slot(true)
    }

    pub fn wgrad_done(&self) -> Result<bool, LayerError> {
        self.test_slot(&self.wgrad, "weight-gradient")
    }

    pub fn activation_done(&self) -> Result<bool, LayerError> {
        self.test_slot(&self.activation, "activation")
    }

    fn test_slot(&self, slot: &Slot, name: &'static str) -> Result<bool, LayerError> {
        match slot {
            Slot::Empty => Err(LayerError::NothingPending(name)),
            Slot::Ready(_) => Ok(true),
            Slot::Pending(h) => Ok(self.runtime.test(h)?),
        }
    }

    fn wait_slot(&mut self, wgrad: bool) -> Result<Vec<f32>, LayerError> {
        let (slot, name) = if wgrad {
            (&mut self.wgrad, "weight-gradient")
        } else {
            (&mut self.activation, "activation")
        };
        match std::mem::replace(slot, Slot::Empty) {
            Slot::Empty => Err(LayerError::NothingPending(name)),
            Slot::Ready(v) => Ok(v),
            Slot::Pending(h) => {
                let c = self.runtime.wait(h)?;
                match c.diagnostic {
                    Some(d) if c.state != crate::scheduler::RequestState::Done => {
                        Err(SchedulerError::TransportFailure(d).into())
                    }
                    _ => Ok(c.buffer),
                }
            }
        }
    }
}
