//! Compute-to-communication cost model and the per-layer parallelism planner.
//!
//! Flops: a parameterized layer costs one forward pass plus two backward
//! passes (data gradient and weight gradient), i.e. `3 · MB · fwd_flops`.
//! Communication follows the ring alpha-beta model. Weight-gradient
//! allreduces overlap with later compute at effectiveness `eta`; activation
//! exchanges under model parallelism block the next layer and never overlap.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::collectives::CollectiveKind;
use crate::profile::{LayerDescriptor, ModelProfile, Precision};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("group size {group_size} does not divide world size {world}")]
    InvalidGroup { group_size: usize, world: usize },
    #[error("layer {layer}: {what} {value} is not divisible by group size {group_size}")]
    IndivisibleShard {
        layer: usize,
        what: &'static str,
        value: u64,
        group_size: usize,
    },
    #[error("plan does not match profile: {0}")]
    PlanMismatch(String),
    #[error("invalid cluster configuration: {0}")]
    Config(String),
}

/// Cluster parameters for the alpha-beta-gamma model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterConfig {
    pub world: usize,
    /// Per-message latency, seconds.
    pub alpha: f64,
    /// Link bandwidth, bytes per second.
    pub beta: f64,
    /// Per-node compute throughput, flops per second.
    pub gamma: f64,
    /// Overlap effectiveness in [0, 1].
    pub eta: f64,
    pub wire: Precision,
}

impl ClusterConfig {
    /// 10 Gbps Ethernet with Xeon-class compute.
    pub fn ethernet_10g(world: usize) -> Self {
        ClusterConfig {
            world,
            alpha: 5e-6,
            beta: 1.25e9,
            gamma: 3e12,
            eta: 0.9,
            wire: Precision::Fp32,
        }
    }

    /// 100 Gbps HPC fabric; the calibration used for weak-scaling runs.
    /// `alpha` is the per-chunk software cost of the progress engine, not
    /// the raw switch latency.
    pub fn fabric_100g(world: usize) -> Self {
        ClusterConfig {
            alpha: 8e-6,
            beta: 12.5e9,
            ..Self::ethernet_10g(world)
        }
    }

    pub fn with_world(self, world: usize) -> Self {
        ClusterConfig { world, ..self }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |msg: &str| Err(CostError::Config(msg.to_string()));
        if self.world < 1 {
            return bad("world size must be at least 1");
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad("beta must be positive");
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad("gamma must be positive");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Model-parallel group size for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct StrategyChoice {
    pub group_size: usize,
}

impl StrategyChoice {
    pub const DATA_PARALLEL: StrategyChoice = StrategyChoice { group_size: 1 };

    pub fn new(group_size: usize) -> Self {
        StrategyChoice { group_size }
    }

    /// Number of data-parallel replica groups, `world / group_size`.
    pub fn data_groups(&self, world: usize) -> Result<usize, CostError> {
        if self.group_size == 0 || world % self.group_size != 0 {
            return Err(CostError::InvalidGroup {
                group_size: self.group_size,
                world,
            });
        }
        Ok(world / self.group_size)
    }
}

/// Per-node bytes on the wire for one layer and one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CommVolume {
    pub wgrad_bytes: f64,
    pub activation_bytes: f64,
}

impl CommVolume {
    pub fn total(&self) -> f64 {
        self.wgrad_bytes + self.activation_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Finite(f64),
    /// Nothing to communicate.
    Unbounded,
}

impl Ratio {
    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Finite(v) => Some(v),
            Ratio::Unbounded => None,
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Finite(v) => write!(f, "{v:.1}"),
            Ratio::Unbounded => f.write_str("inf"),
        }
    }
}

/// Forward plus backward flops of one layer for `mb` samples.
pub fn layer_flops(layer: &LayerDescriptor, mb: u64) -> f64 {
    let fwd = mb as f64 * layer.fwd_flops_per_sample;
    if layer.is_parameterized() {
        3.0 * fwd
    } else {
        fwd
    }
}

/// Forward-pass share of [`layer_flops`]. NonParam layers split evenly.
pub fn forward_flops(layer: &LayerDescriptor, mb: u64) -> f64 {
    let fwd = mb as f64 * layer.fwd_flops_per_sample;
    if layer.is_parameterized() {
        fwd
    } else {
        fwd / 2.0
    }
}

/// Backward-pass share of [`layer_flops`].
pub fn backward_flops(layer: &LayerDescriptor, mb: u64) -> f64 {
    layer_flops(layer, mb) - forward_flops(layer, mb)
}

/// Checks that a layer can be sharded over `group_size` ranks.
pub fn check_shardable(layer: &LayerDescriptor, group_size: usize) -> Result<(), CostError> {
    let g = group_size as u64;
    if group_size <= 1 || !layer.is_parameterized() {
        return Ok(());
    }
    if layer.out_channels % g != 0 {
        return Err(CostError::IndivisibleShard {
            layer: layer.id,
            what: "K",
            value: layer.out_channels,
            group_size,
        });
    }
    if layer.param_count % g != 0 {
        return Err(CostError::IndivisibleShard {
            layer: layer.id,
            what: "param_count",
            value: layer.param_count,
            group_size,
        });
    }
    Ok(())
}

pub fn comm_volume(
    layer: &LayerDescriptor,
    choice: StrategyChoice,
    cluster: &ClusterConfig,
    mb: u64,
) -> Result<CommVolume, CostError> {
    let d = choice.data_groups(cluster.world)?;
    let g = choice.group_size;
    if !layer.is_parameterized() {
        return Ok(CommVolume::default());
    }
    let e = cluster.wire.bytes() as f64;
    let wgrad_bytes = if d == 1 {
        0.0
    } else {
        2.0 * (d - 1) as f64 / d as f64 * (layer.param_count as f64 / g as f64) * e
    };
    let activation_bytes = if g == 1 {
        0.0
    } else {
        2.0 * (g - 1) as f64 / g as f64 * (mb * layer.activation_elems_per_sample()) as f64 * e
    };
    Ok(CommVolume {
        wgrad_bytes,
        activation_bytes,
    })
}

pub fn compute_comm_ratio(
    layer: &LayerDescriptor,
    choice: StrategyChoice,
    cluster: &ClusterConfig,
    mb: u64,
) -> Result<Ratio, CostError> {
    let volume = comm_volume(layer, choice, cluster, mb)?.total();
    Ok(if volume > 0.0 {
        Ratio::Finite(layer_flops(layer, mb) / volume)
    } else {
        Ratio::Unbounded
    })
}

/// Ring alpha-beta time of one collective over `n` ranks on an `nbytes` buffer.
pub fn estimate_collective_time(kind: CollectiveKind, nbytes: f64, n: usize, cluster: &ClusterConfig) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let steps = (n - 1) as f64;
    let (alpha, beta) = (cluster.alpha, cluster.beta);
    match kind {
        CollectiveKind::Allreduce => 2.0 * steps * (alpha + nbytes / n as f64 / beta),
        CollectiveKind::Allgather | CollectiveKind::ReduceScatter => {
            steps * (alpha + nbytes / n as f64 / beta)
        }
        CollectiveKind::Broadcast => steps * (alpha + nbytes / beta),
        CollectiveKind::Barrier => steps * alpha,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedLayer {
    #[serde(rename = "id")]
    pub layer_id: usize,
    pub group_size: usize,
    pub est_compute_s: f64,
    pub est_comm_s: f64,
    pub est_exposed_s: f64,
}

/// Per-layer strategy plus estimated times. One entry per parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelismPlan {
    pub layers: Vec<PlannedLayer>,
    pub total_s: f64,
}

impl ParallelismPlan {
    /// Same group size for every parameterized layer; estimates left at zero.
    pub fn uniform(profile: &ModelProfile, group_size: usize) -> Self {
        ParallelismPlan {
            layers: profile
                .parameterized()
                .map(|l| PlannedLayer {
                    layer_id: l.id,
                    group_size,
                    est_compute_s: 0.0,
                    est_comm_s: 0.0,
                    est_exposed_s: 0.0,
                })
                .collect(),
            total_s: 0.0,
        }
    }

    pub fn from_group_sizes(profile: &ModelProfile, sizes: &[usize]) -> Result<Self, CostError> {
        let ids: Vec<usize> = profile.parameterized().map(|l| l.id).collect();
        if ids.len() != sizes.len() {
            return Err(CostError::PlanMismatch(format!(
                "{} group sizes for {} parameterized layers",
                sizes.len(),
                ids.len()
            )));
        }
        let mut plan = ParallelismPlan::uniform(profile, 1);
        for (entry, &g) in plan.layers.iter_mut().zip(sizes) {
            entry.group_size = g;
        }
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, CostError> {
        serde_json::from_str(text).map_err(|e| CostError::PlanMismatch(format!("unreadable plan: {e}")))
    }

    /// Group size per layer index (1 for NonParam layers), after checking the
    /// plan against the profile and cluster.
    pub fn group_sizes(&self, profile: &ModelProfile, world: usize) -> Result<Vec<usize>, CostError> {
        let mut sizes = vec![1; profile.layers.len()];
        let mut entries = self.layers.iter();
        for layer in profile.parameterized() {
            let entry = entries.next().ok_or_else(|| {
                CostError::PlanMismatch(format!("no entry for layer {}", layer.id))
            })?;
            if entry.layer_id != layer.id {
                return Err(CostError::PlanMismatch(format!(
                    "expected layer {} but plan has {}",
                    layer.id, entry.layer_id
                )));
            }
            StrategyChoice::new(entry.group_size).data_groups(world)?;
            check_shardable(layer, entry.group_size)?;
            sizes[layer.id] = entry.group_size;
        }
        if let Some(extra) = entries.next() {
            return Err(CostError::PlanMismatch(format!(
                "entry for layer {} has no parameterized counterpart",
                extra.layer_id
            )));
        }
        Ok(sizes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerEstimate {
    pub layer_id: usize,
    pub group_size: usize,
    pub compute_s: f64,
    pub comm_s: f64,
    pub exposed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationEstimate {
    pub total_s: f64,
    pub compute_s: f64,
    /// Parameterized layers only.
    pub layers: Vec<LayerEstimate>,
}

impl IterationEstimate {
    pub fn exposed_s(&self) -> f64 {
        self.layers.iter().map(|l| l.exposed_s).sum()
    }
}

/// Per-layer cost given the compute of all earlier layers (the overlap window
/// for its weight-gradient allreduce).
fn layer_estimate(
    layer: &LayerDescriptor,
    group_size: usize,
    earlier_compute_s: f64,
    cluster: &ClusterConfig,
    mb: u64,
) -> Result<LayerEstimate, CostError> {
    let choice = StrategyChoice::new(group_size);
    let d = choice.data_groups(cluster.world)?;
    let g = group_size;
    let e = cluster.wire.bytes() as f64;
    let compute_s = layer_flops(layer, mb) / (cluster.gamma * g as f64);
    let wgrad_s = estimate_collective_time(
        CollectiveKind::Allreduce,
        layer.param_count as f64 / g as f64 * e,
        d,
        cluster,
    );
    let act_bytes = (mb * layer.activation_elems_per_sample()) as f64 * e;
    let act_s = estimate_collective_time(CollectiveKind::Allgather, act_bytes, g, cluster)
        + estimate_collective_time(CollectiveKind::ReduceScatter, act_bytes, g, cluster);
    let exposed_wgrad = (wgrad_s - cluster.eta * earlier_compute_s).max(0.0);
    Ok(LayerEstimate {
        layer_id: layer.id,
        group_size,
        compute_s,
        comm_s: wgrad_s + act_s,
        exposed_s: exposed_wgrad + act_s,
    })
}

pub fn estimate_iteration_time(
    profile: &ModelProfile,
    plan: &ParallelismPlan,
    cluster: &ClusterConfig,
    mb: u64,
) -> Result<IterationEstimate, CostError> {
    cluster.validate()?;
    let sizes = plan.group_sizes(profile, cluster.world)?;
    let mut earlier = 0.0;
    let mut layers = Vec::with_capacity(plan.layers.len());
    for layer in &profile.layers {
        let g = sizes[layer.id];
        let compute = if layer.is_parameterized() {
            let est = layer_estimate(layer, g, earlier, cluster, mb)?;
            let c = est.compute_s;
            layers.push(est);
            c
        } else {
            layer_flops(layer, mb) / cluster.gamma
        };
        earlier += compute;
    }
    let compute_s = earlier;
    let total_s = compute_s + layers.iter().map(|l| l.exposed_s).sum::<f64>();
    Ok(IterationEstimate {
        total_s,
        compute_s,
        layers,
    })
}

/// Chooses a group size per parameterized layer minimizing that layer's
/// compute plus exposed communication. Layers are decided in forward order,
/// so each layer's overlap window reflects the choices already made. Ties go
/// to the smaller group; candidates that cannot shard a layer are skipped.
pub fn select_plan(
    profile: &ModelProfile,
    cluster: &ClusterConfig,
    mb: u64,
    candidates: &[usize],
) -> Result<ParallelismPlan, CostError> {
    cluster.validate()?;
    if candidates.is_empty() {
        return Err(CostError::Config("candidate group sizes must not be empty".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &g in &sorted {
        StrategyChoice::new(g).data_groups(cluster.world)?;
    }

    let mut earlier = 0.0;
    let mut layers = Vec::new();
    for layer in &profile.layers {
        if !layer.is_parameterized() {
            earlier += layer_flops(layer, mb) / cluster.gamma;
            continue;
        }
        let mut best: Option<LayerEstimate> = None;
        let mut first_err = None;
        for &g in &sorted {
            if let Err(e) = check_shardable(layer, g) {
                first_err.get_or_insert(e);
                continue;
            }
            let est = layer_estimate(layer, g, earlier, cluster, mb)?;
            let cost = est.compute_s + est.exposed_s;
            if best.as_ref().is_none_or(|b| cost < b.compute_s + b.exposed_s) {
                best = Some(est);
            }
        }
        let best = match (best, first_err) {
            (Some(b), _) => b,
            (None, Some(e)) => return Err(e),
            (None, None) => unreachable!("candidate set is non-empty"),
        };
        earlier += best.compute_s;
        layers.push(PlannedLayer {
            layer_id: best.layer_id,
            group_size: best.group_size,
            est_compute_s: best.compute_s,
            est_comm_s: best.comm_s,
            est_exposed_s: best.exposed_s,
        });
    }
    let total_s = earlier + layers.iter().map(|l| l.est_exposed_s).sum::<f64>();
    Ok(ParallelismPlan { layers, total_s })
}

/// Divisors of `world`, ascending.
pub fn divisors(world: usize) -> Vec<usize> {
    (1..=world).filter(|g| world % g == 0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(rename = "P")]
    pub world: usize,
    pub iter_time_s: f64,
    pub efficiency: f64,
}

/// Weak-scaling estimate with pure data parallelism: `efficiency(P) = T(1)/T(P)`.
pub fn scaling_sweep(
    profile: &ModelProfile,
    template: &ClusterConfig,
    mb: u64,
    worlds: &[usize],
) -> Result<Vec<SweepRow>, CostError> {
    let plan = ParallelismPlan::uniform(profile, 1);
    let base = estimate_iteration_time(profile, &plan, &template.with_world(1), mb)?.total_s;
    worlds
        .iter()
        .map(|&p| {
            let t = estimate_iteration_time(profile, &plan, &template.with_world(p), mb)?.total_s;
            Ok(SweepRow {
                world: p,
                iter_time_s: t,
                efficiency: if p == 1 { 1.0 } else { base / t },
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("P,iter_time_s,efficiency\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.world, r.iter_time_s, r.efficiency));
    }
    out
}
