//! Training-iteration driver on the simulated network.
//!
//! Every node runs the same program per iteration: forward layers in
//! order, then backward layers in reverse. Before the forward compute of a
//! layer (from the second iteration on) the node waits for that layer's
//! weight-gradient allreduce from the previous iteration. Layers split
//! over a node group exchange activations after forward (allgather) and
//! activation gradients after backward (reduce-scatter), both blocking.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{LinkParams, ReqId, RequestSpec, SimNet};
use super::SimError;
use crate::collectives::{CollectiveKind, ReduceOp, DEFAULT_CHUNK_BYTES};
use crate::cost::{backward_flops, forward_flops, ClusterConfig, ParallelismPlan, SweepRow};
use crate::profile::{ModelProfile, Precision};
use crate::scheduler::Priority;
use crate::trace::{Link, TraceEvent, TraceKind};

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub prioritize: bool,
    /// Forces an INT8 wire regardless of the cluster setting.
    pub quantize: bool,
    /// Overrides the cluster's overlap effectiveness.
    pub eta: Option<f64>,
    pub chunk_bytes: usize,
    pub capture_trace: bool,
    /// Relative half-width of uniform noise on compute durations, drawn
    /// from the run seed. Zero gives noise-free compute.
    pub compute_jitter: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            prioritize: true,
            quantize: false,
            eta: None,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            capture_trace: false,
            compute_jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    ActivationForward,
    ActivationBackward,
    WeightGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestInfo {
    pub id: ReqId,
    pub layer: usize,
    pub iteration: usize,
    pub phase: Phase,
    pub kind: CollectiveKind,
    pub members: usize,
    pub bytes: u64,
}

/// Steady-state per-layer figures, averaged over nodes and iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMetrics {
    pub layer_id: usize,
    pub exposed_comm_s: f64,
    pub comm_s: f64,
    pub compute_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimMetrics {
    pub world: usize,
    pub iterations: usize,
    /// Mean iteration time excluding the first iteration.
    pub iteration_s: f64,
    /// Time at which the last node finished each iteration's backward pass.
    pub iteration_ends: Vec<f64>,
    /// Exposed communication per iteration, averaged over nodes.
    pub exposed_comm_s: f64,
    pub layers: Vec<LayerMetrics>,
    pub link_utilization: f64,
    /// Payload bytes over all links for one iteration.
    pub wire_bytes_per_iteration: u64,
    pub total_wire_bytes: u64,
    pub transfers: u64,
    pub preemptions: u64,
    pub makespan_s: f64,
    pub requests: Vec<RequestInfo>,
    pub trace: Vec<TraceEvent>,
}

impl SimMetrics {
    /// `layer_id,exposed_comm_s,comm_s,compute_s` with a closing totals row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,exposed_comm_s,comm_s,compute_s\n");
        let (mut e, mut c, mut k) = (0.0, 0.0, 0.0);
        for l in &self.layers {
            out.push_str(&format!("{},{},{},{}\n", l.layer_id, l.exposed_comm_s, l.comm_s, l.compute_s));
            e += l.exposed_comm_s;
            c += l.comm_s;
            k += l.compute_s;
        }
        out.push_str(&format!("total,{e},{c},{k}\n"));
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    WaitWgrad(usize),
    Forward(usize),
    Backward(usize),
    Submit(Phase, usize),
    Wait(Phase, usize),
    IterEnd,
}

struct Node {
    iter: usize,
    pc: usize,
    blocked: Option<(ReqId, usize, f64, usize)>,
    computing: Option<(usize, f64)>,
    rng: ChaCha8Rng,
    finished: bool,
}

struct Driver<'a> {
    profile: &'a ModelProfile,
    sizes: Vec<usize>,
    world: usize,
    mb: u64,
    gamma: f64,
    iterations: usize,
    jitter: f64,
    ops: Vec<Op>,
    nodes: Vec<Node>,
    requests: HashMap<(usize, usize, Phase, usize), ReqId>,
    infos: Vec<RequestInfo>,
    ends: Vec<Vec<f64>>,
    exposed: Vec<f64>,
    compute: Vec<f64>,
}

impl<'a> Driver<'a> {
    fn program(profile: &ModelProfile, sizes: &[usize], world: usize) -> Vec<Op> {
        let mut ops = Vec::new();
        let data_parallel = |l: usize| profile.layers[l].is_parameterized() && world / sizes[l] > 1;
        let model_parallel = |l: usize| sizes[l] > 1;
        for l in 0..profile.layers.len() {
            if data_parallel(l) {
                ops.push(Op::WaitWgrad(l));
            }
            ops.push(Op::Forward(l));
            if model_parallel(l) {
                ops.push(Op::Submit(Phase::ActivationForward, l));
                ops.push(Op::Wait(Phase::ActivationForward, l));
            }
        }
        for l in (0..profile.layers.len()).rev() {
            ops.push(Op::Backward(l));
            if model_parallel(l) {
                ops.push(Op::Submit(Phase::ActivationBackward, l));
                ops.push(Op::Wait(Phase::ActivationBackward, l));
            }
            if data_parallel(l) {
                ops.push(Op::Submit(Phase::WeightGradient, l));
            }
        }
        ops.push(Op::IterEnd);
        ops
    }

    /// Group node list, group index and member index for `node`.
    fn group(&self, phase: Phase, layer: usize, node: usize) -> (Vec<usize>, usize, usize) {
        let g = self.sizes[layer];
        match phase {
            Phase::WeightGradient => {
                let d = self.world / g;
                ((0..d).map(|k| node % g + k * g).collect(), node % g, node / g)
            }
            _ => {
                let base = node / g * g;
                ((base..base + g).collect(), node / g, node % g)
            }
        }
    }

    fn request(&mut self, net: &mut SimNet, iter: usize, phase: Phase, layer: usize, node: usize) -> (ReqId, usize) {
        let (nodes, gidx, member) = self.group(phase, layer, node);
        let key = (iter, layer, phase, gidx);
        if let Some(&id) = self.requests.get(&key) {
            return (id, member);
        }
        let l = &self.profile.layers[layer];
        let g = self.sizes[layer];
        let (kind, elems, priority) = match phase {
            Phase::WeightGradient => (
                CollectiveKind::Allreduce,
                (l.param_count / g as u64) as usize,
                Priority::weight_gradient(layer),
            ),
            Phase::ActivationForward => (
                CollectiveKind::Allgather,
                (self.mb * l.activation_elems_per_sample()) as usize,
                Priority::activation(layer),
            ),
            Phase::ActivationBackward => (
                CollectiveKind::ReduceScatter,
                (self.mb * l.activation_elems_per_sample()) as usize,
                Priority::activation(layer),
            ),
        };
        let members = nodes.len();
        let id = net.add_request(RequestSpec {
            kind,
            nodes,
            elems,
            op: ReduceOp::Sum,
            priority,
            inputs: None,
        });
        self.requests.insert(key, id);
        self.infos.push(RequestInfo {
            id,
            layer,
            iteration: iter,
            phase,
            kind,
            members,
            bytes: 0,
        });
        (id, member)
    }

    fn compute_time(&mut self, node: usize, flops: f64) -> f64 {
        let base = flops / self.gamma;
        if self.jitter > 0.0 {
            let u: f64 = self.nodes[node].rng.gen_range(-1.0..=1.0);
            base * (1.0 + self.jitter * u)
        } else {
            base
        }
    }

    fn run(&mut self, net: &mut SimNet, node: usize) {
        loop {
            let n = &self.nodes[node];
            if n.finished || n.blocked.is_some() || n.computing.is_some() {
                return;
            }
            let (iter, op) = (n.iter, self.ops[n.pc]);
            let now = net.now();
            match op {
                Op::WaitWgrad(l) | Op::Wait(_, l) => {
                    let prev = match op {
                        Op::WaitWgrad(_) if iter == 0 => {
                            self.nodes[node].pc += 1;
                            continue;
                        }
                        Op::WaitWgrad(_) => (iter - 1, Phase::WeightGradient),
                        Op::Wait(p, _) => (iter, p),
                        _ => unreachable!(),
                    };
                    let (req, member) = self.request(net, prev.0, prev.1, l, node);
                    if net.is_member_done(req, member) {
                        self.nodes[node].pc += 1;
                    } else {
                        net.promote(req, member);
                        net.record(TraceKind::WaitStart, req as u64, iter as u64, Link::Node(node));
                        self.nodes[node].blocked = Some((req, member, now, l));
                        return;
                    }
                }
                Op::Forward(l) | Op::Backward(l) => {
                    let layer = &self.profile.layers[l];
                    let g = self.sizes[l] as f64;
                    let (flops, kind) = match op {
                        Op::Forward(_) => (forward_flops(layer, self.mb), TraceKind::ForwardStart),
                        _ => (backward_flops(layer, self.mb), TraceKind::BackwardStart),
                    };
                    let dur = self.compute_time(node, flops / g);
                    net.record(kind, l as u64, iter as u64, Link::Node(node));
                    net.set_computing(node, true);
                    net.schedule_external(now + dur, node as u64);
                    self.nodes[node].computing = Some((l, dur));
                    return;
                }
                Op::Submit(p, l) => {
                    let (req, member) = self.request(net, iter, p, l, node);
                    net.submit(req, member);
                    self.nodes[node].pc += 1;
                }
                Op::IterEnd => {
                    self.ends[node].push(now);
                    let n = &mut self.nodes[node];
                    n.iter += 1;
                    n.pc = 0;
                    if n.iter == self.iterations {
                        n.finished = true;
                        return;
                    }
                }
            }
        }
    }

    fn on_compute_done(&mut self, net: &mut SimNet, node: usize) {
        let (l, dur) = self.nodes[node].computing.take().expect("node was computing");
        net.set_computing(node, false);
        if self.nodes[node].iter >= 1 {
            self.compute[l] += dur;
        }
        self.nodes[node].pc += 1;
        self.run(net, node);
    }

    fn on_complete(&mut self, net: &mut SimNet, req: ReqId, member: usize) {
        let node = net.node_of(req, member);
        if let Some((r, m, since, layer)) = self.nodes[node].blocked {
            if r == req && m == member {
                let now = net.now();
                if self.nodes[node].iter >= 1 {
                    self.exposed[layer] += now - since;
                }
                net.record(TraceKind::WaitEnd, req as u64, self.nodes[node].iter as u64, Link::Node(node));
                self.nodes[node].blocked = None;
                self.nodes[node].pc += 1;
                self.run(net, node);
            }
        }
    }
}

/// Simulates `iterations` training iterations on `cluster.world` nodes.
pub fn sim_run(
    profile: &ModelProfile,
    plan: &ParallelismPlan,
    cluster: &ClusterConfig,
    mb: u64,
    iterations: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<SimMetrics, SimError> {
    cluster.validate()?;
    if iterations < 2 {
        return Err(SimError::Config("at least 2 iterations are required".into()));
    }
    if mb == 0 {
        return Err(SimError::Config("minibatch must be positive".into()));
    }
    if opts.chunk_bytes == 0 {
        return Err(SimError::Config("chunk size must be positive".into()));
    }
    let eta = opts.eta.unwrap_or(cluster.eta);
    if !(0.0..=1.0).contains(&eta) {
        return Err(SimError::Config(format!("eta {eta} outside [0, 1]")));
    }
    if !(0.0..1.0).contains(&opts.compute_jitter) {
        return Err(SimError::Config("compute jitter must be in [0, 1)".into()));
    }
    let sizes = plan.group_sizes(profile, cluster.world)?;
    let world = cluster.world;
    let wire = if opts.quantize { Precision::Int8 } else { cluster.wire };
    let link = LinkParams {
        alpha: cluster.alpha,
        beta: cluster.beta,
        eta,
    };
    let mut net = SimNet::new(world, link, wire, opts.chunk_bytes, opts.prioritize, opts.capture_trace);
    let ops = Driver::program(profile, &sizes, world);
    let layers = profile.layers.len();
    let mut d = Driver {
        profile,
        sizes,
        world,
        mb,
        gamma: cluster.gamma,
        iterations,
        jitter: opts.compute_jitter,
        ops,
        nodes: (0..world)
            .map(|n| Node {
                iter: 0,
                pc: 0,
                blocked: None,
                computing: None,
                rng: ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
                finished: false,
            })
            .collect(),
        requests: HashMap::new(),
        infos: Vec::new(),
        ends: vec![Vec::with_capacity(iterations); world],
        exposed: vec![0.0; layers],
        compute: vec![0.0; layers],
    };

    for node in 0..world {
        d.run(&mut net, node);
    }
    loop {
        for (req, member) in net.take_completions() {
            d.on_complete(&mut net, req, member);
        }
        net.dispatch();
        let Some(ext) = net.advance() else { break };
        for tok in ext {
            d.on_compute_done(&mut net, tok as usize);
        }
    }
    if let Some(stuck) = d.nodes.iter().position(|n| !n.finished) {
        return Err(SimError::Config(format!("node {stuck} did not finish; schedule deadlocked")));
    }

    let steady = (iterations - 1) as f64;
    let norm = world as f64 * steady;
    let ends: Vec<f64> = (0..iterations)
        .map(|t| d.ends.iter().map(|e| e[t]).fold(0.0, f64::max))
        .collect();
    let iteration_s = (ends[iterations - 1] - ends[0]) / steady;

    let mut comm = vec![0.0; layers];
    for info in d.infos.iter_mut() {
        info.bytes = net.request_bytes(info.id);
        if info.iteration >= 1 {
            let r = &net.reqs[info.id];
            comm[info.layer] += r.done_at.iter().zip(&r.submit_at).map(|(d, s)| d - s).sum::<f64>();
        }
    }
    let layer_rows: Vec<LayerMetrics> = (0..layers)
        .map(|l| LayerMetrics {
            layer_id: profile.layers[l].id,
            exposed_comm_s: d.exposed[l] / norm,
            comm_s: comm[l] / norm,
            compute_s: d.compute[l] / norm,
        })
        .collect();
    let wire_bytes_per_iteration = d.infos.iter().filter(|i| i.iteration == 0).map(|i| i.bytes).sum();
    let makespan_s = net.now();
    let link_utilization = if makespan_s > 0.0 {
        net.tx_busy_time() / (world as f64 * makespan_s)
    } else {
        0.0
    };
    let mut requests = std::mem::take(&mut d.infos);
    requests.sort_by_key(|i| i.id);
    Ok(SimMetrics {
        world,
        iterations,
        iteration_s,
        iteration_ends: ends,
        exposed_comm_s: d.exposed.iter().sum::<f64>() / norm,
        layers: layer_rows,
        link_utilization,
        wire_bytes_per_iteration,
        total_wire_bytes: net.total_bytes(),
        transfers: net.transfers(),
        preemptions: net.preemptions(),
        makespan_s,
        requests,
        trace: net.take_trace(),
    })
}

/// Weak-scaling sweep with the data-parallel plan. Each world size runs on
/// its own thread; results do not depend on thread timing.
pub fn sim_sweep(
    profile: &ModelProfile,
    template: &ClusterConfig,
    mb: u64,
    worlds: &[usize],
    iterations: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<Vec<SweepRow>, SimError> {
    if worlds.is_empty() {
        return Err(SimError::Config("empty world list".into()));
    }
    let plan = ParallelismPlan::uniform(profile, 1);
    let opts = SimOptions {
        capture_trace: false,
        ..opts.clone()
    };
    let mut all: Vec<usize> = vec![1];
    all.extend(worlds.iter().copied().filter(|&p| p != 1));
    let times: Vec<Result<f64, SimError>> = std::thread::scope(|s| {
        let hs: Vec<_> = all
            .iter()
            .map(|&p| {
                let (plan, opts) = (&plan, &opts);
                s.spawn(move || {
                    sim_run(profile, plan, &template.with_world(p), mb, iterations, seed, opts)
                        .map(|m| m.iteration_s)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut by_world = HashMap::new();
    for (p, t) in all.iter().zip(times) {
        by_world.insert(*p, t?);
    }
    let base = by_world[&1];
    Ok(worlds
        .iter()
        .map(|&p| {
            let t = by_world[&p];
            SweepRow {
                world: p,
                iter_time_s: t,
                efficiency: if p == 1 { 1.0 } else { base / t },
            }
        })
        .collect())
}
