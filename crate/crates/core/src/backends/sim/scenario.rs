//! Collective-level runs on the simulated network: a fixed set of requests
//! with per-member submit times and no compute.

use super::net::{Fault, LinkParams, RequestSpec, SimNet};
use super::SimError;
use crate::collectives::{CollectiveKind, ReduceOp, DEFAULT_CHUNK_BYTES};
use crate::profile::Precision;
use crate::scheduler::Priority;
use crate::trace::TraceEvent;

#[derive(Debug, Clone)]
pub struct ScenarioRequest {
    pub kind: CollectiveKind,
    /// Node of each ring member.
    pub nodes: Vec<usize>,
    /// One buffer per member. Barrier takes empty buffers.
    pub inputs: Vec<Vec<f32>>,
    pub op: ReduceOp,
    pub priority: Priority,
    /// Submit time per member.
    pub submit_at: Vec<f64>,
    /// When set, every member waits on (and so promotes) the request at
    /// this time.
    pub promote_at: Option<f64>,
}

impl ScenarioRequest {
    /// A request submitted by every member at `at`.
    pub fn new(kind: CollectiveKind, nodes: Vec<usize>, inputs: Vec<Vec<f32>>, priority: Priority, at: f64) -> Self {
        let n = nodes.len();
        ScenarioRequest {
            kind,
            nodes,
            inputs,
            op: ReduceOp::Sum,
            priority,
            submit_at: vec![at; n],
            promote_at: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub world: usize,
    pub link: LinkParams,
    pub wire: Precision,
    pub chunk_bytes: usize,
    pub prioritize: bool,
    pub capture_trace: bool,
    pub fault: Option<Fault>,
}

impl ScenarioConfig {
    pub fn new(world: usize, alpha: f64, beta: f64) -> Self {
        ScenarioConfig {
            world,
            link: LinkParams { alpha, beta, eta: 1.0 },
            wire: Precision::Fp32,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            prioritize: true,
            capture_trace: false,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    /// outputs[request][member]
    pub outputs: Vec<Vec<Vec<f32>>>,
    pub submit_at: Vec<Vec<f64>>,
    pub done_at: Vec<Vec<f64>>,
    pub max_partial_abs: Vec<f32>,
    /// Payload bytes per request.
    pub wire_bytes: Vec<u64>,
    pub trace: Vec<TraceEvent>,
    pub makespan: f64,
    pub preemptions: u64,
}

const SUBMIT: u64 = 0;
const PROMOTE: u64 = 1;

pub fn run_scenario(cfg: &ScenarioConfig, requests: &[ScenarioRequest]) -> Result<ScenarioResult, SimError> {
    if cfg.link.alpha < 0.0 || cfg.link.beta <= 0.0 || !(0.0..=1.0).contains(&cfg.link.eta) {
        return Err(SimError::Config("link parameters out of range".into()));
    }
    let mut net = SimNet::new(cfg.world, cfg.link, cfg.wire, cfg.chunk_bytes, cfg.prioritize, cfg.capture_trace);
    net.set_fault(cfg.fault);
    // Token: request index, member and action packed into 64 bits.
    let token = |req: usize, member: usize, action: u64| ((req as u64) << 33) | ((member as u64) << 1) | action;
    for (i, r) in requests.iter().enumerate() {
        let n = r.nodes.len();
        if n == 0 || r.inputs.len() != n || r.submit_at.len() != n {
            return Err(SimError::Config(format!("request {i}: member, input and submit counts differ")));
        }
        if let Some(&bad) = r.nodes.iter().find(|&&v| v >= cfg.world) {
            return Err(SimError::Config(format!("request {i}: node {bad} outside world")));
        }
        let elems = r.inputs[0].len();
        if r.inputs.iter().any(|v| v.len() != elems) {
            return Err(SimError::Config(format!("request {i}: input lengths differ")));
        }
        let id = net.add_request(RequestSpec {
            kind: r.kind,
            nodes: r.nodes.clone(),
            elems,
            op: r.op,
            priority: r.priority,
            inputs: Some(r.inputs.clone()),
        });
        debug_assert_eq!(id, i);
        for (m, &at) in r.submit_at.iter().enumerate() {
            net.schedule_external(at, token(i, m, SUBMIT));
            if let Some(p) = r.promote_at {
                net.schedule_external(p.max(at), token(i, m, PROMOTE));
            }
        }
    }
    let mut makespan: f64 = 0.0;
    while let Some(ext) = net.advance() {
        makespan = net.now();
        for tok in ext {
            let (req, member) = ((tok >> 33) as usize, ((tok >> 1) & 0xffff_ffff) as usize);
            if tok & 1 == SUBMIT {
                net.submit(req, member);
            } else if !net.is_member_done(req, member) {
                net.promote(req, member);
            }
        }
        net.take_completions();
        net.dispatch();
    }
    let trace = net.take_trace();
    let preemptions = net.preemptions();
    let mut out = ScenarioResult {
        outputs: Vec::with_capacity(requests.len()),
        submit_at: Vec::new(),
        done_at: Vec::new(),
        max_partial_abs: Vec::new(),
        wire_bytes: Vec::new(),
        trace,
        makespan,
        preemptions,
    };
    for r in net.reqs.iter_mut() {
        out.outputs.push(r.results.take().unwrap_or_default());
        out.submit_at.push(r.submit_at.clone());
        out.done_at.push(r.done_at.clone());
        out.max_partial_abs.push(r.max_partial_abs);
        out.wire_bytes.push(r.bytes);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collectives::allreduce_oracle;
    use crate::cost::{estimate_collective_time, ClusterConfig};
    use crate::scheduler::TrafficClass;
    use crate::trace::{Link, TraceKind};

    #[test]
    fn single_allreduce_matches_alpha_beta() {
        let n = 4;
        let elems = 4096;
        let c = ClusterConfig::ethernet_10g(n);
        let mut cfg = ScenarioConfig::new(n, c.alpha, c.beta);
        cfg.chunk_bytes = elems * 4;
        let inputs: Vec<Vec<f32>> = (0..n).map(|r| vec![r as f32; elems]).collect();
        let req = ScenarioRequest::new(CollectiveKind::Allreduce, (0..n).collect(), inputs.clone(), Priority::bulk(), 0.0);
        let res = run_scenario(&cfg, &[req]).unwrap();
        let expect = estimate_collective_time(CollectiveKind::Allreduce, (elems * 4) as f64, n, &c);
        let got = res.done_at[0].iter().cloned().fold(0.0, f64::max);
        assert!(((got - expect) / expect).abs() < 1e-9, "{got} vs {expect}");
        let oracle = allreduce_oracle(&inputs, ReduceOp::Sum).unwrap();
        for o in &res.outputs[0] {
            assert_eq!(o, &oracle);
        }
        assert_eq!(res.wire_bytes[0], (2 * (n - 1) * elems * 4) as u64);
    }

    #[test]
    fn higher_class_preempts_bulk() {
        let n = 2;
        let mut cfg = ScenarioConfig::new(n, 1e-6, 1e9);
        cfg.chunk_bytes = 1024;
        cfg.capture_trace = true;
        let big = ScenarioRequest::new(CollectiveKind::Allreduce, vec![0, 1], vec![vec![1.0; 256 * 100]; 2], Priority::bulk(), 0.0);
        let at = 5.5e-6;
        let urgent = ScenarioRequest::new(
            CollectiveKind::Allreduce,
            vec![0, 1],
            vec![vec![2.0; 512]; 2],
            Priority::new(TrafficClass::Activation, 0),
            at,
        );
        let res = run_scenario(&cfg, &[big, urgent]).unwrap();
        let chunk_t = 1e-6 + 1024.0 / 1e9;
        let first = res
            .trace
            .iter()
            .find(|e| e.kind == TraceKind::ChunkStart && e.request_id == 1 && e.link == Link::Tx(0))
            .unwrap();
        assert!(first.time_s - at <= chunk_t * (1.0 + 1e-12));
        assert!(res.done_at[1][0] < res.done_at[0][0]);
        assert!(res.preemptions > 0);
        assert!(res.outputs[0][0].iter().all(|&v| v == 2.0));
    }
}
