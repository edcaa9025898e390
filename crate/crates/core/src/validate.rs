//! Self-check suites comparing every collective path against its oracle.

use std::net::TcpListener;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::sim::{
    run_scenario, sim_run, Fault, ScenarioConfig, ScenarioRequest, SimOptions,
};
use crate::backends::socket::connect_mesh;
use crate::backends::{TransportError, WireHeader};
use crate::collectives::{
    allreduce_oracle, exchange_in_memory, max_relative_error, CollectiveKind, CommGroup, ReduceOp,
};
use crate::cost::{comm_volume, estimate_collective_time, ClusterConfig, ParallelismPlan, StrategyChoice};
use crate::layer::{Distribution, LayerSession};
use crate::profile::{LayerDescriptor, ModelProfile, Precision};
use crate::scheduler::{Completion, Priority, RequestState, Runtime, RuntimeConfig, SchedulerError, TrafficClass};

pub const RING_SIZES: [usize; 6] = [1, 2, 3, 4, 5, 8];
pub const LENGTHS: [usize; 4] = [1, 7, 64, 1000];
pub const FP32_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    fn new(suite: &'static str) -> Self {
        SuiteReport { suite, checks: Vec::new() }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One line: `suite: PASS (n checks)` or the first failing check.
    pub fn verdict(&self) -> String {
        match self.checks.iter().find(|c| !c.passed) {
            None => format!("{}: PASS ({} checks)", self.suite, self.checks.len()),
            Some(c) => format!("{}: FAIL ({}: {})", self.suite, c.name, c.detail),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidateOptions {
    /// Corrupt one byte of one simulated chunk in the collectives suite.
    pub inject_fault: bool,
    pub seed: u64,
}

pub fn run_all(opts: &ValidateOptions) -> Vec<SuiteReport> {
    vec![
        collectives_suite(opts),
        scheduler_suite(opts),
        layer_suite(opts),
        backends_suite(opts),
    ]
}

pub fn uniform_inputs(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..len).map(|_| rng.gen_range(-1.0f32..=1.0)).collect())
        .collect()
}

/// Runs one collective on every runtime (one thread per rank).
pub fn runtime_collective(
    runtimes: &[Runtime],
    kind: CollectiveKind,
    inputs: &[Vec<f32>],
    op: ReduceOp,
) -> Result<Vec<Completion>, SchedulerError> {
    let n = runtimes.len();
    std::thread::scope(|s| {
        let hs: Vec<_> = runtimes
            .iter()
            .zip(inputs)
            .enumerate()
            .map(|(r, (rt, input))| {
                s.spawn(move || {
                    let g = CommGroup::world(n, r).map_err(SchedulerError::from)?;
                    let h = rt.submit(kind, input.clone(), &g, op, Priority::bulk())?;
                    rt.wait(h)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("rank thread panicked")).collect()
    })
}

/// A loopback socket mesh of `n` ranks on ephemeral ports, one runtime each.
pub fn socket_runtimes(n: usize, cfg: &RuntimeConfig) -> Result<Vec<Runtime>, TransportError> {
    let listeners: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<_, _>>()?;
    let eps: Vec<String> = listeners
        .iter()
        .map(|l| l.local_addr().map(|a| a.to_string()))
        .collect::<Result<_, _>>()?;
    let transports: Vec<Result<_, TransportError>> = std::thread::scope(|s| {
        let hs: Vec<_> = listeners
            .into_iter()
            .enumerate()
            .map(|(r, l)| {
                let eps = &eps;
                s.spawn(move || connect_mesh(r, eps, Some(l), Duration::from_secs(20)))
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("connect thread panicked")).collect()
    });
    transports
        .into_iter()
        .map(|t| t.map(|t| Runtime::start(Box::new(t), cfg.clone())))
        .collect()
}

/// Expected per-member results of a collective, computed directly.
pub fn reference_outputs(kind: CollectiveKind, inputs: &[Vec<f32>], op: ReduceOp) -> Vec<Vec<f32>> {
    let n = inputs.len();
    match kind {
        CollectiveKind::Allreduce => vec![allreduce_oracle(inputs, op).expect("equal lengths"); n],
        CollectiveKind::ReduceScatter => {
            let full = allreduce_oracle(inputs, op).expect("equal lengths");
            let layout = crate::collectives::RingLayout::new(kind, n, full.len(), full.len().max(1));
            (0..n).map(|m| full[layout.owned_range(m)].to_vec()).collect()
        }
        CollectiveKind::Allgather => {
            let len = inputs[0].len();
            let layout = crate::collectives::RingLayout::new(kind, n, len, len.max(1));
            let mut out = vec![0.0f32; len];
            for (m, inp) in inputs.iter().enumerate() {
                let r = layout.owned_range(m);
                out[r.clone()].copy_from_slice(&inp[r]);
            }
            vec![out; n]
        }
        CollectiveKind::Broadcast => vec![inputs[0].clone(); n],
        CollectiveKind::Barrier => vec![Vec::new(); n],
    }
}

pub fn collectives_suite(opts: &ValidateOptions) -> SuiteReport {
    let mut rep = SuiteReport::new("collectives");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut worst = 0.0f64;
    let mut chunk_ok = true;
    for &n in &RING_SIZES {
        for &len in &LENGTHS {
            let inputs = uniform_inputs(&mut rng, n, len);
            let oracle = allreduce_oracle(&inputs, ReduceOp::Sum).expect("equal lengths");
            let runs: Vec<Vec<Vec<f32>>> = [1024, 64 * 1024, len * 4]
                .iter()
                .map(|&cb| {
                    exchange_in_memory(CollectiveKind::Allreduce, inputs.clone(), ReduceOp::Sum, Precision::Fp32, cb)
                        .expect("valid inputs")
                        .outputs
                })
                .collect();
            chunk_ok &= runs.iter().all(|r| r == &runs[0]);
            for o in &runs[0] {
                worst = worst.max(max_relative_error(o, &oracle));
            }
        }
    }
    rep.check("in-memory ring vs oracle", worst <= FP32_TOLERANCE, format!("max relative error {worst:e}"));
    rep.check("chunk-size independence", chunk_ok, "1 KiB / 64 KiB / whole buffer");

    let mut worst = 0.0f64;
    let mut first_bad = None;
    for &n in &RING_SIZES {
        for &len in &LENGTHS {
            let inputs = uniform_inputs(&mut rng, n, len);
            let oracle = allreduce_oracle(&inputs, ReduceOp::Sum).expect("equal lengths");
            let mut cfg = ScenarioConfig::new(n, 5e-6, 1.25e9);
            cfg.chunk_bytes = 64;
            if opts.inject_fault && n > 1 {
                cfg.fault = Some(Fault {
                    request: 0,
                    member: 0,
                    transfer_index: 0,
                    byte: 1,
                });
            }
            let req = ScenarioRequest::new(CollectiveKind::Allreduce, (0..n).collect(), inputs, Priority::bulk(), 0.0);
            let res = run_scenario(&cfg, &[req]).expect("valid scenario");
            for o in &res.outputs[0] {
                let e = max_relative_error(o, &oracle);
                if !(e <= FP32_TOLERANCE) && first_bad.is_none() {
                    first_bad = Some((n, len, e));
                }
                worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
            }
        }
    }
    rep.check(
        "simulated ring vs oracle",
        first_bad.is_none(),
        match first_bad {
            None => format!("max relative error {worst:e}"),
            Some((n, len, e)) => format!("n={n} len={len} relative error {e:e}"),
        },
    );

    let mut bound_ok = true;
    let mut detail = String::new();
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(seed));
        let n = r.gen_range(2..=8);
        let inputs = uniform_inputs(&mut r, n, 1000);
        let oracle = allreduce_oracle(&inputs, ReduceOp::Sum).expect("equal lengths");
        let out = exchange_in_memory(CollectiveKind::Allreduce, inputs, ReduceOp::Sum, Precision::Int8, 1024)
            .expect("finite inputs");
        let bound = n as f64 * out.max_partial_abs as f64 / 127.0;
        let err = out
            .outputs
            .iter()
            .map(|o| crate::collectives::max_abs_error(o, &oracle))
            .fold(0.0, f64::max);
        if err > bound {
            bound_ok = false;
            detail = format!("seed {seed}: error {err:e} > bound {bound:e}");
        }
    }
    rep.check("int8 error bound", bound_ok, if bound_ok { "20 seeds within n*R/127".into() } else { detail });

    let mut kinds_ok = true;
    for kind in [CollectiveKind::ReduceScatter, CollectiveKind::Allgather, CollectiveKind::Broadcast, CollectiveKind::Barrier] {
        for &n in &[1usize, 3, 4] {
            let inputs = if kind == CollectiveKind::Barrier {
                vec![Vec::new(); n]
            } else {
                uniform_inputs(&mut rng, n, 37)
            };
            let out = exchange_in_memory(kind, inputs.clone(), ReduceOp::Sum, Precision::Fp32, 16).expect("valid");
            let want = reference_outputs(kind, &inputs, ReduceOp::Sum);
            kinds_ok &= out
                .outputs
                .iter()
                .zip(&want)
                .all(|(o, w)| o.len() == w.len() && max_relative_error(o, w) <= FP32_TOLERANCE);
        }
    }
    rep.check("other collectives vs references", kinds_ok, "reduce-scatter, allgather, broadcast, barrier");
    rep
}

fn chunk_time(cfg: &ScenarioConfig) -> f64 {
    cfg.link.alpha + cfg.chunk_bytes as f64 / cfg.link.beta
}

pub fn scheduler_suite(opts: &ValidateOptions) -> SuiteReport {
    let mut rep = SuiteReport::new("scheduler");
    let mut cfg = ScenarioConfig::new(2, 1e-6, 1e9);
    cfg.chunk_bytes = 1024;
    cfg.capture_trace = true;
    let ct = chunk_time(&cfg);
    let per_chunk = cfg.chunk_bytes / 4;

    let a = ScenarioRequest::new(CollectiveKind::Allreduce, vec![0, 1], vec![vec![1.0; per_chunk * 8]; 2], Priority::bulk(), 0.0);
    let b = ScenarioRequest::new(CollectiveKind::Allreduce, vec![0, 1], vec![vec![2.0; per_chunk * 8]; 2], Priority::bulk(), 0.0);
    let res = run_scenario(&cfg, &[a, b]).expect("valid");
    rep.check("equal priority is FIFO", res.done_at[0][0] < res.done_at[1][0], format!("{:?}", res.done_at));

    let late = ScenarioRequest::new(
        CollectiveKind::Allreduce,
        vec![0, 1],
        vec![vec![1.0; per_chunk * 2]; 2],
        Priority::weight_gradient(0),
        ct * 2.5,
    );
    let early = ScenarioRequest::new(CollectiveKind::Allreduce, vec![0, 1], vec![vec![1.0; per_chunk * 40]; 2], Priority::weight_gradient(12), 0.0);
    let res = run_scenario(&cfg, &[early, late]).expect("valid");
    rep.check("layer 0 overtakes layer 12", res.done_at[1][0] < res.done_at[0][0], format!("{:?}", res.done_at));

    // Bulk transfer of 100 chunks per member, then a 2-chunk activation.
    let mut lat_ok = true;
    let mut eq_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..10 {
        let bulk_in = uniform_inputs(&mut rng, 2, per_chunk * 100);
        let act_in = uniform_inputs(&mut rng, 2, per_chunk * 2);
        let at = rng.gen_range(0.0..ct * 50.0);
        let reqs = [
            ScenarioRequest::new(CollectiveKind::Allreduce, vec![0, 1], bulk_in.clone(), Priority::bulk(), 0.0),
            ScenarioRequest::new(CollectiveKind::Allreduce, vec![0, 1], act_in.clone(), Priority::new(TrafficClass::Activation, 0), at),
        ];
        let res = run_scenario(&cfg, &reqs).expect("valid");
        let done = res.done_at[1].iter().cloned().fold(0.0, f64::max);
        lat_ok &= done - at <= 3.0 * ct * (1.0 + 1e-9);
        let solo = run_scenario(&cfg, &reqs[..1]).expect("valid");
        eq_ok &= solo.outputs[0] == res.outputs[0];
    }
    rep.check("activation done within 3 chunk times", lat_ok, format!("chunk time {ct:e} s"));
    rep.check("preempted result bit-identical", eq_ok, "10 random interleavings");

    let rts = Runtime::local_mesh(
        2,
        RuntimeConfig {
            chunk_bytes: 256,
            ..RuntimeConfig::default()
        },
    );
    let handles: Vec<_> = rts
        .iter()
        .enumerate()
        .map(|(r, rt)| {
            let g = CommGroup::world(2, r).expect("valid group");
            rt.submit(CollectiveKind::Allreduce, vec![1.0; 1000], &g, ReduceOp::Sum, Priority::bulk())
                .expect("running")
        })
        .collect();
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    let mut reached = false;
    while std::time::Instant::now() < deadline {
        if rts.iter().zip(&handles).all(|(rt, h)| rt.state(h) == Some(RequestState::Done)) {
            reached = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(1));
    }
    rep.check("progress without waiters", reached, "polled state only");

    let reports: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = rts
            .iter()
            .enumerate()
            .map(|(r, rt)| {
                s.spawn(move || {
                    let g = CommGroup::world(2, r).expect("valid group");
                    for i in 0..3 {
                        rt.submit(CollectiveKind::Allreduce, vec![i as f32; 500], &g, ReduceOp::Sum, Priority::bulk())
                            .expect("running");
                    }
                    rt.shutdown(true)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("rank panicked")).collect()
    });
    let drained = reports
        .iter()
        .all(|r| matches!(r, Ok(rep) if rep.completed.len() >= 3 && rep.aborted.is_empty()));
    rep.check("drain completes pending requests", drained, format!("{reports:?}"));
    rep
}

pub fn layer_suite(_opts: &ValidateOptions) -> SuiteReport {
    let mut rep = SuiteReport::new("layer-api");
    let d = Distribution::new(8, 2, 5).expect("valid");
    rep.check(
        "group construction",
        d.model_group().ranks() == [4, 5] && d.data_peers().ranks() == [1, 3, 5, 7],
        "P=8 g=2 rank 5",
    );

    // Hybrid consistency: g-sharded allreduce over data peers equals the
    // full allreduce, shard by shard.
    let (p, g) = (8usize, 2usize);
    let layer = LayerDescriptor::fully_connected(0, "fc", 16, 8, true);
    let params = layer.param_count as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let full: Vec<Vec<f32>> = uniform_inputs(&mut rng, p, params);
    let rts = Runtime::local_mesh(p, RuntimeConfig::default());
    let shards: Vec<Result<Vec<f32>, String>> = std::thread::scope(|s| {
        let hs: Vec<_> = rts
            .iter()
            .enumerate()
            .map(|(r, rt)| {
                let (layer, full) = (&layer, &full);
                s.spawn(move || {
                    let d = Distribution::new(p, g, r).map_err(|e| e.to_string())?;
                    let mut sess = LayerSession::create(layer, &d, rt).map_err(|e| e.to_string())?;
                    let shard = sess.shard_params();
                    let me = d.model_group().my_index();
                    // Data peers of shard `me` contribute their copy of that shard.
                    let partial = full[r][me * shard..(me + 1) * shard].to_vec();
                    sess.backward_wgrad_begin(partial).map_err(|e| e.to_string())?;
                    sess.wgrad_wait().map_err(|e| e.to_string())
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("rank panicked")).collect()
    });
    let mut hybrid_ok = true;
    let mut detail = String::from("P=8 g=2");
    for peer in 0..g {
        let members: Vec<usize> = (0..p / g).map(|k| peer + k * g).collect();
        let shard = params / g;
        let ins: Vec<Vec<f32>> = members
            .iter()
            .map(|&r| full[r][peer * shard..(peer + 1) * shard].to_vec())
            .collect();
        let want = allreduce_oracle(&ins, ReduceOp::Sum).expect("equal lengths");
        for &r in &members {
            match &shards[r] {
                Ok(got) if max_relative_error(got, &want) <= FP32_TOLERANCE => {}
                Ok(got) => {
                    hybrid_ok = false;
                    detail = format!("rank {r}: error {:e}", max_relative_error(got, &want));
                }
                Err(e) => {
                    hybrid_ok = false;
                    detail = format!("rank {r}: {e}");
                }
            }
        }
    }
    rep.check("hybrid shard consistency", hybrid_ok, detail);

    // Endpoint degeneracy through the simulator's byte counts.
    let prof = tiny_profile();
    let c = ClusterConfig::ethernet_10g(4);
    let mut ok = true;
    for g in [1usize, 4] {
        let plan = ParallelismPlan::uniform(&prof, g);
        let m = sim_run(&prof, &plan, &c, 8, 2, 0, &SimOptions::default()).expect("valid run");
        for info in &m.requests {
            use crate::backends::sim::Phase;
            let act = matches!(info.phase, Phase::ActivationForward | Phase::ActivationBackward);
            if (g == 1 && act) || (g == 4 && !act) {
                ok = false;
            }
        }
    }
    rep.check("endpoint degeneracy", ok, "g=1 moves no activations, g=P no weight gradients");
    rep
}

/// Small two-layer profile used by self-checks.
pub fn tiny_profile() -> ModelProfile {
    ModelProfile::new(
        "tiny",
        8,
        vec![
            LayerDescriptor::conv(0, "conv", 4, 8, (3, 3), (8, 8), 1, true),
            LayerDescriptor::non_param(1, "relu", 8, (8, 8), (1, 1), 1),
            LayerDescriptor::fully_connected(2, "fc", 512, 16, true),
        ],
    )
    .expect("valid profile")
}

pub fn backends_suite(opts: &ValidateOptions) -> SuiteReport {
    let mut rep = SuiteReport::new("backends");
    let h = WireHeader::chunk(7, 1, 2, Precision::Fp32, 65536).encode();
    rep.check(
        "wire header layout",
        h.len() == 27 && &h[0..4] == b"GSYN" && h[4] == 1 && h[23..27] == 65536u32.to_le_bytes(),
        "27 bytes, little-endian",
    );

    let c = ClusterConfig::ethernet_10g(4);
    let elems = 4096;
    let mut cfg = ScenarioConfig::new(4, c.alpha, c.beta);
    cfg.chunk_bytes = elems;
    let req = ScenarioRequest::new(CollectiveKind::Allreduce, (0..4).collect(), vec![vec![1.0; elems]; 4], Priority::bulk(), 0.0);
    let res = run_scenario(&cfg, &[req]).expect("valid");
    let sim_t = res.done_at[0].iter().cloned().fold(0.0, f64::max);
    let est = estimate_collective_time(CollectiveKind::Allreduce, (elems * 4) as f64, 4, &c);
    let rel = ((sim_t - est) / est).abs();
    rep.check("uncontended allreduce time", rel <= 1e-9, format!("relative deviation {rel:e}"));

    let prof = tiny_profile();
    let mut conserved = true;
    let mut detail = String::new();
    for g in [1usize, 2, 4] {
        let plan = ParallelismPlan::uniform(&prof, g);
        let m = sim_run(&prof, &plan, &c, 8, 2, 0, &SimOptions::default()).expect("valid run");
        let want: f64 = prof
            .layers
            .iter()
            .map(|l| comm_volume(l, StrategyChoice::new(g), &c, 8).expect("shardable").total() * c.world as f64)
            .sum();
        if (want.round() as u64) != m.wire_bytes_per_iteration {
            conserved = false;
            detail = format!("g={g}: simulated {} vs model {want}", m.wire_bytes_per_iteration);
        }
    }
    rep.check("byte conservation", conserved, if conserved { "g in {1,2,4}".into() } else { detail });

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sock = (|| -> Result<f64, String> {
        let rts = socket_runtimes(3, &RuntimeConfig { chunk_bytes: 1024, ..RuntimeConfig::default() }).map_err(|e| e.to_string())?;
        let inputs = uniform_inputs(&mut rng, 3, 1000);
        let oracle = allreduce_oracle(&inputs, ReduceOp::Sum).map_err(|e| e.to_string())?;
        let outs = runtime_collective(&rts, CollectiveKind::Allreduce, &inputs, ReduceOp::Sum).map_err(|e| e.to_string())?;
        Ok(outs.iter().map(|o| max_relative_error(&o.buffer, &oracle)).fold(0.0, f64::max))
    })();
    match sock {
        Ok(e) => rep.check("socket allreduce vs oracle", e <= FP32_TOLERANCE, format!("3 ranks, relative error {e:e}")),
        Err(e) => rep.check("socket allreduce vs oracle", false, e),
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for s in run_all(&ValidateOptions::default()) {
            assert!(s.passed(), "{}", s.verdict());
        }
    }

    #[test]
    fn injected_fault_fails_collectives_only_there() {
        let r = collectives_suite(&ValidateOptions {
            inject_fault: true,
            seed: 0,
        });
        assert!(!r.passed());
        assert!(r.verdict().starts_with("collectives: FAIL (simulated ring vs oracle"), "{}", r.verdict());
    }
}
