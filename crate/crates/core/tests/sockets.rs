use gsync::backends::sim::{run_scenario, ScenarioConfig, ScenarioRequest};
use gsync::collectives::{allreduce_oracle, max_relative_error, CollectiveKind, CommGroup, ReduceOp};
use gsync::profile::Precision;
use gsync::scheduler::{Priority, Runtime, RuntimeConfig};
use gsync::validate::{reference_outputs, runtime_collective, socket_runtimes, uniform_inputs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Req {
    kind: CollectiveKind,
    ranks: Vec<usize>,
    len: usize,
    prio: Priority,
}

// Every rank submits its share of `reqs` in order, then waits on all of them.
fn run_on_sockets(rts: &[Runtime], reqs: &[Req], inputs: &[Vec<Vec<f32>>]) -> Vec<Vec<Vec<f32>>> {
    let per_rank: Vec<Vec<(usize, Vec<f32>)>> = std::thread::scope(|s| {
        let hs: Vec<_> = rts
            .iter()
            .enumerate()
            .map(|(r, rt)| {
                s.spawn(move || {
                    let mut hs = Vec::new();
                    for (i, q) in reqs.iter().enumerate() {
                        let Some(m) = q.ranks.iter().position(|&x| x == r) else { continue };
                        let g = CommGroup::new(q.ranks.clone(), r).unwrap();
                        hs.push((i, rt.submit(q.kind, inputs[i][m].clone(), &g, ReduceOp::Sum, q.prio).unwrap()));
                    }
                    hs.into_iter().map(|(i, h)| (i, rt.wait(h).unwrap().buffer)).collect::<Vec<_>>()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut out: Vec<Vec<Vec<f32>>> = reqs.iter().map(|q| vec![Vec::new(); q.ranks.len()]).collect();
    for (r, results) in per_rank.into_iter().enumerate() {
        for (i, buf) in results {
            let m = reqs[i].ranks.iter().position(|&x| x == r).unwrap();
            out[i][m] = buf;
        }
    }
    out
}

fn run_on_sim(world: usize, chunk_bytes: usize, wire: Precision, reqs: &[Req], inputs: &[Vec<Vec<f32>>]) -> Vec<Vec<Vec<f32>>> {
    let mut cfg = ScenarioConfig::new(world, 5e-6, 1.25e9);
    cfg.chunk_bytes = chunk_bytes;
    cfg.wire = wire;
    let sreqs: Vec<ScenarioRequest> = reqs
        .iter()
        .zip(inputs)
        .enumerate()
        .map(|(i, (q, inp))| ScenarioRequest::new(q.kind, q.ranks.clone(), inp.clone(), q.prio, i as f64 * 1e-6))
        .collect();
    run_scenario(&cfg, &sreqs).unwrap().outputs
}

fn bits(v: &[Vec<Vec<f32>>]) -> Vec<Vec<Vec<u32>>> {
    v.iter().map(|r| r.iter().map(|m| m.iter().map(|x| x.to_bits()).collect()).collect()).collect()
}

fn workload(world: usize, rng: &mut ChaCha8Rng) -> (Vec<Req>, Vec<Vec<Vec<f32>>>) {
    let all: Vec<usize> = (0..world).collect();
    let mut reqs = vec![
        Req { kind: CollectiveKind::Allreduce, ranks: all.clone(), len: 5000, prio: Priority::bulk() },
        Req { kind: CollectiveKind::Allreduce, ranks: all.clone(), len: 1234, prio: Priority::weight_gradient(7) },
        Req { kind: CollectiveKind::Allreduce, ranks: all.clone(), len: 77, prio: Priority::activation(2) },
        Req { kind: CollectiveKind::ReduceScatter, ranks: all.clone(), len: 40 * world, prio: Priority::weight_gradient(1) },
        Req { kind: CollectiveKind::Allgather, ranks: all.clone(), len: 3 * world + 1, prio: Priority::activation(0) },
    ];
    if world >= 3 {
        reqs.push(Req { kind: CollectiveKind::Allreduce, ranks: vec![0, world - 1], len: 900, prio: Priority::activation(5) });
    }
    let inputs = reqs.iter().map(|q| uniform_inputs(rng, q.ranks.len(), q.len)).collect();
    (reqs, inputs)
}

#[test]
fn socket_matches_simulator_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for world in [2usize, 3, 4] {
        for wire in [Precision::Fp32, Precision::Int8] {
            let chunk = 1024;
            let (reqs, inputs) = workload(world, &mut rng);
            let cfg = RuntimeConfig { chunk_bytes: chunk, wire, ..RuntimeConfig::default() };
            let rts = socket_runtimes(world, &cfg).unwrap();
            let sock = run_on_sockets(&rts, &reqs, &inputs);
            let sim = run_on_sim(world, chunk, wire, &reqs, &inputs);
            assert_eq!(bits(&sock), bits(&sim), "P={world} wire={wire:?}");
            for rt in &rts {
                assert!(rt.shutdown(true).unwrap().aborted.is_empty());
            }
        }
    }
}

#[test]
fn four_rank_allreduce_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rts = socket_runtimes(4, &RuntimeConfig { chunk_bytes: 4096, ..RuntimeConfig::default() }).unwrap();
    for len in [1usize, 7, 64, 1000, 100_000] {
        let inputs = uniform_inputs(&mut rng, 4, len);
        let want = allreduce_oracle(&inputs, ReduceOp::Sum).unwrap();
        for c in runtime_collective(&rts, CollectiveKind::Allreduce, &inputs, ReduceOp::Sum).unwrap() {
            assert!(max_relative_error(&c.buffer, &want) <= 1e-6, "len {len}");
        }
    }
    for kind in [CollectiveKind::ReduceScatter, CollectiveKind::Allgather, CollectiveKind::Broadcast] {
        let inputs = uniform_inputs(&mut rng, 4, 103);
        let want = reference_outputs(kind, &inputs, ReduceOp::Sum);
        let got = runtime_collective(&rts, kind, &inputs, ReduceOp::Sum).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!(max_relative_error(&g.buffer, w) <= 1e-6, "{kind:?}");
        }
    }
}

#[test]
fn socket_bytes_match_ring_volume() {
    let n = 3;
    let len = 3000;
    let rts = socket_runtimes(n, &RuntimeConfig { chunk_bytes: 1 << 20, ..RuntimeConfig::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = uniform_inputs(&mut rng, n, len);
    runtime_collective(&rts, CollectiveKind::Allreduce, &inputs, ReduceOp::Sum).unwrap();
    let payload: u64 = rts.iter().map(|r| r.payload_bytes_sent()).sum();
    assert_eq!(payload, (2 * (n - 1) * len * 4) as u64);
}
