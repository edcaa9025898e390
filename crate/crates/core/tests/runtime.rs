use std::time::Duration;

use gsync::backends::wire::WireHeader;
use gsync::backends::{Frame, LocalTransport, Transport, TransportError};
use gsync::collectives::{allreduce_oracle, max_relative_error, CollectiveKind, CommGroup, ReduceOp};
use gsync::scheduler::*;
use gsync::trace::{TraceEvent, TraceKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn manual(chunk_bytes: usize) -> RuntimeConfig {
    RuntimeConfig {
        progress_engines: 0,
        chunk_bytes,
        capture_trace: true,
        ..RuntimeConfig::default()
    }
}

fn drive(rts: &[Runtime], until: impl Fn() -> bool) {
    for _ in 0..1_000_000 {
        if until() {
            return;
        }
        for rt in rts {
            rt.progress_step();
        }
    }
    panic!("no progress");
}

fn chunk_starts(trace: &[TraceEvent]) -> Vec<u64> {
    trace.iter().filter(|e| e.kind == TraceKind::ChunkStart).map(|e| e.request_id).collect()
}

#[test]
fn singleton_group_completes_unchanged() {
    let rt = Runtime::local_mesh(1, RuntimeConfig::default()).pop().unwrap();
    let h = rt.submit(CollectiveKind::Allreduce, vec![1.0, 2.0], &CommGroup::singleton(0), ReduceOp::Sum, Priority::bulk()).unwrap();
    let c = rt.wait(h).unwrap();
    assert_eq!(c.state, RequestState::Done);
    assert_eq!(c.buffer, vec![1.0, 2.0]);
    assert!(matches!(rt.test(&h), Err(SchedulerError::InvalidHandle(_))));
}

#[test]
fn empty_buffer_and_bad_group_rejected() {
    let rts = Runtime::local_mesh(2, manual(64));
    let g = CommGroup::world(2, 0).unwrap();
    assert!(matches!(
        rts[0].submit(CollectiveKind::Allreduce, vec![], &g, ReduceOp::Sum, Priority::bulk()),
        Err(SchedulerError::EmptyBuffer(_))
    ));
    let other = CommGroup::world(2, 1).unwrap();
    assert!(matches!(
        rts[0].submit(CollectiveKind::Allreduce, vec![1.0], &other, ReduceOp::Sum, Priority::bulk()),
        Err(SchedulerError::InvalidGroup(_))
    ));
    let big = CommGroup::world(3, 0).unwrap();
    assert!(rts[0].submit(CollectiveKind::Allreduce, vec![1.0], &big, ReduceOp::Sum, Priority::bulk()).is_err());
    // Barrier takes no buffer.
    assert!(rts[0].submit(CollectiveKind::Barrier, vec![], &g, ReduceOp::Sum, Priority::bulk()).is_ok());
}

#[test]
fn test_is_false_before_progress() {
    let rts = Runtime::local_mesh(2, manual(64));
    let h = rts[0].submit(CollectiveKind::Allreduce, vec![1.0; 100], &CommGroup::world(2, 0).unwrap(), ReduceOp::Sum, Priority::bulk()).unwrap();
    assert!(!rts[0].test(&h).unwrap());
    assert_eq!(rts[0].state(&h), Some(RequestState::Queued));
    assert_eq!(rts[0].progress_of(&h).map(|p| p.0), Some(0));
}

#[test]
fn no_pending_means_no_progress() {
    let rts = Runtime::local_mesh(2, manual(64));
    assert!(!rts[0].progress_step());
}

#[test]
fn equal_priority_is_fifo() {
    let rts = Runtime::local_mesh(2, manual(256));
    let hs: Vec<Vec<Handle>> = (0..2)
        .map(|r| {
            let g = CommGroup::world(2, r).unwrap();
            (0..3)
                .map(|i| rts[r].submit(CollectiveKind::Allreduce, vec![i as f32; 640], &g, ReduceOp::Sum, Priority::weight_gradient(5)).unwrap())
                .collect()
        })
        .collect();
    drive(&rts, || hs.iter().zip(&rts).all(|(h, rt)| h.iter().all(|h| rt.test(h).unwrap())));
    for rt in &rts {
        let done: Vec<u64> = rt.trace().iter().filter(|e| e.kind == TraceKind::Done).map(|e| e.request_id).collect();
        let mut sorted = done.clone();
        sorted.sort_unstable();
        assert_eq!(done, sorted);
        // Strict FIFO: each request's chunks all go before the next one's.
        let starts = chunk_starts(&rt.trace());
        assert!(starts.windows(2).all(|w| w[0] <= w[1]), "{starts:?}");
    }
}

#[test]
fn first_layer_overtakes_late_layer() {
    let rts = Runtime::local_mesh(2, manual(256));
    let late: Vec<Handle> = (0..2)
        .map(|r| rts[r].submit(CollectiveKind::Allreduce, vec![1.0; 64 * 100], &CommGroup::world(2, r).unwrap(), ReduceOp::Sum, Priority::weight_gradient(12)).unwrap())
        .collect();
    for _ in 0..5 {
        for rt in &rts {
            rt.progress_step();
        }
    }
    assert!(late.iter().zip(&rts).all(|(h, rt)| rt.state(h) == Some(RequestState::InFlight)));
    let early: Vec<Handle> = (0..2)
        .map(|r| rts[r].submit(CollectiveKind::Allreduce, vec![2.0; 64 * 4], &CommGroup::world(2, r).unwrap(), ReduceOp::Sum, Priority::weight_gradient(0)).unwrap())
        .collect();
    drive(&rts, || early.iter().zip(&rts).all(|(h, rt)| rt.test(h).unwrap()));
    assert!(late.iter().zip(&rts).all(|(h, rt)| !rt.test(h).unwrap()));
    let trace = rts[0].trace();
    let sub = trace.iter().position(|e| e.kind == TraceKind::Submit && e.request_id == early[0].id()).unwrap();
    // After the submit, the next chunk on the link belongs to layer 0.
    let next = trace[sub..].iter().find(|e| e.kind == TraceKind::ChunkStart).unwrap();
    assert_eq!(next.request_id, early[0].id());
    assert!(trace.iter().any(|e| e.kind == TraceKind::Preempt && e.request_id == late[0].id()));
    drive(&rts, || late.iter().zip(&rts).all(|(h, rt)| rt.test(h).unwrap()));
    for (h, rt) in late.into_iter().zip(&rts) {
        assert_eq!(rt.wait(h).unwrap().buffer, vec![2.0; 6400]);
    }
}

#[test]
fn wait_promotes_over_earlier_equal_priority() {
    let rts = Runtime::local_mesh(2, manual(256));
    let sub = |r: usize, v: f32| {
        rts[r].submit(CollectiveKind::Allreduce, vec![v; 64 * 50], &CommGroup::world(2, r).unwrap(), ReduceOp::Sum, Priority::bulk()).unwrap()
    };
    let first = [sub(0, 1.0), sub(1, 1.0)];
    let second = [sub(0, 2.0), sub(1, 2.0)];
    // Both ranks wait on the second request; their waits drive progress.
    std::thread::scope(|s| {
        for r in 0..2 {
            let rt = &rts[r];
            let h = second[r];
            s.spawn(move || rt.wait(h).unwrap());
        }
    });
    for r in 0..2 {
        assert!(!rts[r].test(&first[r]).unwrap(), "earlier request finished first on rank {r}");
        assert!(rts[r].trace().iter().any(|e| e.kind == TraceKind::Promote));
    }
    drive(&rts, || first.iter().zip(&rts).all(|(h, rt)| rt.test(h).unwrap()));
}

#[test]
fn preempted_results_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let bulk: Vec<Vec<f32>> = (0..3).map(|_| (0..5000).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let urgent: Vec<Vec<f32>> = (0..3).map(|_| (0..300).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let delay = rng.gen_range(0..40);
        let run = |interrupt: bool| {
            let rts = Runtime::local_mesh(3, manual(512));
            let hb: Vec<Handle> = (0..3)
                .map(|r| rts[r].submit(CollectiveKind::Allreduce, bulk[r].clone(), &CommGroup::world(3, r).unwrap(), ReduceOp::Sum, Priority::bulk()).unwrap())
                .collect();
            let mut hu = Vec::new();
            if interrupt {
                for _ in 0..delay {
                    for rt in &rts {
                        rt.progress_step();
                    }
                }
                hu = (0..3)
                    .map(|r| rts[r].submit(CollectiveKind::Allreduce, urgent[r].clone(), &CommGroup::world(3, r).unwrap(), ReduceOp::Sum, Priority::activation(0)).unwrap())
                    .collect();
            }
            drive(&rts, || hb.iter().chain(&hu).zip(rts.iter().cycle()).all(|(h, rt)| rt.test(h).unwrap()));
            let out: Vec<Vec<f32>> = hb.into_iter().zip(&rts).map(|(h, rt)| rt.wait(h).unwrap().buffer).collect();
            let want = allreduce_oracle(&urgent, ReduceOp::Sum).unwrap();
            for (h, rt) in hu.into_iter().zip(&rts) {
                assert!(max_relative_error(&rt.wait(h).unwrap().buffer, &want) <= 1e-6);
            }
            out
        };
        assert_eq!(run(true), run(false));
    }
}

#[test]
fn progress_engine_runs_without_waiters() {
    let rts = Runtime::local_mesh(4, RuntimeConfig::default());
    let hs: Vec<Handle> = (0..4)
        .map(|r| rts[r].submit(CollectiveKind::Allreduce, vec![r as f32; 10_000], &CommGroup::world(4, r).unwrap(), ReduceOp::Sum, Priority::bulk()).unwrap())
        .collect();
    let deadline = std::time::Instant::now() + Duration::from_secs(20);
    while !hs.iter().zip(&rts).all(|(h, rt)| rt.state(h) == Some(RequestState::Done)) {
        assert!(std::time::Instant::now() < deadline, "engine did not finish");
        std::thread::sleep(Duration::from_millis(1));
    }
    for (h, rt) in hs.into_iter().zip(&rts) {
        assert_eq!(rt.wait(h).unwrap().buffer, vec![6.0; 10_000]);
    }
}

#[test]
fn concurrent_waiters_on_one_runtime() {
    let rts = Runtime::local_mesh(3, RuntimeConfig { progress_engines: 2, chunk_bytes: 1024, ..RuntimeConfig::default() });
    std::thread::scope(|s| {
        for (r, rt) in rts.iter().enumerate() {
            s.spawn(move || {
                let g = CommGroup::world(3, r).unwrap();
                let hs: Vec<Handle> = (0..8)
                    .map(|i| rt.submit(CollectiveKind::Allreduce, vec![i as f32; 2000 + i * 37], &g, ReduceOp::Sum, Priority::weight_gradient(i)).unwrap())
                    .collect();
                std::thread::scope(|inner| {
                    for (i, h) in hs.into_iter().enumerate() {
                        inner.spawn(move || {
                            let c = rt.wait(h).unwrap();
                            assert_eq!(c.buffer, vec![3.0 * i as f32; 2000 + i * 37]);
                        });
                    }
                });
            });
        }
    });
}

#[test]
fn shutdown_reports() {
    let rts = Runtime::local_mesh(2, RuntimeConfig::default());
    assert_eq!(rts[0].shutdown(true).unwrap(), DrainReport::default());

    let rts = Runtime::local_mesh(2, RuntimeConfig::default());
    let reports: Vec<DrainReport> = std::thread::scope(|s| {
        let hs: Vec<_> = rts
            .iter()
            .enumerate()
            .map(|(r, rt)| {
                s.spawn(move || {
                    let g = CommGroup::world(2, r).unwrap();
                    for i in 0..3 {
                        rt.submit(CollectiveKind::Allreduce, vec![i as f32; 5000], &g, ReduceOp::Sum, Priority::bulk()).unwrap();
                    }
                    rt.shutdown(true).unwrap()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for rep in &reports {
        assert_eq!(rep.completed.len(), 3);
        assert!(rep.aborted.is_empty());
    }

    let rts = Runtime::local_mesh(2, manual(64));
    let g = CommGroup::world(2, 0).unwrap();
    let ids: Vec<u64> = (0..3)
        .map(|_| rts[0].submit(CollectiveKind::Allreduce, vec![1.0; 100], &g, ReduceOp::Sum, Priority::bulk()).unwrap().id())
        .collect();
    let rep = rts[0].shutdown(false).unwrap();
    assert_eq!(rep.aborted, ids);
    assert!(rep.completed.is_empty());
    assert!(matches!(
        rts[0].submit(CollectiveKind::Allreduce, vec![1.0], &g, ReduceOp::Sum, Priority::bulk()),
        Err(SchedulerError::NotStarted)
    ));
}

#[test]
fn drain_timeout_when_peer_never_participates() {
    let rts = Runtime::local_mesh(2, RuntimeConfig { drain_timeout: Duration::from_millis(100), ..RuntimeConfig::default() });
    rts[0].submit(CollectiveKind::Allreduce, vec![1.0; 100], &CommGroup::world(2, 0).unwrap(), ReduceOp::Sum, Priority::bulk()).unwrap();
    assert!(matches!(rts[0].shutdown(true), Err(SchedulerError::DrainTimeout { pending }) if pending.len() == 1));
}

struct Broken {
    inner: LocalTransport,
}

impl Transport for Broken {
    fn rank(&self) -> usize {
        self.inner.rank()
    }
    fn world_size(&self) -> usize {
        self.inner.world_size()
    }
    fn send(&mut self, to: usize, _: &WireHeader, _: &[u8]) -> Result<(), TransportError> {
        Err(TransportError::PeerClosed { peer: to })
    }
    fn try_recv(&mut self) -> Result<Option<Frame>, TransportError> {
        self.inner.try_recv()
    }
    fn bytes_sent(&self) -> u64 {
        0
    }
}

#[test]
fn transport_failure_fails_everything() {
    let mut mesh = LocalTransport::mesh(2);
    mesh.pop();
    let rt = Runtime::start(Box::new(Broken { inner: mesh.pop().unwrap() }), RuntimeConfig::default());
    let g = CommGroup::world(2, 0).unwrap();
    let a = rt.submit(CollectiveKind::Allreduce, vec![1.0; 100], &g, ReduceOp::Sum, Priority::bulk()).unwrap();
    let b = rt.submit(CollectiveKind::Allreduce, vec![1.0; 100], &g, ReduceOp::Sum, Priority::bulk()).unwrap();
    for h in [a, b] {
        let c = rt.wait(h).unwrap();
        assert_eq!(c.state, RequestState::Failed);
        assert!(c.diagnostic.unwrap().contains("rank 1"));
    }
    assert!(rt.failure().is_some());
}
