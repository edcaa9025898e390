use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gsync::backends::{LocalTransport, SocketEnv, SocketTransport, Transport};
use gsync::backends::socket::{connect_mesh, DEFAULT_CONNECT_TIMEOUT};
use gsync::collectives::{allreduce_oracle, max_abs_error, CollectiveKind, CommGroup, ReduceOp, DEFAULT_CHUNK_BYTES};
use gsync::profile::Precision;
use gsync::scheduler::{Priority, Runtime, RuntimeConfig};

const FP32_TOLERANCE: f64 = 1e-6;

#[derive(Args, Clone)]
pub struct BenchArgs {
    /// Largest message, bytes. Sizes double from 4 KiB.
    #[arg(long, default_value_t = 64 << 20)]
    max_bytes: usize,
    #[arg(long, default_value_t = 4096)]
    min_bytes: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_CHUNK_BYTES)]
    chunk_bytes: usize,
    #[arg(long, default_value = "fp32")]
    wire: Precision,
    /// Seconds to wait for peers.
    #[arg(long)]
    connect_timeout: Option<u64>,
}

// Every rank draws all ranks' inputs so each can check the full result.
fn inputs(seed: u64, bytes: usize, world: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (bytes as u64).rotate_left(32));
    let len = bytes / 4;
    (0..world).map(|_| (0..len).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).collect()
}

/// Absolute error allowed against the fp32 oracle. Inputs lie in [-1, 1], so
/// every partial sum is bounded by `n`.
fn error_bound(wire: Precision, n: usize, reference: &[f32]) -> f64 {
    let r = n as f64;
    match wire {
        Precision::Fp32 => {
            let scale = reference.iter().fold(1.0f64, |m, v| m.max(v.abs() as f64));
            FP32_TOLERANCE * scale
        }
        Precision::Fp16 => n as f64 * r * 2f64.powi(-10),
        Precision::Int8 => n as f64 * r / 127.0,
    }
}

fn transport(env: &SocketEnv, timeout: Duration) -> Result<Box<dyn Transport>> {
    if env.world == 1 {
        let t = LocalTransport::mesh(1).pop().expect("mesh of one");
        return Ok(Box::new(t));
    }
    let eps = env.endpoints()?;
    let t: SocketTransport = connect_mesh(env.rank, &eps, None, timeout)
        .with_context(|| format!("rank {} connecting to {} peers", env.rank, env.world - 1))?;
    Ok(Box::new(t))
}

pub fn run(args: &BenchArgs) -> Result<bool> {
    let env = SocketEnv::from_env()?;
    let timeout = args.connect_timeout.map(Duration::from_secs).unwrap_or(DEFAULT_CONNECT_TIMEOUT);
    let cfg = RuntimeConfig {
        chunk_bytes: args.chunk_bytes,
        wire: args.wire,
        ..RuntimeConfig::default()
    };
    let rt = Runtime::start(transport(&env, timeout)?, cfg);
    let group = CommGroup::world(env.world, env.rank)?;
    let lead = env.rank == 0;

    if lead {
        println!("bytes,latency_s,bandwidth_gbps,max_abs_error,bound,wire_bytes");
    }
    let mut ok = true;
    let mut size = args.min_bytes.max(4);
    while size <= args.max_bytes {
        let all = inputs(args.seed, size, env.world);
        let reference = allreduce_oracle(&all, ReduceOp::Sum)?;
        let bound = error_bound(args.wire, env.world, &reference);
        let mut best = f64::INFINITY;
        let mut err = 0.0f64;
        let before = rt.payload_bytes_sent();
        for _ in 0..args.reps.max(1) {
            let t0 = Instant::now();
            let h = rt.submit(CollectiveKind::Allreduce, all[env.rank].clone(), &group, ReduceOp::Sum, Priority::bulk())?;
            let c = rt.wait(h)?;
            best = best.min(t0.elapsed().as_secs_f64());
            if let Some(d) = c.diagnostic {
                eprintln!("rank {}: {d}", env.rank);
            }
            err = err.max(max_abs_error(&c.buffer, &reference));
        }
        let wire = (rt.payload_bytes_sent() - before) / args.reps.max(1) as u64;
        if err > bound {
            ok = false;
            eprintln!("rank {}: {size} bytes: error {err:e} exceeds bound {bound:e}", env.rank);
        }
        if lead {
            let gbps = size as f64 * 8.0 / best / 1e9;
            println!("{size},{best:.9},{gbps:.3},{err:e},{bound:e},{wire}");
        }
        size *= 2;
    }
    let report = rt.shutdown(true)?;
    if !report.aborted.is_empty() {
        eprintln!("rank {}: {} requests aborted at shutdown", env.rank, report.aborted.len());
        ok = false;
    }
    if lead {
        println!("{}", if ok { "bench: PASS" } else { "bench: FAIL" });
    }
    Ok(ok)
}
