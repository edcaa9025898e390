use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gsync::backends::sim::{sim_run, sim_sweep, SimOptions};
use gsync::collectives::DEFAULT_CHUNK_BYTES;
use gsync::cost::{
    compute_comm_ratio, divisors, estimate_iteration_time, scaling_sweep, select_plan, ClusterConfig, ParallelismPlan,
    Ratio, StrategyChoice,
};
use gsync::profile::{load_profile, ModelProfile, Precision};
use gsync::trace::trace_csv;
use gsync::validate::{run_all, ValidateOptions};

mod bench;

#[derive(Parser)]
#[command(name = "gsync", version, about = "Gradient synchronization planner, simulator and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Choose a parallelization strategy per layer.
    Plan(Common),
    /// Simulate training iterations and report exposed communication.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Plan JSON from `gsync plan`; defaults to data parallelism.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Write the event trace CSV here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also run the opposite prioritization arm and print the reduction factor.
        #[arg(long)]
        compare: bool,
    },
    /// Weak-scaling sweep, simulated and analytical side by side.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// World sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128,256")]
        worlds: Vec<usize>,
    },
    /// Socket allreduce microbenchmark; run once per rank with GSYNC_* set.
    Bench(bench::BenchArgs),
    /// Run the oracle and invariant suites.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one simulated chunk (checks that the suites notice).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 10 Gbps Ethernet: alpha 5 us, beta 1.25 GB/s.
    Ethernet10g,
    /// Calibrated 100 Gbps fabric: alpha 8 us per chunk, beta 12.5 GB/s.
    Fabric100g,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long, default_value_t = 1)]
    world: usize,
    #[arg(long, value_enum, default_value = "ethernet10g")]
    preset: Preset,
    /// Per-message latency, seconds.
    #[arg(long)]
    alpha: Option<f64>,
    /// Bandwidth, bytes per second.
    #[arg(long)]
    beta: Option<f64>,
    /// Compute throughput, flops per second.
    #[arg(long)]
    gamma: Option<f64>,
    /// Overlap effectiveness in [0, 1].
    #[arg(long)]
    eta: Option<f64>,
    /// Minibatch per node; defaults to the profile's.
    #[arg(long)]
    mb: Option<u64>,
    #[arg(long, default_value_t = 3)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative compute noise drawn from the seed.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, default_value_t = DEFAULT_CHUNK_BYTES)]
    chunk_bytes: usize,
    #[arg(long, default_value = "fp32")]
    wire: Precision,
    #[arg(long)]
    no_priority: bool,
    /// Force an int8 wire.
    #[arg(long)]
    quantize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(ModelProfile, ClusterConfig, u64)> {
        let profile = load_profile(&self.profile).with_context(|| format!("loading {}", self.profile.display()))?;
        let mut c = match self.preset {
            Preset::Ethernet10g => ClusterConfig::ethernet_10g(self.world),
            Preset::Fabric100g => ClusterConfig::fabric_100g(self.world),
        };
        c.alpha = self.alpha.unwrap_or(c.alpha);
        c.beta = self.beta.unwrap_or(c.beta);
        c.gamma = self.gamma.unwrap_or(c.gamma);
        c.eta = self.eta.unwrap_or(c.eta);
        c.wire = self.wire;
        c.validate()?;
        let mb = self.mb.unwrap_or(profile.default_minibatch as u64);
        if mb == 0 {
            bail!("--mb must be positive");
        }
        Ok((profile, c, mb))
    }

    fn sim_options(&self, capture_trace: bool) -> SimOptions {
        SimOptions {
            prioritize: !self.no_priority,
            quantize: self.quantize,
            eta: None,
            chunk_bytes: self.chunk_bytes,
            capture_trace,
            compute_jitter: self.jitter,
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn fmt_ratio(r: Ratio) -> String {
    match r {
        Ratio::Finite(v) => format!("{v:.1}"),
        Ratio::Unbounded => "inf".into(),
    }
}

fn cmd_plan(c: &Common) -> Result<()> {
    let (profile, cluster, mb) = c.load()?;
    let plan = select_plan(&profile, &cluster, mb, &divisors(cluster.world))?;
    println!("{:>5}  {:<24} {:>4} {:>12} {:>12} {:>12}", "layer", "name", "g", "flops/byte", "compute_s", "exposed_s");
    for p in &plan.layers {
        let l = profile.layer(p.layer_id).context("plan refers to unknown layer")?;
        let ratio = compute_comm_ratio(l, StrategyChoice::new(p.group_size), &cluster, mb)?;
        println!(
            "{:>5}  {:<24} {:>4} {:>12} {:>12.6} {:>12.6}",
            p.layer_id,
            l.name,
            p.group_size,
            fmt_ratio(ratio),
            p.est_compute_s,
            p.est_exposed_s
        );
    }
    println!("estimated iteration time: {:.6} s", plan.total_s);
    let json = plan.to_json() + "\n";
    match &c.out {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{json}"),
    }
    Ok(())
}

fn cmd_simulate(c: &Common, plan: Option<&Path>, trace: Option<&Path>, compare: bool) -> Result<()> {
    let (profile, cluster, mb) = c.load()?;
    let plan = match plan {
        Some(p) => ParallelismPlan::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => ParallelismPlan::uniform(&profile, 1),
    };
    let opts = c.sim_options(trace.is_some());
    let m = sim_run(&profile, &plan, &cluster, mb, c.iters, c.seed, &opts)?;
    emit(c.out.as_deref(), &m.to_csv())?;
    if let Some(t) = trace {
        fs::write(t, trace_csv(&m.trace)).with_context(|| format!("writing {}", t.display()))?;
    }
    let arm = if opts.prioritize { "on" } else { "off" };
    let say = |s: String| if c.out.is_some() { println!("{s}") } else { eprintln!("{s}") };
    say(format!("prioritization {arm}: iteration {:.6} s, exposed comm {:.6} s", m.iteration_s, m.exposed_comm_s));
    if compare {
        let other = sim_run(&profile, &plan, &cluster, mb, c.iters, c.seed, &SimOptions { prioritize: !opts.prioritize, capture_trace: false, ..opts })?;
        let (on, off) = if opts.prioritize { (&m, &other) } else { (&other, &m) };
        say(format!("prioritization {}: iteration {:.6} s, exposed comm {:.6} s", if opts.prioritize { "off" } else { "on" }, other.iteration_s, other.exposed_comm_s));
        let factor = if on.exposed_comm_s > 0.0 { off.exposed_comm_s / on.exposed_comm_s } else { f64::INFINITY };
        say(format!("exposed-comm reduction factor (off/on): {factor:.3}"));
    }
    Ok(())
}

fn cmd_sweep(c: &Common, worlds: &[usize]) -> Result<()> {
    let (profile, cluster, mb) = c.load()?;
    let sim = sim_sweep(&profile, &cluster, mb, worlds, c.iters, c.seed, &c.sim_options(false))?;
    let model = scaling_sweep(&profile, &cluster, mb, worlds)?;
    let mut csv = String::from("P,iter_time_s,efficiency,model_iter_time_s,model_efficiency\n");
    for (s, a) in sim.iter().zip(&model) {
        csv.push_str(&format!("{},{},{},{},{}\n", s.world, s.iter_time_s, s.efficiency, a.iter_time_s, a.efficiency));
    }
    emit(c.out.as_deref(), &csv)?;
    let plan = ParallelismPlan::uniform(&profile, 1);
    let t1 = estimate_iteration_time(&profile, &plan, &cluster.clone().with_world(1), mb)?.total_s;
    let msg = format!("single-node compute estimate {t1:.6} s");
    if c.out.is_some() {
        println!("{msg}");
    } else {
        eprintln!("{msg}");
    }
    Ok(())
}

fn cmd_validate(seed: u64, inject_fault: bool) -> Result<bool> {
    let reports = run_all(&ValidateOptions { inject_fault, seed });
    for r in &reports {
        println!("{}", r.verdict());
    }
    Ok(reports.iter().all(|r| r.passed()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Plan(c) => cmd_plan(&c).map(|_| true),
        Cmd::Simulate { common, plan, trace, compare } => {
            cmd_simulate(&common, plan.as_deref(), trace.as_deref(), compare).map(|_| true)
        }
        Cmd::Sweep { common, worlds } => cmd_sweep(&common, &worlds).map(|_| true),
        Cmd::Bench(args) => bench::run(&args),
        Cmd::Validate { seed, inject_fault } => cmd_validate(seed, inject_fault),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
