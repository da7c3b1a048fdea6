mod experiment;
mod output;

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lorasched_core::cost::{cost_report, MemoryFootprint};
use lorasched_core::memory::{fit, read_samples_csv, FitMode};
use lorasched_core::progress::{throughput_gain, ThroughputScenario};
use lorasched_core::workload::write_jobs_jsonl;
use lorasched_core::{Strategy, SyntheticWorkload};

use experiment::Overrides;
use output::{write_atomic, write_atomic_with};

/// Bad input from the user: exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "lorasched",
    version,
    about = "Schedule and simulate multi-job LoRA fine-tuning"
)]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy of an experiment spec and write traces and metrics.
    Simulate(SimulateArgs),
    /// Fit the memory model to a CSV of samples.
    FitMem(FitMemArgs),
    /// Memory and kernel-launch savings of sharing one base model across k jobs.
    Cost(CostArgs),
    /// Write a synthetic workload as JSON Lines.
    GenWorkload(GenArgs),
    /// Throughput gain of prediction-aware scheduling.
    Throughput(ThroughputArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Output root; defaults to the spec's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated strategies (M1..M4).
    #[arg(long, value_delimiter = ',')]
    strategy: Option<Vec<Strategy>>,
    #[arg(long)]
    topk: Option<usize>,
    /// Memory budget in GB.
    #[arg(long)]
    mmem: Option<f64>,
}

#[derive(Args)]
struct FitMemArgs {
    #[arg(long)]
    samples: PathBuf,
    /// Constrain coefficients to be >= 0.
    #[arg(long)]
    nonnegative: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    k: u64,
    /// Base model weights in GB.
    #[arg(long)]
    wp: f64,
    /// Adapter weights in GB.
    #[arg(long, default_value_t = 0.0)]
    wl: f64,
    /// Other per-job memory in GB.
    #[arg(long, default_value_t = 0.0)]
    we: f64,
}

#[derive(Args)]
struct GenArgs {
    /// TOML file with synthetic workload parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ThroughputArgs {
    /// Concurrent job slots.
    #[arg(long)]
    k: usize,
    /// Comma-separated iteration counts, one per job.
    #[arg(long, value_delimiter = ',', required = true)]
    iterations: Vec<u32>,
    /// Predictor accuracy in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    accuracy: f64,
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn usage(e: lorasched_core::Error) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn simulate(args: SimulateArgs, json: bool) -> Result<()> {
    let overrides = Overrides {
        out: args.out,
        seed: args.seed,
        strategies: args.strategy,
        top_k: args.topk,
        mem_budget_gb: args.mmem,
    };
    let report = experiment::simulate(&args.spec, &overrides)?;
    if json {
        print_json(&lorasched_core::sim::comparison_summary(&report.outcomes))?;
    } else {
        println!("results in {}", report.dir.display());
        println!(
            "{:<9}{:>12}{:>12}{:>12}{:>10}{:>14}{:>10}",
            "strategy", "mean_tt", "mean_wt", "mean_vtt", "padding", "eff_tput", "util"
        );
        for o in &report.outcomes {
            let m = &o.metrics;
            println!(
                "{:<9}{:>12.3}{:>12.3}{:>12.3}{:>10.4}{:>14.1}{:>10.3}",
                o.strategy.code(),
                m.mean_turnaround,
                m.mean_waiting,
                m.mean_value_turnaround,
                m.padding_ratio,
                m.effective_throughput,
                m.utilization
            );
        }
    }
    Ok(())
}

fn fit_mem(args: FitMemArgs, json: bool) -> Result<()> {
    let file = fs::File::open(&args.samples)
        .map_err(|e| UsageError(format!("cannot open samples `{}`: {e}", args.samples.display())))?;
    let samples = read_samples_csv(file).map_err(usage)?;
    let mode = if args.nonnegative {
        FitMode::Nonnegative
    } else {
        FitMode::Unconstrained
    };
    let model = fit(&samples, mode).map_err(usage)?;
    write_atomic(
        &args.out,
        (serde_json::to_string_pretty(&model)? + "\n").as_bytes(),
    )?;
    if json {
        print_json(&model)?;
    } else {
        println!("beta0: {:e}", model.beta0);
        println!("beta1: {:e}", model.beta1);
        println!("beta2: {:e}", model.beta2);
        println!("rmse: {:e}", model.rmse);
        println!("samples: {}", model.sample_count);
    }
    Ok(())
}

fn cost(args: CostArgs, json: bool) -> Result<()> {
    let fp = MemoryFootprint::new(args.wp, args.wl, args.we).map_err(usage)?;
    let r = cost_report(&fp, args.k).map_err(usage)?;
    if json {
        print_json(&r)?;
    } else {
        println!("k: {}", r.k);
        println!("total_no_share: {:.1} GB", r.total_no_share_gb);
        println!("total_shared: {:.1} GB", r.total_shared_gb);
        println!("memory_saved: {:.1} GB", r.memory_saved_gb);
        println!("launch_saving: {:.1}%", 100.0 * r.launch_saving_fraction);
    }
    Ok(())
}

fn gen_workload(args: GenArgs, json: bool) -> Result<()> {
    let mut params = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read config `{}`: {e}", path.display())))?;
            toml::from_str::<SyntheticWorkload>(&text)
                .map_err(|e| UsageError(format!("malformed config `{}`: {e}", path.display())))?
        }
        None => SyntheticWorkload::default(),
    };
    if let Some(seed) = args.seed {
        params.seed = seed;
    }
    if let Some(n) = args.jobs {
        params.num_jobs = n;
    }
    let jobs = params.generate().map_err(usage)?;
    write_atomic_with(&args.out, |w| Ok(write_jobs_jsonl(w, &jobs)?))?;
    if json {
        print_json(&serde_json::json!({ "jobs": jobs.len(), "out": args.out }))?;
    } else {
        println!("wrote {} jobs to {}", jobs.len(), args.out.display());
    }
    Ok(())
}

fn throughput(args: ThroughputArgs, json: bool) -> Result<()> {
    let s = ThroughputScenario::new(args.k, args.iterations, args.accuracy).map_err(usage)?;
    let g = throughput_gain(&s).map_err(usage)?;
    if json {
        print_json(&g)?;
    } else {
        println!("t_predicted: {:.6}", g.t_e);
        println!("t_worst: {:.6}", g.t_w);
        println!("t_average: {:.6}", g.t_a);
        println!("tau: {:.6}", g.tau);
        println!("gain: {:.2}%", 100.0 * g.eta);
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<lorasched_core::Error>() {
            return if core.is_usage() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LORASCHED_LOG", "warn")).init();
    let cli = Cli::parse();
    let json = cli.json;
    let result = match cli.command {
        Command::Simulate(a) => simulate(a, json),
        Command::FitMem(a) => fit_mem(a, json),
        Command::Cost(a) => cost(a, json),
        Command::GenWorkload(a) => gen_workload(a, json),
        Command::Throughput(a) => throughput(a, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
