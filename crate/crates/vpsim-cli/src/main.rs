//! Scenario runner CLI: `run` executes a scripted driver against the mock
//! or VFIO backend and writes trace/stats artifacts, `stats` recomputes a
//! report from a trace file, `diff` compares two reports.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error,
//! 3 backend/hardware error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vpsim::harness::{
    self, BackendKind, PlatformConfig, ScenarioOptions, DEFAULT_LEN, DEFAULT_SEED,
};
use vpsim::sim::SimTime;
use vpsim::trace::StatsReport;

#[derive(Parser)]
#[command(name = "vpsim", version, about = "Virtual platform with PCI passthrough")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the platform, run a scenario, and write trace/stats files.
    Run(RunArgs),
    /// Recompute a statistics report from a trace file.
    Stats(StatsArgs),
    /// Compare two statistics reports field by field.
    Diff(DiffArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Platform configuration file (TOML). Defaults apply if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Device backend.
    #[arg(long, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    /// PCI address of the passed-through device (vfio backend).
    #[arg(long)]
    device: Option<String>,
    /// Scenario to run.
    #[arg(long, default_value = "enumerate-and-run")]
    scenario: String,
    /// Trace output path (JSON lines).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Statistics output path (CSV).
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Interrupt sync quantum, e.g. "1us".
    #[arg(long)]
    quantum: Option<String>,
    /// Copy length for the mock workload scenarios.
    #[arg(long, default_value_t = DEFAULT_LEN)]
    len: u32,
    /// Seed for the pseudorandom source fill.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    /// Trace file to fold.
    #[arg(long)]
    trace: PathBuf,
    /// Platform configuration the trace was produced with (for the
    /// doorbell address and SPI range).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario name to record in the report.
    #[arg(long, default_value = "enumerate-and-run")]
    scenario: String,
    /// Write the recomputed CSV here (stdout table is always printed).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiffArgs {
    /// Baseline stats CSV.
    a: PathBuf,
    /// Candidate stats CSV.
    b: PathBuf,
}

fn parse_backend(text: &str) -> Result<BackendKind, String> {
    match text {
        "mock" => Ok(BackendKind::Mock),
        "vfio" => Ok(BackendKind::Vfio),
        other => Err(format!("unknown backend {other:?} (mock or vfio)")),
    }
}

fn fail(code: u8, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(code)
}

fn load_config(path: &Option<PathBuf>) -> Result<PlatformConfig, ExitCode> {
    match path {
        Some(path) => PlatformConfig::load(path).map_err(|e| fail(2, e)),
        None => Ok(PlatformConfig::default()),
    }
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let mut config = match load_config(&args.config) {
        Ok(config) => config,
        Err(code) => return code,
    };
    if let Some(backend) = args.backend {
        config.device.backend = backend;
    }
    if let Some(device) = args.device {
        config.device.sysfs_address = Some(device);
    }
    if let Some(trace) = args.trace {
        config.trace_path = Some(trace.to_string_lossy().into_owned());
    }
    if let Some(stats) = args.stats {
        config.stats_path = Some(stats.to_string_lossy().into_owned());
    }
    if let Some(quantum) = args.quantum {
        config.quantum = match SimTime::parse(&quantum) {
            Ok(quantum) => quantum,
            Err(e) => return fail(2, format!("quantum: {e}")),
        };
    }

    let options = ScenarioOptions {
        len: args.len,
        seed: args.seed,
    };
    match harness::run_scenario(&config, &args.scenario, options) {
        Ok(report) => {
            println!(
                "scenario {:?} passed {} steps in {} of virtual time",
                report.scenario,
                report.steps.len(),
                report.final_time
            );
            print!("{}", report.stats.render_table());
            println!("note: device DMA through DMI bypasses the platform and is not traced");
            if let Some(path) = &config.trace_path {
                println!("trace:  {path} ({} records)", report.records.len());
            }
            if let Some(path) = &config.stats_path {
                println!("stats:  {path}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.exit_code() as u8, e),
    }
}

fn cmd_stats(args: StatsArgs) -> ExitCode {
    let config = match load_config(&args.config) {
        Ok(config) => config,
        Err(code) => return code,
    };
    let records = match harness::read_trace(&args.trace) {
        Ok(records) => records,
        Err(e) => return fail(3, format!("cannot read {:?}: {e}", args.trace)),
    };
    let report = StatsReport::from_trace(&args.scenario, &records, &config.stats_fold());
    print!("{}", report.render_table());
    println!("note: device DMA through DMI bypasses the platform and is not traced");
    if let Some(out) = args.out {
        if let Err(e) = harness::write_stats(&out, &report) {
            return fail(3, format!("cannot write {out:?}: {e}"));
        }
    }
    ExitCode::SUCCESS
}

fn cmd_diff(args: DiffArgs) -> ExitCode {
    let load = |path: &PathBuf| -> Result<StatsReport, ExitCode> {
        let text =
            std::fs::read_to_string(path).map_err(|e| fail(3, format!("{path:?}: {e}")))?;
        StatsReport::from_csv(&text).map_err(|e| fail(2, format!("{path:?}: {e}")))
    };
    let a = match load(&args.a) {
        Ok(a) => a,
        Err(code) => return code,
    };
    let b = match load(&args.b) {
        Ok(b) => b,
        Err(code) => return code,
    };
    match a.diff(&b) {
        Ok(differences) if differences.is_empty() => {
            println!("PASS: reports match");
            ExitCode::SUCCESS
        }
        Ok(differences) => {
            println!("FAIL: {} field(s) differ", differences.len());
            for difference in differences {
                println!("  {difference}");
            }
            ExitCode::from(1)
        }
        Err(e) => fail(2, e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Diff(args) => cmd_diff(args),
    }
}
