//! Scenario runner: builds the platform, executes a scripted driver, and
//! emits trace and statistics artifacts.

mod config;
mod driver;
mod platform;

pub use config::{
    BackendKind, DeviceConfig, DmaWindowConfig, InvalidConfig, MsiConfig, PciHostConfig,
    PlatformConfig, RamConfig,
};
pub use driver::{
    run as run_driver, CheckFailure, DriverReport, ScenarioKind, ScenarioOptions, DEFAULT_LEN,
    DEFAULT_SEED,
};
pub use platform::{AccessError, CpuPort, Platform};

use std::io::Write;
use std::path::Path;

use crate::sim::SimTime;
use crate::trace::{self, StatsReport, TraceRecord};
use crate::vpci::{BackendError, VpciError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(#[from] InvalidConfig),
    #[error("scenario failed: {0}")]
    Check(#[from] CheckFailure),
    #[error("backend error: {0}")]
    Backend(#[from] BackendError),
    #[error("device error: {0}")]
    Device(#[from] VpciError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code classes: 1 check failure, 2 configuration error,
    /// 3 backend/hardware error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Check(_) => 1,
            HarnessError::Config(_) => 2,
            HarnessError::Backend(_) | HarnessError::Device(_) | HarnessError::Io(_) => 3,
        }
    }
}

/// Everything a finished (or failed) run leaves behind.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub scenario: String,
    pub steps: Vec<String>,
    pub records: Vec<TraceRecord>,
    pub stats: StatsReport,
    pub final_time: SimTime,
}

/// Builds the platform, runs the named scenario to completion, writes the
/// trace and stats files named in the config, and returns the report.
/// Self-check failures still produce artifacts.
pub fn run_scenario(
    config: &PlatformConfig,
    scenario: &str,
    options: ScenarioOptions,
) -> Result<ScenarioReport, HarnessError> {
    let kind = ScenarioKind::from_name(scenario).ok_or_else(|| InvalidConfig {
        field: "scenario".to_string(),
        reason: format!(
            "unknown scenario {scenario:?}; available: {}",
            ScenarioKind::ALL
                .iter()
                .map(|(name, _)| *name)
                .collect::<Vec<_>>()
                .join(", ")
        ),
    })?;

    let platform = Platform::build(config)?;
    let outcome = driver::run(&platform, kind, options);
    platform.kernel.finish();

    let records = platform.tracer.records();
    let stats = StatsReport::from_trace(scenario, &records, &config.stats_fold());
    if let Some(path) = &config.trace_path {
        write_trace(Path::new(path), &records)?;
    }
    if let Some(path) = &config.stats_path {
        write_stats(Path::new(path), &stats)?;
    }

    let steps = outcome?.steps;
    Ok(ScenarioReport {
        scenario: scenario.to_string(),
        steps,
        records,
        stats,
        final_time: platform.kernel.now(),
    })
}

pub fn write_trace(path: &Path, records: &[TraceRecord]) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    trace::write_jsonl(records, &mut file)?;
    file.flush()
}

pub fn write_stats(path: &Path, stats: &StatsReport) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, stats.to_csv())
}

pub fn read_trace(path: &Path) -> std::io::Result<Vec<TraceRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    trace::read_jsonl(file)
}
