//! End-to-end scenario runs against the mock backend: artifacts, stats and
//! regression diffing.

use vpsim::harness::{
    run_scenario, HarnessError, PlatformConfig, ScenarioOptions,
};
use vpsim::trace::StatsReport;

/// A small platform keeps test runs quick; the address map mirrors the
/// defaults otherwise.
fn test_config() -> PlatformConfig {
    let mut config = PlatformConfig::default();
    config.ram.size = 1 << 20;
    config.dma_window.size = 1 << 20;
    config
}

fn options(len: u32) -> ScenarioOptions {
    ScenarioOptions {
        len,
        ..Default::default()
    }
}

#[test]
fn enumerate_and_run_passes_its_checks() {
    let report = run_scenario(&test_config(), "enumerate-and-run", options(4096)).unwrap();
    assert!(report.steps.iter().any(|s| s == "irq-counts"));
    assert_eq!(report.stats.irq_vectors[&1], 16, "ceil(4096 / 256)");
    assert_eq!(report.stats.irq_vectors[&0], 1);
    assert_eq!(report.stats.legacy_pins["INTA"], 0);
    assert!(report.stats.regions["cfg"].access_count > 0);
    assert!(report.stats.regions["mmio"].access_count > 0);
}

#[test]
fn legacy_scenario_uses_inta_instead_of_doorbells() {
    let report = run_scenario(&test_config(), "legacy", options(1000)).unwrap();
    assert_eq!(report.stats.legacy_pins["INTA"], 1);
    assert!(report.stats.irq_vectors.values().all(|&c| c == 0));
}

#[test]
fn masked_vector_scenario_defers_to_the_unmask() {
    let report = run_scenario(&test_config(), "masked-vector", options(600)).unwrap();
    assert!(report.steps.iter().any(|s| s == "pba-pending"));
    assert!(report.steps.iter().any(|s| s == "replay-once"));
    assert_eq!(report.stats.irq_vectors[&0], 1);
    assert_eq!(report.stats.irq_vectors[&1], 3, "ceil(600 / 256)");
}

#[test]
fn probe_scenario_works_on_the_mock() {
    let report = run_scenario(&test_config(), "probe", options(0)).unwrap();
    assert!(report.steps.iter().any(|s| s == "dma-window"));
}

#[test]
fn identical_runs_write_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for i in 0..2 {
        let mut config = test_config();
        let path = dir.path().join(format!("trace{i}.jsonl"));
        config.trace_path = Some(path.to_string_lossy().into_owned());
        run_scenario(&config, "enumerate-and-run", options(1000)).unwrap();
        paths.push(path);
    }
    let a = std::fs::read(&paths[0]).unwrap();
    let b = std::fs::read(&paths[1]).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "traces must be byte-identical");
}

#[test]
fn stats_recompute_from_the_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = test_config();
    let trace_path = dir.path().join("trace.jsonl");
    let stats_path = dir.path().join("stats.csv");
    config.trace_path = Some(trace_path.to_string_lossy().into_owned());
    config.stats_path = Some(stats_path.to_string_lossy().into_owned());
    let report = run_scenario(&config, "enumerate-and-run", options(257)).unwrap();

    // Re-reading the trace and re-folding must reproduce the written CSV.
    let records = vpsim::harness::read_trace(&trace_path).unwrap();
    let recomputed = StatsReport::from_trace("enumerate-and-run", &records, &config.stats_fold());
    assert_eq!(recomputed, report.stats);
    let written = StatsReport::from_csv(&std::fs::read_to_string(&stats_path).unwrap()).unwrap();
    assert_eq!(written, report.stats);
}

#[test]
fn diff_catches_a_chunk_size_regression() {
    let config = test_config();
    let len = 1024u32;
    let report = run_scenario(&config, "enumerate-and-run", options(len)).unwrap();

    // A device with 128-byte chunks would double the chunk-vector count.
    let mut regressed = report.stats.clone();
    *regressed.irq_vectors.get_mut(&1).unwrap() = (len as u64).div_ceil(128);

    let diffs = report.stats.diff(&regressed).unwrap();
    assert_eq!(diffs, vec!["irq.vector1: 4 != 8".to_string()]);

    let clean = run_scenario(&config, "enumerate-and-run", options(len)).unwrap();
    assert_eq!(report.stats.diff(&clean.stats).unwrap(), Vec::<String>::new());
}

#[test]
fn invalid_config_names_the_field() {
    let mut config = test_config();
    config.dma_window.base = 0x9000_0000;
    let err = run_scenario(&config, "enumerate-and-run", options(64)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("dma_window"), "{err}");
}

#[test]
fn unknown_scenarios_are_rejected_with_the_catalog() {
    let err = run_scenario(&test_config(), "no-such-thing", options(64)).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
    assert!(err.to_string().contains("enumerate-and-run"), "{err}");
}

#[test]
fn scenario_timeout_is_a_check_failure() {
    let mut config = test_config();
    // One virtual nanosecond is far too short for a 4096-byte job.
    config.timeout = vpsim::sim::SimTime::from_ns(1);
    let err = run_scenario(&config, "enumerate-and-run", options(4096)).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("completion-wait"), "{err}");
}

#[test]
fn artifacts_are_written_even_when_checks_fail() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = test_config();
    config.timeout = vpsim::sim::SimTime::from_ns(1);
    let trace_path = dir.path().join("failed.jsonl");
    config.trace_path = Some(trace_path.to_string_lossy().into_owned());
    let _ = run_scenario(&config, "enumerate-and-run", options(4096)).unwrap_err();
    assert!(trace_path.exists(), "trace of the failed run is kept");
}
