//! Communication tracing and the statistics pipeline.
//!
//! Every logged event is one [`TraceRecord`]; the trace file is one JSON
//! object per line in record order. [`StatsReport`] is a pure fold over a
//! trace, so any report number can be recomputed from the file alone.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::sim::{Direction, Kernel};

/// Who initiated the traced event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceSource {
    Cpu,
    Device,
}

/// Which part of the platform the event belongs to.
///
/// `Cfg`, `Mmio`, `Io` and `Bus` carry bus accesses. `Irq` records legacy
/// pin transitions (address = pin index, data = level) and `Warn` records
/// diagnostic warnings (address = warning code), so that interrupt and
/// warning statistics stay recomputable from the trace file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceSpace {
    Cfg,
    Mmio,
    Io,
    Bus,
    Irq,
    Warn,
}

impl TraceSpace {
    pub fn name(self) -> &'static str {
        match self {
            TraceSpace::Cfg => "cfg",
            TraceSpace::Mmio => "mmio",
            TraceSpace::Io => "io",
            TraceSpace::Bus => "bus",
            TraceSpace::Irq => "irq",
            TraceSpace::Warn => "warn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceDirection {
    Read,
    Write,
}

impl From<Direction> for TraceDirection {
    fn from(d: Direction) -> Self {
        match d {
            Direction::Read => TraceDirection::Read,
            Direction::Write => TraceDirection::Write,
        }
    }
}

/// One logged access or interrupt. Records are strictly ordered by
/// (time_ps, emission order); hex fields are lowercase and zero-padded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_ps: u64,
    pub source: TraceSource,
    pub space: TraceSpace,
    /// 16-digit hex bus address (pin index for `irq`, warning code for `warn`).
    pub address: String,
    pub length: usize,
    pub direction: TraceDirection,
    /// Up to 8 data bytes in bus order, two hex digits each.
    pub data_hex: String,
}

impl TraceRecord {
    pub fn address_value(&self) -> u64 {
        u64::from_str_radix(&self.address, 16).unwrap_or(0)
    }

    pub fn data_bytes(&self) -> Vec<u8> {
        self.data_hex
            .as_bytes()
            .chunks(2)
            .filter_map(|pair| {
                let s = std::str::from_utf8(pair).ok()?;
                u8::from_str_radix(s, 16).ok()
            })
            .collect()
    }
}

fn hex_address(address: u64) -> String {
    format!("{address:016x}")
}

fn hex_data(data: &[u8]) -> String {
    let mut s = String::with_capacity(data.len() * 2);
    for b in &data[..data.len().min(8)] {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Diagnostic warning classes, with stable codes used in trace records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum WarnKind {
    DecodeOverlap,
    MisalignedBar,
    MissingPin,
    DoorbellOutOfRange,
    ReadOnlyWrite,
    UnknownRegister,
    DroppedIrq,
}

impl WarnKind {
    pub const ALL: [WarnKind; 7] = [
        WarnKind::DecodeOverlap,
        WarnKind::MisalignedBar,
        WarnKind::MissingPin,
        WarnKind::DoorbellOutOfRange,
        WarnKind::ReadOnlyWrite,
        WarnKind::UnknownRegister,
        WarnKind::DroppedIrq,
    ];

    pub fn code(self) -> u64 {
        self as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            WarnKind::DecodeOverlap => "decode_overlap",
            WarnKind::MisalignedBar => "misaligned_bar",
            WarnKind::MissingPin => "missing_pin",
            WarnKind::DoorbellOutOfRange => "doorbell_out_of_range",
            WarnKind::ReadOnlyWrite => "readonly_write",
            WarnKind::UnknownRegister => "unknown_register",
            WarnKind::DroppedIrq => "dropped_irq",
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

struct TracerInner {
    kernel: Kernel,
    records: RefCell<Vec<TraceRecord>>,
}

/// Cheap-to-clone handle components use to emit trace records.
///
/// A disabled tracer swallows everything, so models can trace
/// unconditionally.
#[derive(Clone)]
pub struct Tracer {
    inner: Option<Rc<TracerInner>>,
}

impl Tracer {
    pub fn enabled(kernel: Kernel) -> Self {
        Tracer {
            inner: Some(Rc::new(TracerInner {
                kernel,
                records: RefCell::new(Vec::new()),
            })),
        }
    }

    pub fn disabled() -> Self {
        Tracer { inner: None }
    }

    pub fn access(
        &self,
        source: TraceSource,
        space: TraceSpace,
        address: u64,
        direction: Direction,
        data: &[u8],
    ) {
        if let Some(inner) = &self.inner {
            inner.records.borrow_mut().push(TraceRecord {
                time_ps: inner.kernel.now().as_ps(),
                source,
                space,
                address: hex_address(address),
                length: data.len(),
                direction: direction.into(),
                data_hex: hex_data(data),
            });
        }
    }

    /// Records a legacy interrupt pin transition.
    pub fn irq(&self, pin_index: usize, level: bool) {
        if let Some(inner) = &self.inner {
            inner.records.borrow_mut().push(TraceRecord {
                time_ps: inner.kernel.now().as_ps(),
                source: TraceSource::Device,
                space: TraceSpace::Irq,
                address: hex_address(pin_index as u64),
                length: 1,
                direction: TraceDirection::Write,
                data_hex: hex_data(&[level as u8]),
            });
        }
    }

    pub fn warning(&self, kind: WarnKind) {
        if let Some(inner) = &self.inner {
            inner.records.borrow_mut().push(TraceRecord {
                time_ps: inner.kernel.now().as_ps(),
                source: TraceSource::Device,
                space: TraceSpace::Warn,
                address: hex_address(kind.code()),
                length: 0,
                direction: TraceDirection::Write,
                data_hex: String::new(),
            });
        }
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        match &self.inner {
            Some(inner) => inner.records.borrow().clone(),
            None => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.inner
            .as_ref()
            .map_or(0, |inner| inner.records.borrow().len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn write_jsonl<W: Write>(records: &[TraceRecord], mut writer: W) -> io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(reader: R) -> io::Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for (number, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("trace line {}: {e}", number + 1),
            )
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Platform constants the statistics fold needs to classify doorbell writes.
#[derive(Debug, Clone, Copy)]
pub struct StatsFoldConfig {
    pub doorbell_setspi_address: u64,
    pub base_spi: u32,
    pub num_spis: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RegionStats {
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub access_count: u64,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum StatsError {
    #[error("stats are for different scenarios: {a:?} vs {b:?}")]
    ScenarioMismatch { a: String, b: String },
    #[error("malformed stats file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Aggregated per-region byte counts, per-vector interrupt counts, legacy
/// pin counts and warning counts for one scenario run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatsReport {
    pub scenario: String,
    pub regions: BTreeMap<String, RegionStats>,
    pub irq_vectors: BTreeMap<u32, u64>,
    pub legacy_pins: BTreeMap<String, u64>,
    pub warnings: BTreeMap<String, u64>,
}

impl StatsReport {
    fn empty(scenario: &str, fold: &StatsFoldConfig) -> Self {
        let regions = ["bus", "cfg", "io", "mmio"]
            .into_iter()
            .map(|name| (name.to_string(), RegionStats::default()))
            .collect();
        let irq_vectors = (0..fold.num_spis).map(|v| (v, 0)).collect();
        let legacy_pins = ["INTA", "INTB", "INTC", "INTD"]
            .into_iter()
            .map(|name| (name.to_string(), 0))
            .collect();
        let warnings = WarnKind::ALL
            .into_iter()
            .map(|kind| (kind.name().to_string(), 0))
            .collect();
        StatsReport {
            scenario: scenario.to_string(),
            regions,
            irq_vectors,
            legacy_pins,
            warnings,
        }
    }

    /// Folds a trace into a report. The fold is the only way report numbers
    /// come to exist, so the report is recomputable from the file by
    /// construction.
    pub fn from_trace(scenario: &str, records: &[TraceRecord], fold: &StatsFoldConfig) -> Self {
        let mut report = Self::empty(scenario, fold);
        for record in records {
            match record.space {
                TraceSpace::Cfg | TraceSpace::Mmio | TraceSpace::Io | TraceSpace::Bus => {
                    let region = report
                        .regions
                        .get_mut(record.space.name())
                        .expect("seeded region");
                    region.access_count += 1;
                    match record.direction {
                        TraceDirection::Read => region.bytes_read += record.length as u64,
                        TraceDirection::Write => region.bytes_written += record.length as u64,
                    }
                    if record.space == TraceSpace::Bus
                        && record.direction == TraceDirection::Write
                        && record.length == 4
                        && record.address_value() == fold.doorbell_setspi_address
                    {
                        let data = record.data_bytes();
                        let value = u32::from_le_bytes(data[..4].try_into().unwrap_or([0; 4]));
                        if value >= fold.base_spi && value - fold.base_spi < fold.num_spis {
                            *report.irq_vectors.entry(value - fold.base_spi).or_insert(0) += 1;
                        }
                    }
                }
                TraceSpace::Irq => {
                    if record.data_bytes().first() == Some(&1) {
                        let name = match record.address_value() {
                            0 => "INTA",
                            1 => "INTB",
                            2 => "INTC",
                            _ => "INTD",
                        };
                        *report.legacy_pins.entry(name.to_string()).or_insert(0) += 1;
                    }
                }
                TraceSpace::Warn => {
                    if let Some(kind) = WarnKind::from_code(record.address_value()) {
                        *report.warnings.entry(kind.name().to_string()).or_insert(0) += 1;
                    }
                }
            }
        }
        report
    }

    /// Stable three-column CSV (`section,key,value`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,key,value\n");
        let _ = writeln!(out, "meta,scenario,{}", self.scenario);
        for (name, stats) in &self.regions {
            let _ = writeln!(out, "region,{name}.access_count,{}", stats.access_count);
            let _ = writeln!(out, "region,{name}.bytes_read,{}", stats.bytes_read);
            let _ = writeln!(out, "region,{name}.bytes_written,{}", stats.bytes_written);
        }
        for (vector, count) in &self.irq_vectors {
            let _ = writeln!(out, "irq,vector{vector},{count}");
        }
        for (pin, count) in &self.legacy_pins {
            let _ = writeln!(out, "legacy,{pin},{count}");
        }
        for (kind, count) in &self.warnings {
            let _ = writeln!(out, "warning,{kind},{count}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, StatsError> {
        let mut report = StatsReport {
            scenario: String::new(),
            regions: BTreeMap::new(),
            irq_vectors: BTreeMap::new(),
            legacy_pins: BTreeMap::new(),
            warnings: BTreeMap::new(),
        };
        let malformed = |line: usize, reason: &str| StatsError::Malformed {
            line,
            reason: reason.to_string(),
        };
        for (number, line) in text.lines().enumerate() {
            if number == 0 || line.trim().is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, ',');
            let section = fields.next().unwrap_or_default();
            let key = fields
                .next()
                .ok_or_else(|| malformed(number + 1, "missing key"))?;
            let value = fields
                .next()
                .ok_or_else(|| malformed(number + 1, "missing value"))?;
            match section {
                "meta" if key == "scenario" => report.scenario = value.to_string(),
                "region" => {
                    let (name, field) = key
                        .rsplit_once('.')
                        .ok_or_else(|| malformed(number + 1, "bad region key"))?;
                    let value: u64 = value
                        .parse()
                        .map_err(|_| malformed(number + 1, "bad count"))?;
                    let stats = report.regions.entry(name.to_string()).or_default();
                    match field {
                        "access_count" => stats.access_count = value,
                        "bytes_read" => stats.bytes_read = value,
                        "bytes_written" => stats.bytes_written = value,
                        _ => return Err(malformed(number + 1, "unknown region field")),
                    }
                }
                "irq" => {
                    let vector: u32 = key
                        .strip_prefix("vector")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| malformed(number + 1, "bad vector key"))?;
                    let count = value
                        .parse()
                        .map_err(|_| malformed(number + 1, "bad count"))?;
                    report.irq_vectors.insert(vector, count);
                }
                "legacy" => {
                    let count = value
                        .parse()
                        .map_err(|_| malformed(number + 1, "bad count"))?;
                    report.legacy_pins.insert(key.to_string(), count);
                }
                "warning" => {
                    let count = value
                        .parse()
                        .map_err(|_| malformed(number + 1, "bad count"))?;
                    report.warnings.insert(key.to_string(), count);
                }
                _ => return Err(malformed(number + 1, "unknown section")),
            }
        }
        Ok(report)
    }

    /// Human-readable summary table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario: {}", self.scenario);
        let _ = writeln!(out, "{:<8} {:>12} {:>14} {:>14}", "region", "accesses", "bytes read", "bytes written");
        for (name, stats) in &self.regions {
            let _ = writeln!(
                out,
                "{:<8} {:>12} {:>14} {:>14}",
                name, stats.access_count, stats.bytes_read, stats.bytes_written
            );
        }
        let fired: Vec<String> = self
            .irq_vectors
            .iter()
            .filter(|(_, &count)| count > 0)
            .map(|(vector, count)| format!("vector{vector}={count}"))
            .collect();
        let _ = writeln!(
            out,
            "irqs:    {}",
            if fired.is_empty() { "none".to_string() } else { fired.join(" ") }
        );
        let legacy: Vec<String> = self
            .legacy_pins
            .iter()
            .filter(|(_, &count)| count > 0)
            .map(|(pin, count)| format!("{pin}={count}"))
            .collect();
        if !legacy.is_empty() {
            let _ = writeln!(out, "legacy:  {}", legacy.join(" "));
        }
        let warnings: u64 = self.warnings.values().sum();
        let _ = writeln!(out, "warnings: {warnings}");
        out
    }

    /// Field-by-field comparison. `Ok(vec![])` means the reports match;
    /// otherwise each entry names one differing field.
    pub fn diff(&self, other: &StatsReport) -> Result<Vec<String>, StatsError> {
        if self.scenario != other.scenario {
            return Err(StatsError::ScenarioMismatch {
                a: self.scenario.clone(),
                b: other.scenario.clone(),
            });
        }
        let mut differences = Vec::new();
        let region_names: std::collections::BTreeSet<&String> =
            self.regions.keys().chain(other.regions.keys()).collect();
        for name in region_names {
            let a = self.regions.get(name).copied().unwrap_or_default();
            let b = other.regions.get(name).copied().unwrap_or_default();
            for (field, va, vb) in [
                ("access_count", a.access_count, b.access_count),
                ("bytes_read", a.bytes_read, b.bytes_read),
                ("bytes_written", a.bytes_written, b.bytes_written),
            ] {
                if va != vb {
                    differences.push(format!("region.{name}.{field}: {va} != {vb}"));
                }
            }
        }
        let vectors: std::collections::BTreeSet<&u32> =
            self.irq_vectors.keys().chain(other.irq_vectors.keys()).collect();
        for vector in vectors {
            let a = self.irq_vectors.get(vector).copied().unwrap_or(0);
            let b = other.irq_vectors.get(vector).copied().unwrap_or(0);
            if a != b {
                differences.push(format!("irq.vector{vector}: {a} != {b}"));
            }
        }
        let pins: std::collections::BTreeSet<&String> =
            self.legacy_pins.keys().chain(other.legacy_pins.keys()).collect();
        for pin in pins {
            let a = self.legacy_pins.get(pin).copied().unwrap_or(0);
            let b = other.legacy_pins.get(pin).copied().unwrap_or(0);
            if a != b {
                differences.push(format!("legacy.{pin}: {a} != {b}"));
            }
        }
        let kinds: std::collections::BTreeSet<&String> =
            self.warnings.keys().chain(other.warnings.keys()).collect();
        for kind in kinds {
            let a = self.warnings.get(kind).copied().unwrap_or(0);
            let b = other.warnings.get(kind).copied().unwrap_or(0);
            if a != b {
                differences.push(format!("warnings.{kind}: {a} != {b}"));
            }
        }
        Ok(differences)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimTime;

    fn fold() -> StatsFoldConfig {
        StatsFoldConfig {
            doorbell_setspi_address: 0x0800_0040,
            base_spi: 64,
            num_spis: 13,
        }
    }

    fn tracer() -> Tracer {
        let kernel = Kernel::new();
        kernel.run_until(SimTime::from_ns(5));
        Tracer::enabled(kernel)
    }

    #[test]
    fn records_serialize_with_stable_field_order() {
        let t = tracer();
        t.access(TraceSource::Cpu, TraceSpace::Cfg, 0x2000_0000, Direction::Read, &[0x0B, 0x1B]);
        let mut buf = Vec::new();
        write_jsonl(&t.records(), &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(
            line,
            "{\"time_ps\":5000,\"source\":\"cpu\",\"space\":\"cfg\",\
             \"address\":\"0000000020000000\",\"length\":2,\"direction\":\"read\",\
             \"data_hex\":\"0b1b\"}\n"
        );
        let parsed = read_jsonl(line.as_bytes()).unwrap();
        assert_eq!(parsed, t.records());
    }

    #[test]
    fn empty_trace_folds_to_all_zero_report() {
        let report = StatsReport::from_trace("s", &[], &fold());
        assert!(report.regions.values().all(|r| *r == RegionStats::default()));
        assert!(report.irq_vectors.values().all(|&c| c == 0));
        assert!(report.legacy_pins.values().all(|&c| c == 0));
        assert!(report.warnings.values().all(|&c| c == 0));
    }

    #[test]
    fn region_bytes_sum_over_records() {
        let t = tracer();
        t.access(TraceSource::Cpu, TraceSpace::Mmio, 0x1000_0000, Direction::Read, &[0; 4]);
        t.access(TraceSource::Cpu, TraceSpace::Mmio, 0x1000_0008, Direction::Read, &[0; 4]);
        let report = StatsReport::from_trace("s", &t.records(), &fold());
        assert_eq!(report.regions["mmio"].bytes_read, 8);
        assert_eq!(report.regions["mmio"].access_count, 2);
        assert_eq!(report.regions["mmio"].bytes_written, 0);
    }

    #[test]
    fn doorbell_writes_count_per_vector() {
        let t = tracer();
        for value in [64u32, 65, 65, 64 + 20, 999] {
            t.access(
                TraceSource::Device,
                TraceSpace::Bus,
                0x0800_0040,
                Direction::Write,
                &value.to_le_bytes(),
            );
        }
        let report = StatsReport::from_trace("s", &t.records(), &fold());
        assert_eq!(report.irq_vectors[&0], 1);
        assert_eq!(report.irq_vectors[&1], 2);
        assert_eq!(report.irq_vectors.values().sum::<u64>(), 3);
        assert_eq!(report.regions["bus"].access_count, 5);
    }

    #[test]
    fn legacy_and_warning_records_fold() {
        let t = tracer();
        t.irq(0, true);
        t.irq(0, false);
        t.irq(0, true);
        t.warning(WarnKind::DoorbellOutOfRange);
        let report = StatsReport::from_trace("s", &t.records(), &fold());
        assert_eq!(report.legacy_pins["INTA"], 2, "rising edges only");
        assert_eq!(report.warnings["doorbell_out_of_range"], 1);
    }

    #[test]
    fn csv_round_trips() {
        let t = tracer();
        t.access(TraceSource::Cpu, TraceSpace::Cfg, 0x2000_0000, Direction::Write, &[1, 2, 3, 4]);
        t.irq(1, true);
        t.warning(WarnKind::MissingPin);
        let report = StatsReport::from_trace("round-trip", &t.records(), &fold());
        let csv = report.to_csv();
        let parsed = StatsReport::from_csv(&csv).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn diff_lists_changed_fields() {
        let t = tracer();
        t.access(TraceSource::Cpu, TraceSpace::Mmio, 0, Direction::Read, &[0; 4]);
        let a = StatsReport::from_trace("s", &t.records(), &fold());
        let mut b = a.clone();
        assert_eq!(a.diff(&b).unwrap(), Vec::<String>::new());

        *b.irq_vectors.get_mut(&1).unwrap() = 8;
        *b.warnings.get_mut("decode_overlap").unwrap() = 1;
        let diffs = a.diff(&b).unwrap();
        assert_eq!(diffs.len(), 2);
        assert!(diffs.iter().any(|d| d.starts_with("irq.vector1:")));
        assert!(diffs.iter().any(|d| d.starts_with("warnings.decode_overlap:")));
    }

    #[test]
    fn diff_rejects_mismatched_scenarios() {
        let a = StatsReport::from_trace("one", &[], &fold());
        let b = StatsReport::from_trace("two", &[], &fold());
        assert!(matches!(a.diff(&b), Err(StatsError::ScenarioMismatch { .. })));
    }
}
