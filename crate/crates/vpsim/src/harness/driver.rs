//! The scripted driver: stands in for a guest OS, performing enumeration,
//! BAR sizing and placement, capability discovery, MSI-X programming, DMA
//! window setup and the copy-engine workload, with self-checks at every
//! step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bridge::CfgAddress;
use crate::mock::{regs, CHUNK_SIZE, ENGINE_ID, MOCK_DEVICE_ID, MOCK_VENDOR_ID};
use crate::pci::{command, reg, CAP_ID_MSI, CAP_ID_MSIX};

use crate::vpci::DmaWindow;

use super::platform::{CpuPort, Platform};

/// Default pseudorandom fill seed; fixed so golden traces stay stable.
pub const DEFAULT_SEED: u64 = 0xC0FF_EE00;
pub const DEFAULT_LEN: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    /// Full MSI-X bring-up and one copy job.
    EnumerateAndRun,
    /// MSI-X left disabled; the job completes through INTA.
    Legacy,
    /// The completion vector starts masked; its delivery is deferred to the
    /// unmask.
    MaskedVector,
    /// Backend-agnostic smoke run: identity, BAR sizing, DMA window.
    Probe,
}

impl ScenarioKind {
    pub const ALL: [(&'static str, ScenarioKind); 4] = [
        ("enumerate-and-run", ScenarioKind::EnumerateAndRun),
        ("legacy", ScenarioKind::Legacy),
        ("masked-vector", ScenarioKind::MaskedVector),
        ("probe", ScenarioKind::Probe),
    ];

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, kind)| *kind)
    }

    pub fn name(self) -> &'static str {
        Self::ALL
            .iter()
            .find(|(_, kind)| *kind == self)
            .map(|(name, _)| *name)
            .unwrap()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScenarioOptions {
    pub len: u32,
    pub seed: u64,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions {
            len: DEFAULT_LEN,
            seed: DEFAULT_SEED,
        }
    }
}

/// A failed driver self-check: the first failing step, with detail.
#[derive(Debug, Clone, thiserror::Error)]
#[error("step {step:?}: {detail}")]
pub struct CheckFailure {
    pub step: String,
    pub detail: String,
}

struct Driver<'p> {
    platform: &'p Platform,
    cpu: CpuPort,
    cfg: u64,
    bar0: u64,
    steps: Vec<String>,
    msi_cap: Option<u64>,
    msix_cap: Option<u64>,
}

type StepResult<T = ()> = Result<T, CheckFailure>;

impl<'p> Driver<'p> {
    fn new(platform: &'p Platform) -> Self {
        let cfg = platform.config.pci_host.cfg_base
            + CfgAddress {
                device_slot: 0,
                function: 0,
                register_offset: 0,
            }
            .pack();
        Driver {
            platform,
            cpu: platform.cpu(),
            cfg,
            bar0: platform.config.pci_host.mmio_window_base,
            steps: Vec::new(),
            msi_cap: None,
            msix_cap: None,
        }
    }

    fn fail(step: &str, detail: impl Into<String>) -> CheckFailure {
        CheckFailure {
            step: step.to_string(),
            detail: detail.into(),
        }
    }

    fn check(&mut self, step: &str, ok: bool, detail: impl Into<String>) -> StepResult {
        if ok {
            self.steps.push(step.to_string());
            Ok(())
        } else {
            Err(Self::fail(step, detail))
        }
    }

    fn cfg_read32(&self, offset: u64) -> StepResult<u32> {
        self.cpu
            .read_u32(self.cfg + offset)
            .map_err(|e| Self::fail("config-read", e.to_string()))
    }

    fn cfg_write32(&self, offset: u64, value: u32) -> StepResult {
        self.cpu
            .write_u32(self.cfg + offset, value)
            .map_err(|e| Self::fail("config-write", e.to_string()))
    }

    fn cfg_read16(&self, offset: u64) -> StepResult<u16> {
        self.cpu
            .read_u16(self.cfg + offset)
            .map_err(|e| Self::fail("config-read", e.to_string()))
    }

    fn cfg_write16(&self, offset: u64, value: u16) -> StepResult {
        self.cpu
            .write_u16(self.cfg + offset, value)
            .map_err(|e| Self::fail("config-write", e.to_string()))
    }

    fn mmio_read32(&self, offset: u64) -> StepResult<u32> {
        self.cpu
            .read_u32(self.bar0 + offset)
            .map_err(|e| Self::fail("mmio-read", e.to_string()))
    }

    fn mmio_write32(&self, offset: u64, value: u32) -> StepResult {
        self.cpu
            .write_u32(self.bar0 + offset, value)
            .map_err(|e| Self::fail("mmio-write", e.to_string()))
    }

    /// Vendor/device identification.
    fn identify(&mut self, expect_mock: bool) -> StepResult {
        let id = self.cfg_read32(reg::VENDOR_ID as u64)?;
        if expect_mock {
            let expected = (MOCK_DEVICE_ID as u32) << 16 | MOCK_VENDOR_ID as u32;
            self.check(
                "vendor-id",
                id == expected,
                format!("read {id:#010x}, expected {expected:#010x}"),
            )
        } else {
            let vendor = id as u16;
            self.check(
                "vendor-id",
                vendor != 0 && vendor != 0xFFFF,
                format!("implausible vendor id {vendor:#06x}"),
            )
        }
    }

    /// Sizes every BAR with the all-ones probe, restoring the original
    /// value. Returns (index, size) for implemented BARs.
    fn size_bars(&mut self) -> StepResult<Vec<(u8, u64)>> {
        let mut sizes = Vec::new();
        for index in 0..6u8 {
            let offset = (reg::BAR0 + index as usize * 4) as u64;
            let original = self.cfg_read32(offset)?;
            self.cfg_write32(offset, 0xFFFF_FFFF)?;
            let mask = self.cfg_read32(offset)?;
            self.cfg_write32(offset, original)?;
            if mask == 0 {
                continue;
            }
            let size = if mask & 0x1 != 0 {
                (!(mask & !0x3)).wrapping_add(1) as u64
            } else {
                (!(mask & !0xF)).wrapping_add(1) as u64
            };
            sizes.push((index, size));
        }
        self.steps.push("bar-sizing".to_string());
        Ok(sizes)
    }

    /// Programs BAR0 and enables memory decode plus bus mastering.
    fn place_and_enable(&mut self) -> StepResult {
        self.cfg_write32(reg::BAR0 as u64, self.bar0 as u32)?;
        let readback = self.cfg_read32(reg::BAR0 as u64)?;
        self.check(
            "program-bars",
            readback == self.bar0 as u32,
            format!("BAR0 reads {readback:#x} after programming {:#x}", self.bar0),
        )?;
        self.cfg_write16(
            reg::COMMAND as u64,
            command::MEM_ENABLE | command::BUS_MASTER,
        )?;
        self.steps.push("enable-device".to_string());
        Ok(())
    }

    /// Walks the capability chain through config reads.
    fn walk_capabilities(&mut self) -> StepResult {
        let status = self.cfg_read16(reg::STATUS as u64)?;
        if status & crate::pci::status::CAPABILITIES != 0 {
            let mut pointer = (self.cfg_read32(reg::CAPABILITIES_POINTER as u64)? & 0xFC) as u64;
            let mut visited = 0;
            while pointer != 0 {
                if visited > 64 {
                    return Err(Self::fail("capability-walk", "capability chain loops"));
                }
                visited += 1;
                let header = self.cfg_read32(pointer)?;
                match (header & 0xFF) as u8 {
                    CAP_ID_MSI => self.msi_cap = Some(pointer),
                    CAP_ID_MSIX => self.msix_cap = Some(pointer),
                    _ => {}
                }
                pointer = ((header >> 8) & 0xFC) as u64;
            }
        }
        self.steps.push("capability-walk".to_string());
        Ok(())
    }

    fn msix_geometry(&self) -> StepResult<(u16, u64)> {
        let cap = self
            .msix_cap
            .ok_or_else(|| Self::fail("program-msix", "device has no MSI-X capability"))?;
        let ctrl = self.cfg_read16(cap + 2)?;
        let table = self.cfg_read32(cap + 4)?;
        let table_offset = (table & !0x7) as u64;
        Ok(((ctrl & 0x7FF) + 1, table_offset))
    }

    /// Writes the MSI-X table: vector v -> doorbell SETSPI with interrupt
    /// number base_spi + v. `masked` names vectors left masked.
    fn program_msix(&mut self, masked: &[u16]) -> StepResult {
        let (vectors, table_offset) = self.msix_geometry()?;
        let doorbell = self.platform.config.doorbell_setspi_address();
        let base_spi = self.platform.config.msi.base_spi;
        for vector in 0..vectors {
            let entry = table_offset + vector as u64 * 16;
            self.mmio_write32(entry, doorbell as u32)?;
            self.mmio_write32(entry + 4, (doorbell >> 32) as u32)?;
            self.mmio_write32(entry + 8, base_spi + vector as u32)?;
            let mask = masked.contains(&vector) as u32;
            self.mmio_write32(entry + 12, mask)?;
        }
        let cap = self.msix_cap.unwrap();
        let ctrl = self.cfg_read16(cap + 2)?;
        self.cfg_write16(cap + 2, ctrl | 0x8000)?;
        self.steps.push("program-msix".to_string());
        Ok(())
    }

    fn setup_dma_window(&mut self) -> StepResult {
        let window = DmaWindow {
            guest_base: self.platform.config.dma_window.base,
            size: self.platform.config.dma_window.size,
        };
        self.platform
            .device
            .setup_dma_window(window)
            .map_err(|e| Self::fail("dma-window", e.to_string()))?;
        self.steps.push("dma-window".to_string());
        Ok(())
    }

    /// Buffer placement inside the DMA window.
    fn buffers(&self, len: u32) -> StepResult<(u64, u64)> {
        let window = &self.platform.config.dma_window;
        let quarter = (window.size / 4) & !0xFFF;
        if quarter < len as u64 {
            return Err(Self::fail(
                "fill-source",
                format!("DMA window too small for a {len}-byte job"),
            ));
        }
        Ok((window.base + quarter, window.base + 2 * quarter))
    }

    /// Fills the source buffer with seeded pseudorandom bytes via bus
    /// writes; returns the generated image.
    fn fill_source(&mut self, src: u64, len: u32, seed: u64) -> StepResult<Vec<u8>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        for (i, chunk) in data.chunks(8).enumerate() {
            self.cpu
                .write(src + i as u64 * 8, chunk)
                .map_err(|e| Self::fail("fill-source", e.to_string()))?;
        }
        self.steps.push("fill-source".to_string());
        Ok(data)
    }

    fn start_job(&mut self, src: u64, dst: u64, len: u32, irq_enable: bool) -> StepResult {
        self.mmio_write32(regs::SRC, src as u32)?;
        self.mmio_write32(regs::SRC + 4, (src >> 32) as u32)?;
        self.mmio_write32(regs::DST, dst as u32)?;
        self.mmio_write32(regs::DST + 4, (dst >> 32) as u32)?;
        self.mmio_write32(regs::LEN, len)?;
        let ctrl = regs::CTRL_START | if irq_enable { regs::CTRL_IRQ_ENABLE } else { 0 };
        self.mmio_write32(regs::CTRL, ctrl as u32)?;
        self.steps.push("start-job".to_string());
        Ok(())
    }

    /// Runs virtual time forward until `done` holds or the scenario
    /// timeout expires.
    fn wait_until(&mut self, step: &str, mut done: impl FnMut(&Platform) -> bool) -> StepResult {
        let deadline = self.cpu.now() + self.platform.config.timeout;
        while !done(self.platform) {
            if self.cpu.now() >= deadline {
                return Err(Self::fail(
                    step,
                    format!("virtual-time timeout after {}", self.platform.config.timeout),
                ));
            }
            self.cpu.advance(self.platform.config.quantum);
        }
        self.steps.push(step.to_string());
        Ok(())
    }

    /// STATUS, CHECKSUM and byte-exact copy verification.
    fn verify_job(&mut self, dst: u64, expected: &[u8]) -> StepResult {
        let status = self.mmio_read32(regs::STATUS)?;
        self.check(
            "status-done",
            status == regs::STATUS_DONE,
            format!("STATUS reads {status:#x}"),
        )?;
        let checksum = self.mmio_read32(regs::CHECKSUM)?;
        let expected_sum = expected
            .iter()
            .fold(0u32, |sum, &b| sum.wrapping_add(b as u32));
        self.check(
            "checksum",
            checksum == expected_sum,
            format!("CHECKSUM {checksum:#x}, expected {expected_sum:#x}"),
        )?;
        let mut copied = Vec::with_capacity(expected.len());
        let mut offset = 0u64;
        while (offset as usize) < expected.len() {
            let take = (expected.len() - offset as usize).min(8);
            let bytes = self
                .cpu
                .read(dst + offset, take)
                .map_err(|e| Self::fail("copy-verify", e.to_string()))?;
            copied.extend_from_slice(&bytes);
            offset += take as u64;
        }
        self.check(
            "copy-verify",
            copied == expected,
            "destination bytes differ from source",
        )
    }
}

/// Outcome of a scenario's driver script.
#[derive(Debug, Clone)]
pub struct DriverReport {
    pub steps: Vec<String>,
}

pub fn run(platform: &Platform, kind: ScenarioKind, options: ScenarioOptions) -> Result<DriverReport, CheckFailure> {
    let mut driver = Driver::new(platform);
    match kind {
        ScenarioKind::EnumerateAndRun => enumerate_and_run(&mut driver, options)?,
        ScenarioKind::Legacy => legacy(&mut driver, options)?,
        ScenarioKind::MaskedVector => masked_vector(&mut driver, options)?,
        ScenarioKind::Probe => probe(&mut driver)?,
    }
    Ok(DriverReport {
        steps: driver.steps,
    })
}

fn bring_up(driver: &mut Driver, options: ScenarioOptions) -> StepResult<(u64, u64, Vec<u8>)> {
    driver.identify(true)?;
    let sizes = driver.size_bars()?;
    if sizes.first() != Some(&(0u8, crate::mock::BAR0_SIZE)) {
        return Err(Driver::fail(
            "bar-sizing",
            format!("unexpected BAR layout {sizes:?}"),
        ));
    }
    driver.place_and_enable()?;
    driver.walk_capabilities()?;
    let id = driver.mmio_read32(regs::ID)?;
    driver.check(
        "engine-id",
        id == ENGINE_ID,
        format!("BAR0 ID register reads {id:#010x}"),
    )?;
    driver.setup_dma_window()?;
    let (src, dst) = driver.buffers(options.len)?;
    let data = driver.fill_source(src, options.len, options.seed)?;
    Ok((src, dst, data))
}

fn enumerate_and_run(driver: &mut Driver, options: ScenarioOptions) -> StepResult {
    let (src, dst, data) = bring_up(driver, options)?;
    driver.program_msix(&[])?;

    let completion_before = driver.platform.msi.counter(0);
    let chunks_before = driver.platform.msi.counter(1);
    driver.start_job(src, dst, options.len, true)?;
    driver.wait_until("completion-wait", |p| p.msi.counter(0) > completion_before)?;
    driver.verify_job(dst, &data)?;

    let chunk_count = driver.platform.msi.counter(1) - chunks_before;
    let completion_count = driver.platform.msi.counter(0) - completion_before;
    let expected_chunks = options.len.div_ceil(CHUNK_SIZE) as u64;
    driver.check(
        "irq-counts",
        chunk_count == expected_chunks && completion_count == 1,
        format!(
            "chunk vector fired {chunk_count} times (expected {expected_chunks}), \
             completion {completion_count} (expected 1)"
        ),
    )
}

fn legacy(driver: &mut Driver, options: ScenarioOptions) -> StepResult {
    let (src, dst, data) = bring_up(driver, options)?;
    let pin = driver.cfg_read32(0x3C)? >> 8 & 0xFF;
    driver.check("legacy-pin", pin == 1, format!("interrupt pin reads {pin}"))?;

    let inta = driver
        .platform
        .bridge
        .intx_line(crate::pci::LegacyPin::A);
    let edges_before = inta.rising_edges();
    driver.start_job(src, dst, options.len, true)?;
    driver.wait_until("inta-wait", |_| inta.rising_edges() > edges_before)?;
    driver.verify_job(dst, &data)?;
    driver.check(
        "inta-once",
        inta.rising_edges() - edges_before == 1,
        format!("INTA rose {} times", inta.rising_edges() - edges_before),
    )?;
    let doorbells: u64 = (0..driver.platform.config.msi.num_spis)
        .map(|v| driver.platform.msi.counter(v))
        .sum();
    driver.check(
        "no-doorbells",
        doorbells == 0,
        format!("{doorbells} doorbell pulses in the legacy variant"),
    )
}

fn masked_vector(driver: &mut Driver, options: ScenarioOptions) -> StepResult {
    let (src, dst, data) = bring_up(driver, options)?;
    // Vector 0 (completion) stays masked; the chunk vector is live.
    driver.program_msix(&[0])?;

    let chunks_before = driver.platform.msi.counter(1);
    let expected_chunks = options.len.div_ceil(CHUNK_SIZE) as u64;
    driver.start_job(src, dst, options.len, true)?;
    driver.wait_until("chunk-wait", |p| {
        p.msi.counter(1) - chunks_before >= expected_chunks
    })?;
    driver.verify_job(dst, &data)?;

    driver.check(
        "vector0-deferred",
        driver.platform.msi.counter(0) == 0,
        "completion doorbell fired while masked",
    )?;
    let (_, table_offset) = driver.msix_geometry()?;
    let pba = driver.mmio_read32(regs::MSIX_PBA)?;
    driver.check(
        "pba-pending",
        pba & 0x1 == 1,
        format!("PBA reads {pba:#x}, pending bit 0 clear"),
    )?;

    // Unmask the completion vector: exactly one deferred doorbell write.
    driver.mmio_write32(table_offset + 12, 0)?;
    driver.check(
        "replay-once",
        driver.platform.msi.counter(0) == 1,
        format!("completion fired {} times after unmask", driver.platform.msi.counter(0)),
    )?;
    let pba = driver.mmio_read32(regs::MSIX_PBA)?;
    driver.check(
        "pba-cleared",
        pba & 0x1 == 0,
        format!("PBA still reads {pba:#x} after the replay"),
    )
}

/// Works against any backend: no engine-specific registers.
fn probe(driver: &mut Driver) -> StepResult {
    driver.identify(false)?;
    let sizes = driver.size_bars()?;
    driver.check(
        "bar-present",
        !sizes.is_empty(),
        "device advertises no usable BAR",
    )?;
    driver.walk_capabilities()?;
    driver.setup_dma_window()?;
    Ok(())
}
