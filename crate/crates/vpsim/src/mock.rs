//! Fully simulated PCI function: the "CopyCheck" DMA copy/checksum engine.
//!
//! CopyCheck exists so every passthrough mechanism — region access, DMA
//! through an IOMMU, legacy/MSI/MSI-X interrupts — can be exercised
//! deterministically without hardware. It copies LEN bytes from a
//! guest-physical source to a guest-physical destination through its
//! simulated IOMMU, taking 1 ns per byte of virtual time, and checksums the
//! data on the way.
//!
//! BAR0 register map (MEM32, 4 KiB):
//!
//! | offset | register | access |
//! |--------|----------|--------|
//! | 0x00   | ID, constant 0xC0DE0001 | RO |
//! | 0x08   | SRC, guest-physical source | RW, 64 bit |
//! | 0x10   | DST, guest-physical destination | RW, 64 bit |
//! | 0x18   | LEN, bytes to copy | RW, 32 bit |
//! | 0x1C   | CTRL: bit0 start, bit1 irq enable | RW |
//! | 0x20   | STATUS: bit0 busy, bit1 done, bit2 error | RO |
//! | 0x24   | CHECKSUM, byte sum of the copied data | RO |
//! | 0x800  | MSI-X table, 13 entries | RW |
//! | 0xC00  | MSI-X PBA | RO |
//!
//! In MSI-X mode a finished job signals vector 1 once per completed
//! 256-byte chunk and vector 0 once at completion, mirroring an
//! instruction-queue/completion interrupt split. In MSI and legacy modes
//! only the completion event is signaled.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

use crate::pci::{
    BarDefinition, ConfigSpace, ConfigSpaceBuilder, LegacyPin, MsiXTableEntry, MSIX_ENTRY_SIZE,
};
use crate::sim::{Direction, Kernel, Response, SimTime};
use crate::vpci::{BackendError, DeviceBackend, DmaPerms, DmaRegion, IrqKind, IrqMode};

pub const MOCK_VENDOR_ID: u16 = 0x1B0B;
pub const MOCK_DEVICE_ID: u16 = 0x0001;
pub const ENGINE_ID: u32 = 0xC0DE_0001;
pub const MSIX_VECTORS: u16 = 13;
pub const BAR0_SIZE: u64 = 4096;
pub const CHUNK_SIZE: u32 = 256;
/// Virtual processing cost per copied byte.
pub const NS_PER_BYTE: u64 = 1;

/// Device-side MSI message address/data the mock holds after reset. The
/// values are sentinels: a guest programs its own through the shadow
/// capability, and the two views must never bleed into each other.
pub const BACKEND_MSI_SENTINEL_ADDRESS: u64 = 0xF00D_0000_CAFE_0000;
pub const BACKEND_MSI_SENTINEL_DATA: u16 = 0x5A5A;

pub mod regs {
    pub const ID: u64 = 0x00;
    pub const SRC: u64 = 0x08;
    pub const DST: u64 = 0x10;
    pub const LEN: u64 = 0x18;
    pub const CTRL: u64 = 0x1C;
    pub const STATUS: u64 = 0x20;
    pub const CHECKSUM: u64 = 0x24;
    pub const MSIX_TABLE: u64 = 0x800;
    pub const MSIX_PBA: u64 = 0xC00;

    pub const CTRL_START: u8 = 1 << 0;
    pub const CTRL_IRQ_ENABLE: u8 = 1 << 1;
    pub const STATUS_BUSY: u32 = 1 << 0;
    pub const STATUS_DONE: u32 = 1 << 1;
    pub const STATUS_ERROR: u32 = 1 << 2;

    /// Completion vector ("job finished").
    pub const VECTOR_COMPLETION: u16 = 0;
    /// Chunk vector ("instruction queue executed"), once per 256 bytes.
    pub const VECTOR_CHUNK: u16 = 1;
}

const MSIX_TABLE_BYTES: u64 = MSIX_VECTORS as u64 * MSIX_ENTRY_SIZE as u64;
const MSIX_PBA_BYTES: u64 = 8;

/// One IOVA -> host-buffer mapping of the simulated IOMMU.
struct IommuMapping {
    iova_base: u64,
    region: DmaRegion,
    perms: DmaPerms,
}

/// The simulated IOMMU: a flat table of non-overlapping IOVA ranges.
#[derive(Default)]
pub struct SimIommu {
    mappings: Vec<IommuMapping>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("IOMMU fault at iova {iova:#x}+{len}")]
pub struct IommuFault {
    pub iova: u64,
    pub len: u64,
}

impl SimIommu {
    pub fn map(
        &mut self,
        iova: u64,
        region: DmaRegion,
        perms: DmaPerms,
    ) -> Result<(), BackendError> {
        let len = region.len as u64;
        if len == 0 {
            return Err(BackendError::InvalidArgument("empty DMA mapping".into()));
        }
        if iova.checked_add(len - 1).is_none() {
            return Err(BackendError::InvalidArgument(
                "DMA mapping wraps the address space".into(),
            ));
        }
        for m in &self.mappings {
            let m_len = m.region.len as u64;
            if iova < m.iova_base + m_len && m.iova_base < iova + len {
                return Err(BackendError::DmaMap(format!(
                    "iova range {iova:#x}+{len} overlaps existing mapping at {:#x}",
                    m.iova_base
                )));
            }
        }
        self.mappings.push(IommuMapping {
            iova_base: iova,
            region,
            perms,
        });
        Ok(())
    }

    pub fn unmap(&mut self, iova: u64, size: u64) -> Result<(), BackendError> {
        let before = self.mappings.len();
        self.mappings
            .retain(|m| !(m.iova_base == iova && m.region.len as u64 == size));
        if self.mappings.len() == before {
            return Err(BackendError::DmaUnmap(format!(
                "no mapping at iova {iova:#x} of size {size}"
            )));
        }
        Ok(())
    }

    pub fn mapping_count(&self) -> usize {
        self.mappings.len()
    }

    fn find(&self, iova: u64, len: u64, write: bool) -> Result<&IommuMapping, IommuFault> {
        let fault = IommuFault { iova, len };
        if len == 0 {
            return Err(fault);
        }
        self.mappings
            .iter()
            .find(|m| {
                let m_len = m.region.len as u64;
                iova >= m.iova_base
                    && len <= m_len
                    && iova - m.iova_base <= m_len - len
                    && if write { m.perms.write } else { m.perms.read }
            })
            .ok_or(fault)
    }

    /// Reads `out.len()` bytes from translated memory at `iova`. The whole
    /// range must fall inside a single mapping with read permission.
    pub fn read(&self, iova: u64, out: &mut [u8]) -> Result<(), IommuFault> {
        let m = self.find(iova, out.len() as u64, false)?;
        let offset = m.region.offset + (iova - m.iova_base) as usize;
        m.region.buffer.read(offset, out);
        Ok(())
    }

    /// Writes `data` to translated memory at `iova`, single mapping, write
    /// permission required.
    pub fn write(&self, iova: u64, data: &[u8]) -> Result<(), IommuFault> {
        let m = self.find(iova, data.len() as u64, true)?;
        let offset = m.region.offset + (iova - m.iova_base) as usize;
        m.region.buffer.write(offset, data);
        Ok(())
    }

    /// Translation probe without data movement.
    pub fn translate(&self, iova: u64, len: u64, write: bool) -> Result<(), IommuFault> {
        self.find(iova, len, write).map(|_| ())
    }
}

/// Timestamps and results of the most recent copy job.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JobRecord {
    pub started_at: SimTime,
    pub completed_at: SimTime,
    pub len: u32,
    pub checksum: u32,
    pub faulted: bool,
}

struct MockState {
    cfg: ConfigSpace,
    regs: Vec<u8>,
    irq_mode: IrqMode,
    irq_queue: VecDeque<IrqKind>,
    legacy_asserted: bool,
    iommu: SimIommu,
    job_seq: u64,
    last_job: Option<JobRecord>,
    readonly_writes: u64,
    unknown_writes: u64,
    ignored_starts: u64,
}

impl MockState {
    fn status(&self) -> u32 {
        u32::from_le_bytes(
            self.regs[regs::STATUS as usize..regs::STATUS as usize + 4]
                .try_into()
                .unwrap(),
        )
    }

    fn store_u32(&mut self, offset: u64, value: u32) {
        self.regs[offset as usize..offset as usize + 4].copy_from_slice(&value.to_le_bytes());
    }

    fn reg_u32(&self, offset: u64) -> u32 {
        u32::from_le_bytes(
            self.regs[offset as usize..offset as usize + 4]
                .try_into()
                .unwrap(),
        )
    }

    fn reg_u64(&self, offset: u64) -> u64 {
        u64::from_le_bytes(
            self.regs[offset as usize..offset as usize + 8]
                .try_into()
                .unwrap(),
        )
    }

    fn set_status(&mut self, busy: bool, done: bool, error: bool) {
        debug_assert!(!(busy && done), "busy and done are mutually exclusive");
        let value = ((busy as u32) * regs::STATUS_BUSY) | ((done as u32) * regs::STATUS_DONE) | ((error as u32) * regs::STATUS_ERROR);
        self.store_u32(regs::STATUS, value);
    }

    fn emit(&mut self, kind: IrqKind) {
        self.irq_queue.push_back(kind);
    }

    fn irq_enabled(&self) -> bool {
        self.regs[regs::CTRL as usize] & regs::CTRL_IRQ_ENABLE != 0
    }
}

fn initial_regs() -> Vec<u8> {
    let mut regs = vec![0u8; BAR0_SIZE as usize];
    regs[regs::ID as usize..regs::ID as usize + 4].copy_from_slice(&ENGINE_ID.to_le_bytes());
    for vector in 0..MSIX_VECTORS {
        let offset = regs::MSIX_TABLE as usize + vector as usize * MSIX_ENTRY_SIZE;
        regs[offset..offset + MSIX_ENTRY_SIZE].copy_from_slice(&MsiXTableEntry::reset().to_bytes());
    }
    regs
}

fn initial_config() -> ConfigSpace {
    ConfigSpaceBuilder::new(MOCK_VENDOR_ID, MOCK_DEVICE_ID)
        .interrupt_pin(Some(LegacyPin::A))
        .bar(BarDefinition::mem32(0, BAR0_SIZE))
        .msi_capability(BACKEND_MSI_SENTINEL_ADDRESS, BACKEND_MSI_SENTINEL_DATA)
        .msix_capability(MSIX_VECTORS, 0, regs::MSIX_TABLE, 0, regs::MSIX_PBA)
        .build()
}

/// The CopyCheck engine as a [`DeviceBackend`]. Cloning via
/// [`MockBackend::handle`] gives tests a window into the same state.
pub struct MockBackend {
    kernel: Kernel,
    state: Rc<RefCell<MockState>>,
}

/// Shared inspection handle for tests and the acceptance suite.
#[derive(Clone)]
pub struct MockHandle {
    state: Rc<RefCell<MockState>>,
}

impl MockBackend {
    pub fn new(kernel: Kernel) -> Self {
        MockBackend {
            kernel,
            state: Rc::new(RefCell::new(MockState {
                cfg: initial_config(),
                regs: initial_regs(),
                irq_mode: IrqMode::Legacy,
                irq_queue: VecDeque::new(),
                legacy_asserted: false,
                iommu: SimIommu::default(),
                job_seq: 0,
                last_job: None,
                readonly_writes: 0,
                unknown_writes: 0,
                ignored_starts: 0,
            })),
        }
    }

    pub fn handle(&self) -> MockHandle {
        MockHandle {
            state: Rc::clone(&self.state),
        }
    }

    fn trigger_start(&self) {
        let (src, dst, len, started_at) = {
            let mut state = self.state.borrow_mut();
            if state.status() & regs::STATUS_BUSY != 0 {
                state.ignored_starts += 1;
                return;
            }
            // A fresh command deasserts a still-pending legacy interrupt.
            if state.legacy_asserted {
                state.legacy_asserted = false;
                state.emit(IrqKind::Legacy { level: false });
            }
            let src = state.reg_u64(regs::SRC);
            let dst = state.reg_u64(regs::DST);
            let len = state.reg_u32(regs::LEN);
            state.set_status(true, false, false);
            state.store_u32(regs::CHECKSUM, 0);
            state.job_seq += 1;
            (src, dst, len, self.kernel.now())
        };
        let state = Rc::clone(&self.state);
        let delay = SimTime::from_ns(len as u64 * NS_PER_BYTE);
        self.kernel
            .schedule(delay, move || complete_job(&state, src, dst, len, started_at))
            .expect("mock scheduled a job after simulation end");
    }
}

/// Runs at `start + LEN ns`: performs the copy through the IOMMU, updates
/// STATUS/CHECKSUM and queues the interrupt pattern.
fn complete_job(state: &Rc<RefCell<MockState>>, src: u64, dst: u64, len: u32, started_at: SimTime) {
    let mut state = state.borrow_mut();
    let mut record = JobRecord {
        started_at,
        completed_at: started_at + SimTime::from_ns(len as u64 * NS_PER_BYTE),
        len,
        checksum: 0,
        faulted: false,
    };

    // Copy through an intermediate buffer: overlapping SRC/DST ranges get
    // memmove semantics.
    let mut data = vec![0u8; len as usize];
    let transfer = if len == 0 {
        Ok(())
    } else {
        state
            .iommu
            .read(src, &mut data)
            .and_then(|()| state.iommu.write(dst, &data))
    };

    match transfer {
        Ok(()) => {
            let checksum = data
                .iter()
                .fold(0u32, |sum, &b| sum.wrapping_add(b as u32));
            record.checksum = checksum;
            state.store_u32(regs::CHECKSUM, checksum);
            state.set_status(false, true, false);
            if state.irq_enabled() {
                let chunks = len.div_ceil(CHUNK_SIZE);
                match state.irq_mode {
                    IrqMode::Msix { .. } => {
                        for _ in 0..chunks {
                            state.emit(IrqKind::Msix {
                                vector: regs::VECTOR_CHUNK,
                            });
                        }
                        state.emit(IrqKind::Msix {
                            vector: regs::VECTOR_COMPLETION,
                        });
                    }
                    IrqMode::Msi => state.emit(IrqKind::Msi),
                    IrqMode::Legacy => {
                        state.legacy_asserted = true;
                        state.emit(IrqKind::Legacy { level: true });
                    }
                }
            }
        }
        Err(_fault) => {
            record.faulted = true;
            state.set_status(false, false, true);
            // A faulted job signals nothing: no completion, no partial
            // chunk events.
        }
    }
    state.last_job = Some(record);
}

/// Writable BAR0 byte ranges (everything else is RO or unbacked).
fn writable(offset: u64) -> bool {
    (regs::SRC..regs::CTRL + 4).contains(&offset)
        || (regs::MSIX_TABLE..regs::MSIX_TABLE + MSIX_TABLE_BYTES).contains(&offset)
}

fn readonly(offset: u64) -> bool {
    offset < 0x08
        || (regs::STATUS..regs::CHECKSUM + 4).contains(&offset)
        || (regs::MSIX_PBA..regs::MSIX_PBA + MSIX_PBA_BYTES).contains(&offset)
}

impl DeviceBackend for MockBackend {
    fn config_read(&mut self, offset: u64, data: &mut [u8]) -> Result<(), BackendError> {
        self.state
            .borrow()
            .cfg
            .read_bytes(offset as usize, data)
            .map_err(|_| BackendError::ConfigOutOfRange {
                offset,
                len: data.len(),
            })
    }

    fn config_write(&mut self, offset: u64, data: &[u8]) -> Result<(), BackendError> {
        self.state
            .borrow_mut()
            .cfg
            .write_bytes(offset as usize, data)
            .map_err(|_| BackendError::ConfigOutOfRange {
                offset,
                len: data.len(),
            })
    }

    fn region_info(&self) -> Vec<BarDefinition> {
        vec![BarDefinition::mem32(0, BAR0_SIZE)]
    }

    fn region_access(
        &mut self,
        bar: u8,
        offset: u64,
        direction: Direction,
        data: &mut [u8],
    ) -> Response {
        if bar != 0 {
            return Response::AddressError;
        }
        let len = data.len() as u64;
        if len == 0 || offset >= BAR0_SIZE || len > BAR0_SIZE - offset {
            return Response::AddressError;
        }
        match direction {
            Direction::Read => {
                let state = self.state.borrow();
                data.copy_from_slice(&state.regs[offset as usize..(offset + len) as usize]);
            }
            Direction::Write => {
                let mut start_triggered = false;
                {
                    let mut state = self.state.borrow_mut();
                    for (i, &byte) in data.iter().enumerate() {
                        let o = offset + i as u64;
                        if writable(o) {
                            let byte = if o == regs::CTRL {
                                // The start bit is momentary: act on it, but
                                // never store it.
                                start_triggered |= byte & regs::CTRL_START != 0;
                                byte & !regs::CTRL_START
                            } else {
                                byte
                            };
                            state.regs[o as usize] = byte;
                        } else if readonly(o) {
                            state.readonly_writes += 1;
                        } else {
                            state.unknown_writes += 1;
                        }
                    }
                }
                if start_triggered {
                    self.trigger_start();
                }
            }
        }
        Response::Ok
    }

    fn map_dma(
        &mut self,
        iova: u64,
        region: DmaRegion,
        perms: DmaPerms,
    ) -> Result<(), BackendError> {
        self.state.borrow_mut().iommu.map(iova, region, perms)
    }

    fn unmap_dma(&mut self, iova: u64, size: u64) -> Result<(), BackendError> {
        self.state.borrow_mut().iommu.unmap(iova, size)
    }

    fn irq_setup(&mut self, mode: IrqMode) -> Result<(), BackendError> {
        if let IrqMode::Msix { vectors } = mode {
            if vectors == 0 || vectors > MSIX_VECTORS {
                return Err(BackendError::IrqSetup(format!(
                    "device supports 1..={MSIX_VECTORS} MSI-X vectors, not {vectors}"
                )));
            }
        }
        self.state.borrow_mut().irq_mode = mode;
        Ok(())
    }

    fn poll_irqs(&mut self) -> Vec<IrqKind> {
        self.state.borrow_mut().irq_queue.drain(..).collect()
    }

    fn reset(&mut self) {
        let mut state = self.state.borrow_mut();
        state.cfg = initial_config();
        state.regs = initial_regs();
        state.irq_mode = IrqMode::Legacy;
        state.irq_queue.clear();
        state.legacy_asserted = false;
        state.last_job = None;
    }
}

impl MockHandle {
    pub fn last_job(&self) -> Option<JobRecord> {
        self.state.borrow().last_job
    }

    pub fn irq_mode(&self) -> IrqMode {
        self.state.borrow().irq_mode
    }

    pub fn readonly_writes(&self) -> u64 {
        self.state.borrow().readonly_writes
    }

    pub fn unknown_writes(&self) -> u64 {
        self.state.borrow().unknown_writes
    }

    pub fn ignored_starts(&self) -> u64 {
        self.state.borrow().ignored_starts
    }

    pub fn iommu_mappings(&self) -> usize {
        self.state.borrow().iommu.mapping_count()
    }

    pub fn pending_irqs(&self) -> usize {
        self.state.borrow().irq_queue.len()
    }

    /// Little-endian value read straight from the device-side config space,
    /// bypassing any shadow a passthrough model keeps in front of it.
    pub fn config_value(&self, offset: usize, width: usize) -> u64 {
        self.state.borrow().cfg.read(offset, width).unwrap()
    }

    /// Device-side view of its own MSI message address: must stay at the
    /// sentinel no matter what the guest programs into the shadow.
    pub fn msi_backend_address(&self) -> u64 {
        let state = self.state.borrow();
        let msi = crate::pci::MsiCapability::locate(&state.cfg)
            .expect("mock config is well formed")
            .expect("mock has an MSI capability");
        msi.message_address(&state.cfg)
    }

    /// Raw translation probe against the simulated IOMMU.
    pub fn translate(&self, iova: u64, len: u64, write: bool) -> Result<(), IommuFault> {
        self.state.borrow().iommu.translate(iova, len, write)
    }

    pub fn dma_read(&self, iova: u64, out: &mut [u8]) -> Result<(), IommuFault> {
        self.state.borrow().iommu.read(iova, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::HostBuffer;
    use rand::{Rng, SeedableRng};

    struct Rig {
        kernel: Kernel,
        backend: MockBackend,
        handle: MockHandle,
        ram: HostBuffer,
    }

    /// Mock wired to a 64 KiB buffer mapped at IOVA 0x4000_0000, MSI-X
    /// mode, IRQs enabled.
    fn rig() -> Rig {
        let kernel = Kernel::new();
        let mut backend = MockBackend::new(kernel.clone());
        let handle = backend.handle();
        let ram = HostBuffer::zeroed(0x10000);
        backend
            .map_dma(0x4000_0000, DmaRegion::whole(ram.clone()), DmaPerms::RW)
            .unwrap();
        backend
            .irq_setup(IrqMode::Msix {
                vectors: MSIX_VECTORS,
            })
            .unwrap();
        Rig {
            kernel,
            backend,
            handle,
            ram,
        }
    }

    fn write_reg(backend: &mut MockBackend, offset: u64, value: u64, width: usize) {
        let bytes = value.to_le_bytes();
        let mut data = bytes[..width].to_vec();
        assert_eq!(
            backend.region_access(0, offset, Direction::Write, &mut data),
            Response::Ok
        );
    }

    fn read_reg(backend: &mut MockBackend, offset: u64, width: usize) -> u64 {
        let mut data = vec![0u8; width];
        assert_eq!(
            backend.region_access(0, offset, Direction::Read, &mut data),
            Response::Ok
        );
        let mut value = 0u64;
        for (i, b) in data.iter().enumerate() {
            value |= (*b as u64) << (8 * i);
        }
        value
    }

    fn start_job(rig: &mut Rig, src: u64, dst: u64, len: u32) {
        write_reg(&mut rig.backend, regs::SRC, src, 8);
        write_reg(&mut rig.backend, regs::DST, dst, 8);
        write_reg(&mut rig.backend, regs::LEN, len as u64, 4);
        write_reg(
            &mut rig.backend,
            regs::CTRL,
            (regs::CTRL_START | regs::CTRL_IRQ_ENABLE) as u64,
            1,
        );
    }

    fn drain_counts(backend: &mut MockBackend) -> (u64, u64) {
        let mut chunk = 0;
        let mut completion = 0;
        for kind in backend.poll_irqs() {
            match kind {
                IrqKind::Msix { vector } if vector == regs::VECTOR_CHUNK => chunk += 1,
                IrqKind::Msix { vector } if vector == regs::VECTOR_COMPLETION => completion += 1,
                other => panic!("unexpected event {other:?}"),
            }
        }
        (chunk, completion)
    }

    #[test]
    fn id_register_reads_the_engine_constant() {
        let mut rig = rig();
        assert_eq!(read_reg(&mut rig.backend, regs::ID, 4), ENGINE_ID as u64);
    }

    #[test]
    fn status_writes_are_ignored_and_counted() {
        let mut rig = rig();
        write_reg(&mut rig.backend, regs::STATUS, 0xFF, 4);
        assert_eq!(read_reg(&mut rig.backend, regs::STATUS, 4), 0);
        assert_eq!(rig.handle.readonly_writes(), 4);
    }

    #[test]
    fn unknown_offsets_read_zero_and_count_writes() {
        let mut rig = rig();
        assert_eq!(read_reg(&mut rig.backend, 0x100, 4), 0);
        write_reg(&mut rig.backend, 0x100, 0xABCD, 4);
        assert_eq!(read_reg(&mut rig.backend, 0x100, 4), 0);
        assert_eq!(rig.handle.unknown_writes(), 4);
    }

    #[test]
    fn msix_table_stores_verbatim() {
        let mut rig = rig();
        let entry = MsiXTableEntry {
            message_address: 0x0800_0040,
            message_data: 65,
            masked: false,
        };
        let mut bytes = entry.to_bytes().to_vec();
        rig.backend
            .region_access(0, regs::MSIX_TABLE + 16, Direction::Write, &mut bytes);
        let mut readback = vec![0u8; 16];
        rig.backend
            .region_access(0, regs::MSIX_TABLE + 16, Direction::Read, &mut readback);
        assert_eq!(MsiXTableEntry::from_bytes(&readback.try_into().unwrap()), entry);
    }

    #[test]
    fn small_job_checksums_and_signals() {
        let mut rig = rig();
        rig.ram.write(0, &[1, 2, 3]);
        start_job(&mut rig, 0x4000_0000, 0x4000_1000, 3);
        assert_eq!(
            read_reg(&mut rig.backend, regs::STATUS, 4),
            regs::STATUS_BUSY as u64
        );
        rig.kernel.run_until(SimTime::from_us(1));
        assert_eq!(
            read_reg(&mut rig.backend, regs::STATUS, 4),
            regs::STATUS_DONE as u64
        );
        assert_eq!(read_reg(&mut rig.backend, regs::CHECKSUM, 4), 6);
        assert_eq!(rig.ram.read_byte(0x1000), 1);
        assert_eq!(rig.ram.read_byte(0x1002), 3);
        let (chunks, completions) = drain_counts(&mut rig.backend);
        assert_eq!((chunks, completions), (1, 1));
    }

    #[test]
    fn chunk_events_follow_the_ceiling_rule() {
        let mut rig = rig();
        start_job(&mut rig, 0x4000_0000, 0x4000_8000, 1000);
        rig.kernel.run_until(SimTime::from_us(10));
        let (chunks, completions) = drain_counts(&mut rig.backend);
        assert_eq!(chunks, 4, "ceil(1000 / 256)");
        assert_eq!(completions, 1);
    }

    #[test]
    fn unmapped_source_faults_without_events() {
        let mut rig = rig();
        start_job(&mut rig, 0x9000_0000, 0x4000_0000, 64);
        rig.kernel.run_until(SimTime::from_us(1));
        let status = read_reg(&mut rig.backend, regs::STATUS, 4) as u32;
        assert_eq!(status, regs::STATUS_ERROR);
        assert_eq!(rig.backend.poll_irqs(), vec![]);
        assert!(rig.handle.last_job().unwrap().faulted);
    }

    #[test]
    fn completion_takes_exactly_len_nanoseconds() {
        let mut rig = rig();
        rig.kernel.run_until(SimTime::from_ns(123));
        start_job(&mut rig, 0x4000_0000, 0x4000_4000, 4096);
        rig.kernel.run_until(SimTime::from_ms(1));
        let job = rig.handle.last_job().unwrap();
        assert_eq!(job.started_at, SimTime::from_ns(123));
        assert_eq!(job.completed_at - job.started_at, SimTime::from_ns(4096));
    }

    #[test]
    fn zero_length_job_completes_instantly_with_no_chunks() {
        let mut rig = rig();
        start_job(&mut rig, 0x4000_0000, 0x4000_1000, 0);
        rig.kernel.run_until(SimTime::ZERO);
        assert_eq!(
            read_reg(&mut rig.backend, regs::STATUS, 4),
            regs::STATUS_DONE as u64
        );
        assert_eq!(read_reg(&mut rig.backend, regs::CHECKSUM, 4), 0);
        let (chunks, completions) = drain_counts(&mut rig.backend);
        assert_eq!((chunks, completions), (0, 1));
    }

    #[test]
    fn irq_disable_suppresses_events_but_not_the_job() {
        let mut rig = rig();
        rig.ram.write(0, &[7; 16]);
        write_reg(&mut rig.backend, regs::SRC, 0x4000_0000, 8);
        write_reg(&mut rig.backend, regs::DST, 0x4000_0100, 8);
        write_reg(&mut rig.backend, regs::LEN, 16, 4);
        write_reg(&mut rig.backend, regs::CTRL, regs::CTRL_START as u64, 1);
        rig.kernel.run_until(SimTime::from_us(1));
        assert_eq!(
            read_reg(&mut rig.backend, regs::STATUS, 4),
            regs::STATUS_DONE as u64
        );
        assert_eq!(rig.backend.poll_irqs(), vec![]);
    }

    #[test]
    fn start_while_busy_is_ignored() {
        let mut rig = rig();
        start_job(&mut rig, 0x4000_0000, 0x4000_1000, 1024);
        write_reg(
            &mut rig.backend,
            regs::CTRL,
            (regs::CTRL_START | regs::CTRL_IRQ_ENABLE) as u64,
            1,
        );
        assert_eq!(rig.handle.ignored_starts(), 1);
        rig.kernel.run_until(SimTime::from_ms(1));
        let (_, completions) = drain_counts(&mut rig.backend);
        assert_eq!(completions, 1, "only one job ran");
    }

    #[test]
    fn legacy_mode_asserts_once_per_job_and_deasserts_on_next_start() {
        let mut rig = rig();
        rig.backend.irq_setup(IrqMode::Legacy).unwrap();
        start_job(&mut rig, 0x4000_0000, 0x4000_1000, 8);
        rig.kernel.run_until(SimTime::from_us(1));
        assert_eq!(
            rig.backend.poll_irqs(),
            vec![IrqKind::Legacy { level: true }]
        );

        start_job(&mut rig, 0x4000_0000, 0x4000_1000, 8);
        rig.kernel.run_until(SimTime::from_us(2));
        assert_eq!(
            rig.backend.poll_irqs(),
            vec![
                IrqKind::Legacy { level: false },
                IrqKind::Legacy { level: true }
            ]
        );
    }

    #[test]
    fn msi_mode_signals_completion_only() {
        let mut rig = rig();
        rig.backend.irq_setup(IrqMode::Msi).unwrap();
        start_job(&mut rig, 0x4000_0000, 0x4000_8000, 1000);
        rig.kernel.run_until(SimTime::from_us(10));
        assert_eq!(rig.backend.poll_irqs(), vec![IrqKind::Msi]);
    }

    #[test]
    fn msix_setup_rejects_too_many_vectors() {
        let mut rig = rig();
        assert!(rig.backend.irq_setup(IrqMode::Msix { vectors: 14 }).is_err());
        assert!(rig.backend.irq_setup(IrqMode::Msix { vectors: 13 }).is_ok());
    }

    #[test]
    fn iommu_translation_brute_force_over_a_page() {
        let rig = rig();
        // Distinct bytes across a 4 KiB window, then compare the
        // device-visible byte at every single IOVA against the buffer.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let page: Vec<u8> = (0..4096).map(|_| rng.gen()).collect();
        rig.ram.write(0x2000, &page);
        for (i, &expected) in page.iter().enumerate() {
            let mut byte = [0u8; 1];
            rig.handle
                .dma_read(0x4000_2000 + i as u64, &mut byte)
                .unwrap();
            assert_eq!(byte[0], expected, "iova offset {i:#x}");
        }
    }

    #[test]
    fn iommu_faults_on_straddle_and_empty_table() {
        let rig = rig();
        // Straddling the end of the only mapping faults.
        assert!(rig.handle.translate(0x4000_0000 + 0xFFFF, 2, false).is_err());
        assert!(rig.handle.translate(0x4000_0000 + 0xFFFF, 1, false).is_ok());

        let empty = MockBackend::new(Kernel::new());
        assert!(empty.handle().translate(0x4000_0000, 1, false).is_err());
    }

    #[test]
    fn overlapping_dma_map_is_rejected() {
        let mut rig = rig();
        let other = HostBuffer::zeroed(0x1000);
        let err = rig
            .backend
            .map_dma(0x4000_0800, DmaRegion::whole(other), DmaPerms::RW)
            .unwrap_err();
        assert!(matches!(err, BackendError::DmaMap(_)));
    }

    #[test]
    fn config_space_has_the_sentinel_msi_address() {
        let rig = rig();
        assert_eq!(rig.handle.msi_backend_address(), BACKEND_MSI_SENTINEL_ADDRESS);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        /// Copy correctness and checksum against independent oracles, with
        /// overlapping ranges allowed (memmove semantics).
        #[test]
        fn copy_matches_the_byte_oracle(
            src_off in 0u64..0x4000,
            dst_off in 0u64..0x4000,
            len in 0u32..2048,
            seed in proptest::num::u64::ANY,
        ) {
            let mut rig = rig();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let image: Vec<u8> = (0..0x8000).map(|_| rng.gen()).collect();
            rig.ram.write(0, &image);

            // Oracle: plain Vec arithmetic on a copy of the image.
            let mut expected = image.clone();
            let window: Vec<u8> =
                expected[src_off as usize..(src_off + len as u64) as usize].to_vec();
            expected[dst_off as usize..(dst_off + len as u64) as usize]
                .copy_from_slice(&window);
            let expected_checksum: u32 = window
                .iter()
                .fold(0u32, |sum, &b| sum.wrapping_add(b as u32));

            start_job(&mut rig, 0x4000_0000 + src_off, 0x4000_0000 + dst_off, len);
            rig.kernel.run_until(SimTime::from_ms(1));

            let actual = rig.ram.with_slice(|s| s[..0x8000].to_vec());
            proptest::prop_assert_eq!(&actual, &expected);
            let job = rig.handle.last_job().unwrap();
            proptest::prop_assert_eq!(job.checksum, expected_checksum);
            proptest::prop_assert!(!job.faulted);

            let (chunks, completions) = drain_counts(&mut rig.backend);
            proptest::prop_assert_eq!(chunks, len.div_ceil(CHUNK_SIZE) as u64);
            proptest::prop_assert_eq!(completions, 1);
        }
    }
}
