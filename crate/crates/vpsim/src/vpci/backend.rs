//! The backend interface a passthrough device model drives.
//!
//! A backend is whatever sits behind the model: the fully simulated mock
//! engine, or a physical function reached through the Linux VFIO driver.
//! The surface is the same either way — config access, region access, DMA
//! (IOMMU) mapping, and interrupt delivery.

use crate::pci::BarDefinition;
use crate::sim::{Direction, HostBuffer, Response, SimTime};

/// Interrupt delivery mode a backend is configured for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrqMode {
    Legacy,
    Msi,
    Msix { vectors: u16 },
}

/// One device interrupt, as drained from a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrqKind {
    Legacy { level: bool },
    Msi,
    Msix { vector: u16 },
}

/// An interrupt occurrence stamped with the virtual time it was injected
/// into the platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IrqEvent {
    pub kind: IrqKind,
    pub time: SimTime,
}

/// A slice of simulator-owned memory handed to the (real or simulated)
/// IOMMU as the target of one DMA mapping.
#[derive(Clone)]
pub struct DmaRegion {
    pub buffer: HostBuffer,
    pub offset: usize,
    pub len: usize,
}

impl DmaRegion {
    pub fn whole(buffer: HostBuffer) -> Self {
        let len = buffer.len();
        DmaRegion {
            buffer,
            offset: 0,
            len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmaPerms {
    pub read: bool,
    pub write: bool,
}

impl DmaPerms {
    pub const RW: DmaPerms = DmaPerms {
        read: true,
        write: true,
    };
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("config access at {offset:#x}+{len} is out of range")]
    ConfigOutOfRange { offset: u64, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("DMA map failed: {0}")]
    DmaMap(String),
    #[error("DMA unmap failed: {0}")]
    DmaUnmap(String),
    #[error("interrupt setup failed: {0}")]
    IrqSetup(String),
    #[error("device I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Open(String),
}

/// Operations a device backend provides to the passthrough model.
pub trait DeviceBackend {
    /// Positioned read from the (possibly virtualized) config space.
    fn config_read(&mut self, offset: u64, data: &mut [u8]) -> Result<(), BackendError>;

    /// Positioned write to the (possibly virtualized) config space.
    fn config_write(&mut self, offset: u64, data: &[u8]) -> Result<(), BackendError>;

    /// Size and kind of each implemented BAR. Stable after open.
    fn region_info(&self) -> Vec<BarDefinition>;

    /// Access into BAR `bar` at `offset`. Reads fill `data`, writes consume
    /// it.
    fn region_access(
        &mut self,
        bar: u8,
        offset: u64,
        direction: Direction,
        data: &mut [u8],
    ) -> Response;

    /// Installs the IOVA -> host-buffer translation `iova .. iova+len`.
    fn map_dma(&mut self, iova: u64, region: DmaRegion, perms: DmaPerms)
        -> Result<(), BackendError>;

    fn unmap_dma(&mut self, iova: u64, size: u64) -> Result<(), BackendError>;

    /// Switches the device's interrupt delivery mode.
    fn irq_setup(&mut self, mode: IrqMode) -> Result<(), BackendError>;

    /// Drains pending interrupts in arrival order. No event is delivered
    /// twice.
    fn poll_irqs(&mut self) -> Vec<IrqKind>;

    fn reset(&mut self);
}
