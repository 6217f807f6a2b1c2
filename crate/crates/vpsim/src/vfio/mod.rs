//! Real-hardware device backend using the Linux VFIO user-space driver
//! interface: container/group/device descriptors, region discovery, config
//! access via positioned read/write, BAR access via mapped memory, DMA
//! mapping through the host IOMMU, and interrupt delivery via event
//! descriptors.
//!
//! Everything that can be validated without touching the OS is validated
//! first; every kernel interaction failure carries the errno text.

mod irq;
mod uapi;

pub use irq::{IrqInbox, IrqListener};

use std::fs::{File, OpenOptions};
use std::io;
use std::os::fd::AsRawFd;
use std::os::unix::fs::FileExt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use crate::pci::{BarDefinition, BarKind, reg};
use crate::sim::{Direction, Response, PAGE_SIZE};
use crate::vpci::{BackendError, DeviceBackend, DmaPerms, DmaRegion, IrqKind, IrqMode};

use irq::new_eventfd;
use uapi::*;

/// PCI domain:bus:device.function address, e.g. `0000:01:00.0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PciAddress {
    pub domain: u16,
    pub bus: u8,
    pub device: u8,
    pub function: u8,
}

impl FromStr for PciAddress {
    type Err = BackendError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let invalid = || {
            BackendError::InvalidArgument(format!(
                "malformed PCI address {text:?} (expected dddd:bb:dd.f)"
            ))
        };
        let (rest, function) = text.rsplit_once('.').ok_or_else(invalid)?;
        let mut parts = rest.split(':');
        let (domain, bus, device) = match (parts.next(), parts.next(), parts.next(), parts.next())
        {
            (Some(domain), Some(bus), Some(device), None) => (domain, bus, device),
            (Some(bus), Some(device), None, _) => ("0", bus, device),
            _ => return Err(invalid()),
        };
        Ok(PciAddress {
            domain: u16::from_str_radix(domain, 16).map_err(|_| invalid())?,
            bus: u8::from_str_radix(bus, 16).map_err(|_| invalid())?,
            device: u8::from_str_radix(device, 16).map_err(|_| invalid())?,
            function: u8::from_str_radix(function, 16).map_err(|_| invalid())?,
        })
    }
}

impl std::fmt::Display for PciAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:04x}:{:02x}:{:02x}.{:x}",
            self.domain, self.bus, self.device, self.function
        )
    }
}

/// Host file offset and properties of one VFIO region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionEntry {
    pub index: u32,
    pub offset: u64,
    pub size: u64,
    pub readable: bool,
    pub writable: bool,
    pub mappable: bool,
}

impl RegionEntry {
    pub fn parse(index: u32, info: &vfio_region_info) -> Option<Self> {
        if info.size == 0 {
            return None;
        }
        Some(RegionEntry {
            index,
            offset: info.offset,
            size: info.size,
            readable: info.flags & VFIO_REGION_INFO_FLAG_READ != 0,
            writable: info.flags & VFIO_REGION_INFO_FLAG_WRITE != 0,
            mappable: info.flags & VFIO_REGION_INFO_FLAG_MMAP != 0,
        })
    }
}

/// Pre-OS-call validation of a DMA mapping request.
pub fn validate_dma_args(iova: u64, vaddr: u64, size: u64) -> Result<(), BackendError> {
    let page = PAGE_SIZE as u64;
    if size == 0 || !size.is_multiple_of(page) {
        return Err(BackendError::InvalidArgument(format!(
            "DMA size {size:#x} is not a multiple of the {page:#x}-byte page size"
        )));
    }
    if !vaddr.is_multiple_of(page) {
        return Err(BackendError::InvalidArgument(format!(
            "DMA buffer address {vaddr:#x} is not page-aligned"
        )));
    }
    if !iova.is_multiple_of(page) {
        return Err(BackendError::InvalidArgument(format!(
            "DMA iova {iova:#x} is not page-aligned"
        )));
    }
    if iova.checked_add(size - 1).is_none() {
        return Err(BackendError::InvalidArgument(
            "DMA range wraps the address space".into(),
        ));
    }
    Ok(())
}

fn ioctl_err(what: &str) -> BackendError {
    BackendError::Open(format!("{what}: {}", io::Error::last_os_error()))
}

fn ioctl_none(fd: libc::c_int, nr: libc::c_ulong) -> libc::c_int {
    unsafe { libc::ioctl(fd, nr, 0) }
}

fn ioctl_val(fd: libc::c_int, nr: libc::c_ulong, value: libc::c_ulong) -> libc::c_int {
    unsafe { libc::ioctl(fd, nr, value) }
}

fn ioctl_ptr<T>(fd: libc::c_int, nr: libc::c_ulong, arg: *mut T) -> libc::c_int {
    unsafe { libc::ioctl(fd, nr, arg) }
}

/// A BAR mapped into this process; accesses go straight to device memory.
struct MappedBar {
    bar: u8,
    ptr: *mut u8,
    len: usize,
}

impl Drop for MappedBar {
    fn drop(&mut self) {
        unsafe { libc::munmap(self.ptr as *mut libc::c_void, self.len) };
    }
}

/// Width-preserving access into mapped device memory: naturally aligned 2,
/// 4 and 8 byte accesses are issued as single loads/stores so device
/// registers never observe torn transactions.
unsafe fn mmio_read(ptr: *const u8, data: &mut [u8]) {
    match data.len() {
        2 if (ptr as usize).is_multiple_of(2) => {
            let v = (ptr as *const u16).read_volatile();
            data.copy_from_slice(&v.to_le_bytes());
        }
        4 if (ptr as usize).is_multiple_of(4) => {
            let v = (ptr as *const u32).read_volatile();
            data.copy_from_slice(&v.to_le_bytes());
        }
        8 if (ptr as usize).is_multiple_of(8) => {
            let v = (ptr as *const u64).read_volatile();
            data.copy_from_slice(&v.to_le_bytes());
        }
        _ => {
            for (i, byte) in data.iter_mut().enumerate() {
                *byte = ptr.add(i).read_volatile();
            }
        }
    }
}

unsafe fn mmio_write(ptr: *mut u8, data: &[u8]) {
    match data.len() {
        2 if (ptr as usize).is_multiple_of(2) => {
            (ptr as *mut u16).write_volatile(u16::from_le_bytes(data.try_into().unwrap()))
        }
        4 if (ptr as usize).is_multiple_of(4) => {
            (ptr as *mut u32).write_volatile(u32::from_le_bytes(data.try_into().unwrap()))
        }
        8 if (ptr as usize).is_multiple_of(8) => {
            (ptr as *mut u64).write_volatile(u64::from_le_bytes(data.try_into().unwrap()))
        }
        _ => {
            for (i, &byte) in data.iter().enumerate() {
                ptr.add(i).write_volatile(byte);
            }
        }
    }
}

/// Open descriptors and discovered layout of one passed-through function.
pub struct VfioDeviceHandle {
    pub address: PciAddress,
    pub group_id: u32,
    container: File,
    _group: File,
    device: File,
    pub regions: Vec<RegionEntry>,
}

impl VfioDeviceHandle {
    fn region(&self, index: u32) -> Option<&RegionEntry> {
        self.regions.iter().find(|r| r.index == index)
    }

    fn config_region(&self) -> Result<&RegionEntry, BackendError> {
        self.region(VFIO_PCI_CONFIG_REGION_INDEX).ok_or_else(|| {
            BackendError::Open("device exposes no config region".into())
        })
    }

    pub fn config_read(&self, offset: u64, data: &mut [u8]) -> Result<(), BackendError> {
        let region = self.config_region()?;
        if offset + data.len() as u64 > region.size {
            return Err(BackendError::ConfigOutOfRange {
                offset,
                len: data.len(),
            });
        }
        self.device
            .read_exact_at(data, region.offset + offset)
            .map_err(BackendError::Io)
    }

    pub fn config_write(&self, offset: u64, data: &[u8]) -> Result<(), BackendError> {
        let region = self.config_region()?;
        if offset + data.len() as u64 > region.size {
            return Err(BackendError::ConfigOutOfRange {
                offset,
                len: data.len(),
            });
        }
        self.device
            .write_all_at(data, region.offset + offset)
            .map_err(BackendError::Io)
    }

    fn irq_info(&self, index: u32) -> Result<vfio_irq_info, BackendError> {
        let mut info = vfio_irq_info {
            argsz: std::mem::size_of::<vfio_irq_info>() as u32,
            index,
            ..Default::default()
        };
        if ioctl_ptr(self.device.as_raw_fd(), VFIO_DEVICE_GET_IRQ_INFO, &mut info) < 0 {
            return Err(ioctl_err("VFIO_DEVICE_GET_IRQ_INFO"));
        }
        Ok(info)
    }
}

/// Lists sibling devices of an IOMMU group, for the not-viable diagnostic.
fn group_siblings(group_id: u32) -> Vec<String> {
    let path = PathBuf::from(format!("/sys/kernel/iommu_groups/{group_id}/devices"));
    match std::fs::read_dir(path) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect(),
        Err(_) => Vec::new(),
    }
}

/// Resolves the IOMMU group a device belongs to via sysfs.
fn resolve_group_id(address: &PciAddress) -> Result<u32, BackendError> {
    let link = PathBuf::from(format!("/sys/bus/pci/devices/{address}/iommu_group"));
    let target = std::fs::read_link(&link).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            BackendError::Open(format!(
                "device {address} has no IOMMU group: IOMMU unavailable or device absent"
            ))
        } else {
            BackendError::Io(e)
        }
    })?;
    target
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| BackendError::Open(format!("cannot parse IOMMU group link {target:?}")))
}

/// Opens the container/group/device descriptor chain for `address` and
/// discovers its regions.
pub fn open_device(address: PciAddress) -> Result<VfioDeviceHandle, BackendError> {
    let group_id = resolve_group_id(&address)?;

    let container = OpenOptions::new()
        .read(true)
        .write(true)
        .open("/dev/vfio/vfio")
        .map_err(|e| BackendError::Open(format!("cannot open /dev/vfio/vfio: {e}")))?;
    if ioctl_none(container.as_raw_fd(), VFIO_GET_API_VERSION) != VFIO_API_VERSION {
        return Err(BackendError::Open("unexpected VFIO API version".into()));
    }
    let iommu_type = if ioctl_val(container.as_raw_fd(), VFIO_CHECK_EXTENSION, VFIO_TYPE1V2_IOMMU)
        == 1
    {
        VFIO_TYPE1V2_IOMMU
    } else if ioctl_val(container.as_raw_fd(), VFIO_CHECK_EXTENSION, VFIO_TYPE1_IOMMU) == 1 {
        VFIO_TYPE1_IOMMU
    } else {
        return Err(BackendError::Open(
            "container supports no type-1 IOMMU: IOMMU unavailable".into(),
        ));
    };

    let group_path = format!("/dev/vfio/{group_id}");
    let group = OpenOptions::new()
        .read(true)
        .write(true)
        .open(&group_path)
        .map_err(|e| {
            BackendError::Open(format!(
                "cannot open {group_path}: {e} (is the device bound to vfio-pci?)"
            ))
        })?;

    let mut status = vfio_group_status {
        argsz: std::mem::size_of::<vfio_group_status>() as u32,
        flags: 0,
    };
    if ioctl_ptr(group.as_raw_fd(), VFIO_GROUP_GET_STATUS, &mut status) < 0 {
        return Err(ioctl_err("VFIO_GROUP_GET_STATUS"));
    }
    if status.flags & VFIO_GROUP_FLAGS_VIABLE == 0 {
        return Err(BackendError::Open(format!(
            "IOMMU group {group_id} is not viable; all sibling devices must be bound to \
             vfio-pci: {}",
            group_siblings(group_id).join(", ")
        )));
    }

    let mut container_fd = container.as_raw_fd();
    if ioctl_ptr(group.as_raw_fd(), VFIO_GROUP_SET_CONTAINER, &mut container_fd) < 0 {
        return Err(ioctl_err("VFIO_GROUP_SET_CONTAINER"));
    }
    if ioctl_val(container.as_raw_fd(), VFIO_SET_IOMMU, iommu_type) < 0 {
        return Err(ioctl_err("VFIO_SET_IOMMU"));
    }

    let name = std::ffi::CString::new(address.to_string()).unwrap();
    let device_fd = unsafe {
        libc::ioctl(
            group.as_raw_fd(),
            VFIO_GROUP_GET_DEVICE_FD,
            name.as_ptr(),
        )
    };
    if device_fd < 0 {
        return Err(ioctl_err("VFIO_GROUP_GET_DEVICE_FD"));
    }
    let device = unsafe { <File as std::os::fd::FromRawFd>::from_raw_fd(device_fd) };

    let mut info = vfio_device_info {
        argsz: std::mem::size_of::<vfio_device_info>() as u32,
        ..Default::default()
    };
    if ioctl_ptr(device.as_raw_fd(), VFIO_DEVICE_GET_INFO, &mut info) < 0 {
        return Err(ioctl_err("VFIO_DEVICE_GET_INFO"));
    }

    let mut regions = Vec::new();
    let last = VFIO_PCI_CONFIG_REGION_INDEX.min(info.num_regions.saturating_sub(1));
    for index in VFIO_PCI_BAR0_REGION_INDEX..=last {
        let mut region_info = vfio_region_info {
            argsz: std::mem::size_of::<vfio_region_info>() as u32,
            index,
            ..Default::default()
        };
        if ioctl_ptr(
            device.as_raw_fd(),
            VFIO_DEVICE_GET_REGION_INFO,
            &mut region_info,
        ) < 0
        {
            continue; // unimplemented region index
        }
        if let Some(entry) = RegionEntry::parse(index, &region_info) {
            regions.push(entry);
        }
    }

    Ok(VfioDeviceHandle {
        address,
        group_id,
        container,
        _group: group,
        device,
        regions,
    })
}

/// Parses BAR definitions from region sizes plus the type bits of the
/// config image. Pure: testable without a device.
pub fn parse_bar_definitions(
    regions: &[RegionEntry],
    config: &[u8],
) -> Vec<BarDefinition> {
    let mut bars = Vec::new();
    let mut skip_next = false;
    for index in 0..6u32 {
        if skip_next {
            skip_next = false;
            continue;
        }
        let Some(region) = regions.iter().find(|r| r.index == index) else {
            continue;
        };
        if !region.size.is_power_of_two() || region.size < 16 {
            continue;
        }
        let offset = reg::BAR0 + index as usize * 4;
        let low = u32::from_le_bytes(config[offset..offset + 4].try_into().unwrap());
        let kind = if low & 0x1 != 0 {
            BarKind::Io
        } else if low & 0x4 != 0 {
            skip_next = true;
            BarKind::Mem64
        } else {
            BarKind::Mem32
        };
        bars.push(BarDefinition {
            index: index as u8,
            size: region.size,
            kind,
            prefetchable: kind != BarKind::Io && low & 0x8 != 0,
        });
    }
    bars
}

/// The VFIO-backed [`DeviceBackend`].
pub struct VfioBackend {
    handle: VfioDeviceHandle,
    bars: Vec<BarDefinition>,
    mapped: Vec<MappedBar>,
    inbox: Arc<IrqInbox>,
    listener: Option<IrqListener>,
    current_mode: Option<IrqMode>,
    intx_needs_unmask: bool,
}

impl VfioBackend {
    /// Opens `sysfs_address` (e.g. `0000:01:00.0`) through VFIO. The device
    /// must be bound to the vfio-pci host driver and its IOMMU group must
    /// be viable.
    pub fn open(sysfs_address: &str) -> Result<Self, BackendError> {
        let address: PciAddress = sysfs_address.parse()?;
        let handle = open_device(address)?;

        let mut config = [0u8; 256];
        handle.config_read(0, &mut config)?;
        let bars = parse_bar_definitions(&handle.regions, &config);

        let mut backend = VfioBackend {
            handle,
            bars,
            mapped: Vec::new(),
            inbox: Arc::new(IrqInbox::default()),
            listener: None,
            current_mode: None,
            intx_needs_unmask: false,
        };
        backend.map_regions();
        Ok(backend)
    }

    pub fn handle(&self) -> &VfioDeviceHandle {
        &self.handle
    }

    pub fn bar_is_mapped(&self, bar: u8) -> bool {
        self.mapped.iter().any(|m| m.bar == bar)
    }

    /// Maps every mappable BAR into the process; failures fall back to
    /// positioned read/write through the device descriptor.
    fn map_regions(&mut self) {
        for def in &self.bars {
            let Some(region) = self.handle.region(def.index as u32) else {
                continue;
            };
            if !region.mappable {
                log::info!(
                    "{}: BAR{} not mappable, using read/write fallback",
                    self.handle.address,
                    def.index
                );
                continue;
            }
            let ptr = unsafe {
                libc::mmap(
                    std::ptr::null_mut(),
                    region.size as usize,
                    libc::PROT_READ | libc::PROT_WRITE,
                    libc::MAP_SHARED,
                    self.handle.device.as_raw_fd(),
                    region.offset as libc::off_t,
                )
            };
            if ptr == libc::MAP_FAILED {
                log::warn!(
                    "{}: mmap of BAR{} failed ({}), using read/write fallback",
                    self.handle.address,
                    def.index,
                    io::Error::last_os_error()
                );
                continue;
            }
            self.mapped.push(MappedBar {
                bar: def.index,
                ptr: ptr as *mut u8,
                len: region.size as usize,
            });
        }
    }

    fn disable_current_irqs(&mut self) {
        self.listener = None; // joins the thread, closing registered fds
        if let Some(mode) = self.current_mode.take() {
            let index = match mode {
                IrqMode::Legacy => VFIO_PCI_INTX_IRQ_INDEX,
                IrqMode::Msi => VFIO_PCI_MSI_IRQ_INDEX,
                IrqMode::Msix { .. } => VFIO_PCI_MSIX_IRQ_INDEX,
            };
            let mut disable = irq_set_control(
                index,
                VFIO_IRQ_SET_DATA_NONE | VFIO_IRQ_SET_ACTION_TRIGGER,
            );
            ioctl_ptr(
                self.handle.device.as_raw_fd(),
                VFIO_DEVICE_SET_IRQS,
                &mut disable,
            );
        }
    }

    fn unmask_intx(&self) {
        let mut unmask = irq_set_control(
            VFIO_PCI_INTX_IRQ_INDEX,
            VFIO_IRQ_SET_DATA_NONE | VFIO_IRQ_SET_ACTION_UNMASK,
        );
        if ioctl_ptr(
            self.handle.device.as_raw_fd(),
            VFIO_DEVICE_SET_IRQS,
            &mut unmask,
        ) < 0
        {
            log::warn!("{}: INTx unmask failed", self.handle.address);
        }
    }
}

impl DeviceBackend for VfioBackend {
    fn config_read(&mut self, offset: u64, data: &mut [u8]) -> Result<(), BackendError> {
        self.handle.config_read(offset, data)
    }

    fn config_write(&mut self, offset: u64, data: &[u8]) -> Result<(), BackendError> {
        self.handle.config_write(offset, data)
    }

    fn region_info(&self) -> Vec<BarDefinition> {
        self.bars.clone()
    }

    fn region_access(
        &mut self,
        bar: u8,
        offset: u64,
        direction: Direction,
        data: &mut [u8],
    ) -> Response {
        let Some(def) = self.bars.iter().find(|d| d.index == bar) else {
            return Response::AddressError;
        };
        if offset >= def.size || data.len() as u64 > def.size - offset {
            return Response::AddressError;
        }
        if let Some(mapped) = self.mapped.iter().find(|m| m.bar == bar) {
            unsafe {
                match direction {
                    Direction::Read => mmio_read(mapped.ptr.add(offset as usize), data),
                    Direction::Write => mmio_write(mapped.ptr.add(offset as usize), data),
                }
            }
            return Response::Ok;
        }
        // Unmapped region: positioned I/O through the device descriptor.
        let Some(region) = self.handle.region(bar as u32) else {
            return Response::AddressError;
        };
        let result = match direction {
            Direction::Read => self.handle.device.read_exact_at(data, region.offset + offset),
            Direction::Write => self.handle.device.write_all_at(data, region.offset + offset),
        };
        match result {
            Ok(()) => Response::Ok,
            Err(_) => Response::CommandError,
        }
    }

    fn map_dma(
        &mut self,
        iova: u64,
        region: DmaRegion,
        perms: DmaPerms,
    ) -> Result<(), BackendError> {
        let vaddr = region.buffer.base_ptr() as u64 + region.offset as u64;
        validate_dma_args(iova, vaddr, region.len as u64)?;
        let mut map = vfio_iommu_type1_dma_map {
            argsz: std::mem::size_of::<vfio_iommu_type1_dma_map>() as u32,
            flags: if perms.read { VFIO_DMA_MAP_FLAG_READ } else { 0 }
                | if perms.write { VFIO_DMA_MAP_FLAG_WRITE } else { 0 },
            vaddr,
            iova,
            size: region.len as u64,
        };
        if ioctl_ptr(
            self.handle.container.as_raw_fd(),
            VFIO_IOMMU_MAP_DMA,
            &mut map,
        ) < 0
        {
            return Err(BackendError::DmaMap(format!(
                "VFIO_IOMMU_MAP_DMA iova {iova:#x} size {:#x}: {}",
                region.len,
                io::Error::last_os_error()
            )));
        }
        Ok(())
    }

    fn unmap_dma(&mut self, iova: u64, size: u64) -> Result<(), BackendError> {
        let mut unmap = vfio_iommu_type1_dma_unmap {
            argsz: std::mem::size_of::<vfio_iommu_type1_dma_unmap>() as u32,
            flags: 0,
            iova,
            size,
        };
        if ioctl_ptr(
            self.handle.container.as_raw_fd(),
            VFIO_IOMMU_UNMAP_DMA,
            &mut unmap,
        ) < 0
        {
            return Err(BackendError::DmaUnmap(format!(
                "VFIO_IOMMU_UNMAP_DMA iova {iova:#x}: {}",
                io::Error::last_os_error()
            )));
        }
        Ok(())
    }

    fn irq_setup(&mut self, mode: IrqMode) -> Result<(), BackendError> {
        let (index, count, template): (u32, usize, fn(u16) -> IrqKind) = match mode {
            IrqMode::Legacy => (VFIO_PCI_INTX_IRQ_INDEX, 1, |_| IrqKind::Legacy {
                level: true,
            }),
            IrqMode::Msi => (VFIO_PCI_MSI_IRQ_INDEX, 1, |_| IrqKind::Msi),
            IrqMode::Msix { vectors } => (VFIO_PCI_MSIX_IRQ_INDEX, vectors as usize, |v| {
                IrqKind::Msix { vector: v }
            }),
        };
        let info = self.handle.irq_info(index)?;
        if info.count == 0 {
            let supported: Vec<&str> = [
                (VFIO_PCI_INTX_IRQ_INDEX, "legacy"),
                (VFIO_PCI_MSI_IRQ_INDEX, "MSI"),
                (VFIO_PCI_MSIX_IRQ_INDEX, "MSI-X"),
            ]
            .iter()
            .filter(|(i, _)| self.handle.irq_info(*i).map_or(0, |x| x.count) > 0)
            .map(|(_, name)| *name)
            .collect();
            return Err(BackendError::IrqSetup(format!(
                "device does not support this interrupt kind (supported: {})",
                supported.join(", ")
            )));
        }
        if count as u32 > info.count {
            return Err(BackendError::IrqSetup(format!(
                "requested {count} vectors, device supports {}",
                info.count
            )));
        }

        self.disable_current_irqs();

        let mut sources = Vec::with_capacity(count);
        let mut raw_fds = Vec::with_capacity(count);
        for vector in 0..count {
            let fd = new_eventfd().map_err(BackendError::Io)?;
            raw_fds.push(fd.as_raw_fd());
            sources.push((fd, template(vector as u16)));
        }
        let mut request = irq_set_with_eventfds(index, &raw_fds);
        if ioctl_ptr(
            self.handle.device.as_raw_fd(),
            VFIO_DEVICE_SET_IRQS,
            request.as_mut_ptr(),
        ) < 0
        {
            return Err(BackendError::IrqSetup(format!(
                "VFIO_DEVICE_SET_IRQS: {}",
                io::Error::last_os_error()
            )));
        }
        self.listener = Some(IrqListener::spawn(sources, Arc::clone(&self.inbox))?);
        self.current_mode = Some(mode);
        self.intx_needs_unmask = matches!(mode, IrqMode::Legacy);
        Ok(())
    }

    fn poll_irqs(&mut self) -> Vec<IrqKind> {
        let events = self.inbox.drain();
        // The kernel automasks INTx on delivery; re-enable once the events
        // are on their way into the simulation.
        if self.intx_needs_unmask
            && events
                .iter()
                .any(|e| matches!(e, IrqKind::Legacy { .. }))
        {
            self.unmask_intx();
        }
        events
    }

    fn reset(&mut self) {
        self.disable_current_irqs();
        if ioctl_none(self.handle.device.as_raw_fd(), VFIO_DEVICE_RESET) < 0 {
            log::warn!("{}: VFIO_DEVICE_RESET failed", self.handle.address);
        }
    }
}

impl Drop for VfioBackend {
    fn drop(&mut self) {
        self.disable_current_irqs();
    }
}

/// Wires a [`VfioBackend`] for harness use (boxing keeps call sites tidy).
pub fn open_backend(sysfs_address: &str) -> Result<Box<dyn DeviceBackend>, BackendError> {
    Ok(Box::new(VfioBackend::open(sysfs_address)?))
}

/// Environment variable naming a VFIO-bound device for the gated hardware
/// tests, e.g. `VPSIM_VFIO_DEVICE=0000:01:00.0`.
pub const HW_TEST_ENV: &str = "VPSIM_VFIO_DEVICE";

/// The device named by [`HW_TEST_ENV`], when hardware tests are enabled.
pub fn hw_test_device() -> Option<String> {
    std::env::var(HW_TEST_ENV).ok().filter(|v| !v.is_empty())
}
