//! Linux VFIO user-space ABI: the ioctl numbers, structures and flags this
//! backend uses, as defined by the kernel's `linux/vfio.h` header. VFIO
//! ioctls carry no size/direction encoding; each number is `_IO(';', 100+n)`.

#![allow(non_camel_case_types)]
#![allow(dead_code)]

pub const VFIO_API_VERSION: libc::c_int = 0;

pub const VFIO_TYPE1_IOMMU: libc::c_ulong = 1;
pub const VFIO_TYPE1V2_IOMMU: libc::c_ulong = 3;

const VFIO_TYPE: libc::c_ulong = b';' as libc::c_ulong;
const VFIO_BASE: libc::c_ulong = 100;

const fn vfio_io(nr: libc::c_ulong) -> libc::c_ulong {
    (VFIO_TYPE << 8) | (VFIO_BASE + nr)
}

pub const VFIO_GET_API_VERSION: libc::c_ulong = vfio_io(0);
pub const VFIO_CHECK_EXTENSION: libc::c_ulong = vfio_io(1);
pub const VFIO_SET_IOMMU: libc::c_ulong = vfio_io(2);
pub const VFIO_GROUP_GET_STATUS: libc::c_ulong = vfio_io(3);
pub const VFIO_GROUP_SET_CONTAINER: libc::c_ulong = vfio_io(4);
pub const VFIO_GROUP_GET_DEVICE_FD: libc::c_ulong = vfio_io(6);
pub const VFIO_DEVICE_GET_INFO: libc::c_ulong = vfio_io(7);
pub const VFIO_DEVICE_GET_REGION_INFO: libc::c_ulong = vfio_io(8);
pub const VFIO_DEVICE_GET_IRQ_INFO: libc::c_ulong = vfio_io(9);
pub const VFIO_DEVICE_SET_IRQS: libc::c_ulong = vfio_io(10);
pub const VFIO_DEVICE_RESET: libc::c_ulong = vfio_io(11);
pub const VFIO_IOMMU_MAP_DMA: libc::c_ulong = vfio_io(13);
pub const VFIO_IOMMU_UNMAP_DMA: libc::c_ulong = vfio_io(14);

#[repr(C)]
#[derive(Debug, Default)]
pub struct vfio_group_status {
    pub argsz: u32,
    pub flags: u32,
}

pub const VFIO_GROUP_FLAGS_VIABLE: u32 = 1 << 0;

#[repr(C)]
#[derive(Debug, Default)]
pub struct vfio_device_info {
    pub argsz: u32,
    pub flags: u32,
    pub num_regions: u32,
    pub num_irqs: u32,
}

#[repr(C)]
#[derive(Debug, Default)]
pub struct vfio_region_info {
    pub argsz: u32,
    pub flags: u32,
    pub index: u32,
    pub cap_offset: u32,
    pub size: u64,
    pub offset: u64,
}

pub const VFIO_REGION_INFO_FLAG_READ: u32 = 1 << 0;
pub const VFIO_REGION_INFO_FLAG_WRITE: u32 = 1 << 1;
pub const VFIO_REGION_INFO_FLAG_MMAP: u32 = 1 << 2;

/// Fixed region indices of the vfio-pci driver.
pub const VFIO_PCI_BAR0_REGION_INDEX: u32 = 0;
pub const VFIO_PCI_ROM_REGION_INDEX: u32 = 6;
pub const VFIO_PCI_CONFIG_REGION_INDEX: u32 = 7;

#[repr(C)]
#[derive(Debug, Default)]
pub struct vfio_irq_info {
    pub argsz: u32,
    pub flags: u32,
    pub index: u32,
    pub count: u32,
}

/// Fixed interrupt indices of the vfio-pci driver.
pub const VFIO_PCI_INTX_IRQ_INDEX: u32 = 0;
pub const VFIO_PCI_MSI_IRQ_INDEX: u32 = 1;
pub const VFIO_PCI_MSIX_IRQ_INDEX: u32 = 2;

/// Header of `struct vfio_irq_set`; the flexible data array (eventfd file
/// descriptors here) follows the header in one contiguous allocation.
#[repr(C)]
#[derive(Debug, Default)]
pub struct vfio_irq_set {
    pub argsz: u32,
    pub flags: u32,
    pub index: u32,
    pub start: u32,
    pub count: u32,
}

pub const VFIO_IRQ_SET_DATA_NONE: u32 = 1 << 0;
pub const VFIO_IRQ_SET_DATA_EVENTFD: u32 = 1 << 2;
pub const VFIO_IRQ_SET_ACTION_UNMASK: u32 = 1 << 4;
pub const VFIO_IRQ_SET_ACTION_TRIGGER: u32 = 1 << 5;

#[repr(C)]
#[derive(Debug, Default)]
pub struct vfio_iommu_type1_dma_map {
    pub argsz: u32,
    pub flags: u32,
    pub vaddr: u64,
    pub iova: u64,
    pub size: u64,
}

pub const VFIO_DMA_MAP_FLAG_READ: u32 = 1 << 0;
pub const VFIO_DMA_MAP_FLAG_WRITE: u32 = 1 << 1;

#[repr(C)]
#[derive(Debug, Default)]
pub struct vfio_iommu_type1_dma_unmap {
    pub argsz: u32,
    pub flags: u32,
    pub iova: u64,
    pub size: u64,
}

/// Builds one allocation holding a `vfio_irq_set` header followed by the
/// eventfd array, as VFIO_DEVICE_SET_IRQS expects.
pub fn irq_set_with_eventfds(index: u32, fds: &[libc::c_int]) -> Vec<u8> {
    let payload = std::mem::size_of_val(fds);
    let header_size = std::mem::size_of::<vfio_irq_set>();
    let header = vfio_irq_set {
        argsz: (header_size + payload) as u32,
        flags: VFIO_IRQ_SET_DATA_EVENTFD | VFIO_IRQ_SET_ACTION_TRIGGER,
        index,
        start: 0,
        count: fds.len() as u32,
    };
    let mut buf = vec![0u8; header_size + payload];
    // Plain-old-data layout per repr(C).
    unsafe {
        std::ptr::copy_nonoverlapping(
            &header as *const vfio_irq_set as *const u8,
            buf.as_mut_ptr(),
            header_size,
        );
        std::ptr::copy_nonoverlapping(
            fds.as_ptr() as *const u8,
            buf.as_mut_ptr().add(header_size),
            payload,
        );
    }
    buf
}

/// A `vfio_irq_set` that disables (count = 0, DATA_NONE) or unmasks an
/// interrupt index.
pub fn irq_set_control(index: u32, flags: u32) -> vfio_irq_set {
    vfio_irq_set {
        argsz: std::mem::size_of::<vfio_irq_set>() as u32,
        flags,
        index,
        start: 0,
        count: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ioctl_numbers_match_the_kernel_header() {
        // _IO(';', 100 + n) with ';' = 0x3B.
        assert_eq!(VFIO_GET_API_VERSION, 0x3B64);
        assert_eq!(VFIO_CHECK_EXTENSION, 0x3B65);
        assert_eq!(VFIO_SET_IOMMU, 0x3B66);
        assert_eq!(VFIO_GROUP_GET_STATUS, 0x3B67);
        assert_eq!(VFIO_DEVICE_GET_INFO, 0x3B6B);
        assert_eq!(VFIO_DEVICE_GET_REGION_INFO, 0x3B6C);
        assert_eq!(VFIO_DEVICE_SET_IRQS, 0x3B6E);
        assert_eq!(VFIO_IOMMU_MAP_DMA, 0x3B71);
        assert_eq!(VFIO_IOMMU_UNMAP_DMA, 0x3B72);
    }

    #[test]
    fn irq_set_buffer_carries_the_fd_array() {
        let buf = irq_set_with_eventfds(VFIO_PCI_MSIX_IRQ_INDEX, &[10, 11, 12]);
        let header_size = std::mem::size_of::<vfio_irq_set>();
        assert_eq!(buf.len(), header_size + 3 * 4);
        let argsz = u32::from_le_bytes(buf[0..4].try_into().unwrap());
        assert_eq!(argsz as usize, buf.len());
        let count = u32::from_le_bytes(buf[16..20].try_into().unwrap());
        assert_eq!(count, 3);
        let first_fd = i32::from_le_bytes(buf[header_size..header_size + 4].try_into().unwrap());
        assert_eq!(first_fd, 10);
    }
}
