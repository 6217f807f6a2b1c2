//! Host buffers and direct-memory-interface descriptors.
//!
//! A DMI grant lets an initiator touch a target's backing store directly,
//! bypassing transactions. The same buffers are what gets registered with
//! the host IOMMU when a physical device is attached, so they are allocated
//! page-aligned and stay at a fixed address for their whole lifetime.

use std::alloc::{self, Layout};
use std::cell::{Cell, RefCell};
use std::fmt;
use std::ptr::NonNull;
use std::rc::Rc;

pub const PAGE_SIZE: usize = 4096;

/// A page-aligned, zero-initialized byte buffer owned by the simulator.
///
/// Cloning the handle shares the underlying storage. The storage never
/// moves, so raw pointers obtained via [`HostBuffer::base_ptr`] remain valid
/// until the last handle is dropped.
#[derive(Clone)]
pub struct HostBuffer {
    inner: Rc<RefCell<AlignedStore>>,
}

struct AlignedStore {
    ptr: NonNull<u8>,
    len: usize,
}

impl AlignedStore {
    fn slice(&self) -> &[u8] {
        // The allocation is live for as long as self is.
        unsafe { std::slice::from_raw_parts(self.ptr.as_ptr(), self.len) }
    }

    fn slice_mut(&mut self) -> &mut [u8] {
        unsafe { std::slice::from_raw_parts_mut(self.ptr.as_ptr(), self.len) }
    }
}

impl Drop for AlignedStore {
    fn drop(&mut self) {
        let layout = Layout::from_size_align(self.len, PAGE_SIZE).unwrap();
        unsafe { alloc::dealloc(self.ptr.as_ptr(), layout) };
    }
}

impl HostBuffer {
    /// Allocates `len` zeroed bytes, page-aligned. `len` must be nonzero.
    pub fn zeroed(len: usize) -> Self {
        assert!(len > 0, "host buffer length must be nonzero");
        let layout = Layout::from_size_align(len, PAGE_SIZE).expect("invalid buffer layout");
        // alloc_zeroed gives us both the zero-fill determinism guarantee and
        // the page alignment the IOMMU map call needs.
        let raw = unsafe { alloc::alloc_zeroed(layout) };
        let ptr = NonNull::new(raw).unwrap_or_else(|| alloc::handle_alloc_error(layout));
        HostBuffer {
            inner: Rc::new(RefCell::new(AlignedStore { ptr, len })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len
    }

    pub fn is_empty(&self) -> bool {
        false // zero-length buffers cannot be constructed
    }

    /// Raw base address of the storage, for handing to OS mapping calls.
    pub fn base_ptr(&self) -> *mut u8 {
        self.inner.borrow().ptr.as_ptr()
    }

    pub fn read(&self, offset: usize, out: &mut [u8]) {
        let store = self.inner.borrow();
        out.copy_from_slice(&store.slice()[offset..offset + out.len()]);
    }

    pub fn write(&self, offset: usize, data: &[u8]) {
        let mut store = self.inner.borrow_mut();
        store.slice_mut()[offset..offset + data.len()].copy_from_slice(data);
    }

    pub fn read_byte(&self, offset: usize) -> u8 {
        self.inner.borrow().slice()[offset]
    }

    pub fn write_byte(&self, offset: usize, value: u8) {
        self.inner.borrow_mut().slice_mut()[offset] = value;
    }

    pub fn with_slice<R>(&self, f: impl FnOnce(&[u8]) -> R) -> R {
        f(self.inner.borrow().slice())
    }

    pub fn with_slice_mut<R>(&self, f: impl FnOnce(&mut [u8]) -> R) -> R {
        f(self.inner.borrow_mut().slice_mut())
    }

    /// True when `other` shares this buffer's storage.
    pub fn same_storage(&self, other: &HostBuffer) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl fmt::Debug for HostBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HostBuffer {{ len: {} }}", self.len())
    }
}

/// Grant of direct access to a target's backing store for a bus range.
///
/// Byte `a` of the bus range maps to `buffer[a - range_start]`. A target may
/// revoke the grant at any time; holders must consult [`DmiDescriptor::is_valid`]
/// before each use and drop invalidated descriptors.
#[derive(Clone)]
pub struct DmiDescriptor {
    range_start: u64,
    range_end: u64,
    read_allowed: bool,
    write_allowed: bool,
    buffer: HostBuffer,
    valid: Rc<Cell<bool>>,
}

impl DmiDescriptor {
    pub fn new(
        range_start: u64,
        range_end: u64,
        buffer: HostBuffer,
        read_allowed: bool,
        write_allowed: bool,
    ) -> (Self, DmiInvalidateHandle) {
        assert!(range_start <= range_end, "inverted DMI range");
        let size = range_end - range_start + 1;
        assert_eq!(
            buffer.len() as u64,
            size,
            "DMI buffer length must equal the granted range size"
        );
        let valid = Rc::new(Cell::new(true));
        let descriptor = DmiDescriptor {
            range_start,
            range_end,
            read_allowed,
            write_allowed,
            buffer,
            valid: Rc::clone(&valid),
        };
        (descriptor, DmiInvalidateHandle { valid })
    }

    pub fn range_start(&self) -> u64 {
        self.range_start
    }

    pub fn range_end(&self) -> u64 {
        self.range_end
    }

    pub fn size(&self) -> u64 {
        self.range_end - self.range_start + 1
    }

    pub fn read_allowed(&self) -> bool {
        self.read_allowed
    }

    pub fn write_allowed(&self) -> bool {
        self.write_allowed
    }

    pub fn contains(&self, address: u64) -> bool {
        (self.range_start..=self.range_end).contains(&address)
    }

    pub fn contains_range(&self, address: u64, len: u64) -> bool {
        len > 0
            && self.contains(address)
            && address
                .checked_add(len - 1)
                .is_some_and(|end| self.contains(end))
    }

    /// True until the granting target revokes the descriptor.
    pub fn is_valid(&self) -> bool {
        self.valid.get()
    }

    /// Shared handle to the backing store.
    pub fn buffer(&self) -> &HostBuffer {
        &self.buffer
    }

    /// Buffer offset that corresponds to bus address `address`.
    pub fn offset_of(&self, address: u64) -> usize {
        debug_assert!(self.contains(address));
        (address - self.range_start) as usize
    }
}

impl fmt::Debug for DmiDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "DmiDescriptor {{ [{:#x}, {:#x}], r:{} w:{} valid:{} }}",
            self.range_start,
            self.range_end,
            self.read_allowed,
            self.write_allowed,
            self.is_valid()
        )
    }
}

/// Held by the granting target; revoking flips every outstanding clone of
/// the descriptor to invalid, synchronously.
pub struct DmiInvalidateHandle {
    valid: Rc<Cell<bool>>,
}

impl DmiInvalidateHandle {
    pub fn invalidate(&self) {
        self.valid.set(false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_are_zeroed_and_page_aligned() {
        let buf = HostBuffer::zeroed(8192);
        assert_eq!(buf.base_ptr() as usize % PAGE_SIZE, 0);
        buf.with_slice(|s| assert!(s.iter().all(|&b| b == 0)));
    }

    #[test]
    fn clones_share_storage() {
        let a = HostBuffer::zeroed(64);
        let b = a.clone();
        a.write_byte(7, 0xAB);
        assert_eq!(b.read_byte(7), 0xAB);
        assert!(a.same_storage(&b));
    }

    #[test]
    fn descriptor_maps_bus_addresses_to_offsets() {
        let buf = HostBuffer::zeroed(0x1000);
        let (dmi, _h) = DmiDescriptor::new(0x8000, 0x8FFF, buf, true, true);
        assert!(dmi.contains(0x8000));
        assert!(dmi.contains(0x8FFF));
        assert!(!dmi.contains(0x9000));
        assert_eq!(dmi.offset_of(0x8010), 0x10);
        assert!(dmi.contains_range(0x8FF0, 16));
        assert!(!dmi.contains_range(0x8FF0, 17));
    }

    #[test]
    fn invalidation_is_synchronous_and_shared() {
        let buf = HostBuffer::zeroed(0x1000);
        let (dmi, handle) = DmiDescriptor::new(0, 0xFFF, buf, true, false);
        let copy = dmi.clone();
        assert!(dmi.is_valid() && copy.is_valid());
        handle.invalidate();
        assert!(!dmi.is_valid() && !copy.is_valid());
    }

    #[test]
    #[should_panic(expected = "length must equal")]
    fn mismatched_buffer_length_is_rejected() {
        let buf = HostBuffer::zeroed(0x800);
        let _ = DmiDescriptor::new(0, 0xFFF, buf, true, true);
    }
}
