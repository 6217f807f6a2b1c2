//! System RAM model: a bus-accessible byte store that grants DMI.
//!
//! The backing store is the host buffer that gets registered with the
//! IOMMU when a physical device is attached, so the guest-physical to
//! host-buffer translation is simply `pa - base`.

use std::cell::RefCell;
use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::sim::{
    BusTarget, Direction, DmiDescriptor, DmiInvalidateHandle, GenericPayload, HostBuffer,
    Response, SimTime,
};

pub struct Ram {
    base: u64,
    size: u64,
    store: HostBuffer,
    latency: SimTime,
    grants: RefCell<Vec<DmiInvalidateHandle>>,
}

impl Ram {
    /// Zero-initialized RAM covering `[base, base + size)`.
    pub fn new(base: u64, size: u64) -> Self {
        assert!(size > 0, "RAM size must be nonzero");
        assert!(
            base.checked_add(size - 1).is_some(),
            "RAM region wraps the address space"
        );
        Ram {
            base,
            size,
            store: HostBuffer::zeroed(size as usize),
            latency: SimTime::ZERO,
            grants: RefCell::new(Vec::new()),
        }
    }

    pub fn with_latency(mut self, latency: SimTime) -> Self {
        self.latency = latency;
        self
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn contains(&self, address: u64, len: u64) -> bool {
        len > 0 && len <= self.size && address >= self.base && address - self.base <= self.size - len
    }

    /// Shared handle to the backing store.
    pub fn store(&self) -> HostBuffer {
        self.store.clone()
    }

    /// Revokes all outstanding DMI descriptors.
    pub fn invalidate_dmi(&self) {
        for grant in self.grants.borrow_mut().drain(..) {
            grant.invalidate();
        }
    }

    /// Loads a raw image from `path` into the store at `offset`.
    pub fn load_image(&self, path: &Path, offset: u64) -> io::Result<u64> {
        let mut file = File::open(path)?;
        let len = file.metadata()?.len();
        if offset + len > self.size {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("image of {len} bytes does not fit at offset {offset:#x}"),
            ));
        }
        self.store.with_slice_mut(|slice| {
            file.read_exact(&mut slice[offset as usize..(offset + len) as usize])
        })?;
        Ok(len)
    }

    /// Dumps `len` bytes starting at `offset` to `path`.
    pub fn dump_image(&self, path: &Path, offset: u64, len: u64) -> io::Result<()> {
        if offset + len > self.size {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("dump of {len} bytes at offset {offset:#x} exceeds the region"),
            ));
        }
        let mut file = File::create(path)?;
        self.store.with_slice(|slice| {
            file.seek(SeekFrom::Start(0))?;
            file.write_all(&slice[offset as usize..(offset + len) as usize])
        })?;
        Ok(())
    }
}

impl BusTarget for Ram {
    fn transport(&self, txn: &mut GenericPayload, delay: &mut SimTime) {
        let len = txn.len() as u64;
        // All-or-nothing: an access that would run past the end leaves the
        // store untouched.
        if !self.contains(txn.address, len) {
            txn.set_response(Response::AddressError);
            return;
        }
        let offset = (txn.address - self.base) as usize;
        match txn.direction {
            Direction::Read => self.store.read(offset, txn.data_mut()),
            Direction::Write => self.store.write(offset, txn.data()),
        }
        *delay += self.latency;
        txn.dmi_hint = true; // initiators may skip transactions via DMI
        txn.set_response(Response::Ok);
    }

    fn dmi_request(&self, address: u64) -> Option<DmiDescriptor> {
        if !self.contains(address, 1) {
            return None;
        }
        // Grants always cover the full region.
        let (descriptor, handle) = DmiDescriptor::new(
            self.base,
            self.base + self.size - 1,
            self.store.clone(),
            true,
            true,
        );
        self.grants.borrow_mut().push(handle);
        Some(descriptor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn read_at(ram: &Ram, address: u64, len: usize) -> (Response, Vec<u8>) {
        let mut txn = GenericPayload::read(address, len);
        let mut delay = SimTime::ZERO;
        ram.transport(&mut txn, &mut delay);
        (txn.response(), txn.data().to_vec())
    }

    fn write_at(ram: &Ram, address: u64, data: &[u8]) -> Response {
        let mut txn = GenericPayload::write(address, data);
        let mut delay = SimTime::ZERO;
        ram.transport(&mut txn, &mut delay);
        txn.response()
    }

    #[test]
    fn bytes_written_read_back() {
        let ram = Ram::new(0x4000_0000, 0x1000);
        assert_eq!(write_at(&ram, 0x4000_0000, &[0xAB]), Response::Ok);
        let (resp, data) = read_at(&ram, 0x4000_0000, 1);
        assert_eq!(resp, Response::Ok);
        assert_eq!(data, [0xAB]);
    }

    #[test]
    fn successful_accesses_hint_at_dmi() {
        let ram = Ram::new(0, 0x1000);
        let mut txn = GenericPayload::read(0, 4);
        let mut delay = SimTime::ZERO;
        ram.transport(&mut txn, &mut delay);
        assert!(txn.dmi_hint);
    }

    #[test]
    fn access_at_end_boundary_errors() {
        let ram = Ram::new(0x4000_0000, 0x1000);
        let (resp, _) = read_at(&ram, 0x4000_1000, 1);
        assert_eq!(resp, Response::AddressError);
    }

    #[test]
    fn spanning_write_is_all_or_nothing() {
        let ram = Ram::new(0x4000_0000, 0x1000);
        let before = ram.store().with_slice(|s| s.to_vec());
        let resp = write_at(&ram, 0x4000_0FFC, &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(resp, Response::AddressError);
        let after = ram.store().with_slice(|s| s.to_vec());
        assert_eq!(before, after, "failed write must leave the store unchanged");
    }

    #[test]
    fn contents_start_zeroed() {
        let ram = Ram::new(0, 0x100);
        let (_, data) = read_at(&ram, 0, 8);
        assert_eq!(data, [0; 8]);
    }

    #[test]
    fn dmi_grant_covers_the_full_region() {
        let ram = Ram::new(0x4000_0000, 0x1000);
        let dmi = ram.dmi_request(0x4000_0000).expect("grant");
        assert_eq!(dmi.range_start(), 0x4000_0000);
        assert_eq!(dmi.range_end(), 0x4000_0FFF);
        assert!(dmi.read_allowed() && dmi.write_allowed());
        assert!(ram.dmi_request(0x4000_1000).is_none(), "end boundary denies");
    }

    /// Dual-path coherence: bytes written through the descriptor are seen by
    /// bus reads, byte for byte, over a 4 KiB window of random data.
    #[test]
    fn dmi_and_bus_paths_agree() {
        let ram = Ram::new(0x4000_0000, 0x1000);
        let dmi = ram.dmi_request(0x4000_0800).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<u8> = (0..0x1000).map(|_| rng.gen()).collect();
        dmi.buffer().write(0, &data);
        for k in (0..0x1000).step_by(8) {
            let (resp, bytes) = read_at(&ram, 0x4000_0000 + k as u64, 8);
            assert_eq!(resp, Response::Ok);
            assert_eq!(bytes, data[k..k + 8], "mismatch at offset {k:#x}");
        }
    }

    #[test]
    fn invalidation_revokes_outstanding_grants() {
        let ram = Ram::new(0, 0x1000);
        let a = ram.dmi_request(0).unwrap();
        let b = ram.dmi_request(0x800).unwrap();
        ram.invalidate_dmi();
        assert!(!a.is_valid());
        assert!(!b.is_valid());
    }

    #[test]
    fn image_load_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ram = Ram::new(0, 0x1000);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let payload: Vec<u8> = (0..256).map(|_| rng.gen()).collect();
        let img = dir.path().join("in.bin");
        std::fs::write(&img, &payload).unwrap();

        assert_eq!(ram.load_image(&img, 0x100).unwrap(), 256);
        let (_, data) = read_at(&ram, 0x100, 8);
        assert_eq!(data, payload[..8]);

        let out = dir.path().join("out.bin");
        ram.dump_image(&out, 0x100, 256).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), payload);

        assert!(ram.load_image(&img, 0xF80).is_err(), "image past the end");
    }
}
