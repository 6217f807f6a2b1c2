//! Address-routed interconnect.

use std::cell::RefCell;
use std::rc::Rc;

use super::dmi::DmiDescriptor;
use super::payload::{GenericPayload, Response};
use super::socket::BusTarget;
use super::time::SimTime;

struct Window {
    name: String,
    base: u64,
    size: u64,
    target: Rc<dyn BusTarget>,
}

impl Window {
    fn contains(&self, address: u64, len: u64) -> bool {
        address >= self.base
            && len <= self.size
            && address - self.base <= self.size - len
    }
}

/// Routes transactions to the target whose window contains the full access.
///
/// Targets receive the original bus address unmodified; each one knows its
/// own base. Accesses that hit no window, or that straddle a window end,
/// complete with an address error.
#[derive(Default)]
pub struct Bus {
    windows: RefCell<Vec<Window>>,
}

impl Bus {
    pub fn new() -> Self {
        Bus::default()
    }

    /// Maps `[base, base+size)` to `target`. Windows must not overlap.
    pub fn map(&self, name: impl Into<String>, base: u64, size: u64, target: Rc<dyn BusTarget>) {
        let name = name.into();
        assert!(size > 0, "bus window must not be empty");
        assert!(base.checked_add(size - 1).is_some(), "bus window wraps the address space");
        let mut windows = self.windows.borrow_mut();
        for w in windows.iter() {
            let disjoint = base + size <= w.base || w.base + w.size <= base;
            assert!(
                disjoint,
                "bus window {name:?} overlaps existing window {:?}",
                w.name
            );
        }
        windows.push(Window {
            name,
            base,
            size,
            target,
        });
    }

    fn route(&self, address: u64, len: u64) -> Option<Rc<dyn BusTarget>> {
        self.windows
            .borrow()
            .iter()
            .find(|w| w.contains(address, len))
            .map(|w| Rc::clone(&w.target))
    }
}

impl BusTarget for Bus {
    fn transport(&self, txn: &mut GenericPayload, delay: &mut SimTime) {
        // Resolve first, then call with no borrow held: a device MMIO write
        // may re-enter the bus (e.g. an interrupt doorbell write).
        match self.route(txn.address, txn.len() as u64) {
            Some(target) => target.transport(txn, delay),
            None => txn.set_response(Response::AddressError),
        }
    }

    fn dmi_request(&self, address: u64) -> Option<DmiDescriptor> {
        self.route(address, 1)?.dmi_request(address)
    }
}
