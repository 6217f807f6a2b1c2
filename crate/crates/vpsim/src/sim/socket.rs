//! Initiator/target sockets for blocking transports.
//!
//! Targets take `&self` and keep their mutable state behind interior
//! mutability. The rule every component follows is to never hold its own
//! borrow across an outbound call, which makes nested transports (CPU ->
//! bridge -> device -> DMA -> bus) safe on the single simulation thread.

use std::cell::RefCell;
use std::rc::{Rc, Weak};

use super::dmi::DmiDescriptor;
use super::payload::GenericPayload;
use super::time::SimTime;

/// A module that can terminate bus transactions.
pub trait BusTarget {
    /// Processes `txn`, sets its response, and adds the target's access
    /// latency to `delay`. Implementations must never decrease `delay`.
    fn transport(&self, txn: &mut GenericPayload, delay: &mut SimTime);

    /// Requests direct access to the target's backing store for the range
    /// containing `address`. Denial is the default and is not an error.
    fn dmi_request(&self, address: u64) -> Option<DmiDescriptor> {
        let _ = address;
        None
    }
}

/// The initiating end of a socket pair.
///
/// Binding happens once, at elaboration; the connection is fixed afterwards.
/// The target is held weakly — the platform owns all components — so socket
/// graphs with cycles (bridge -> bus -> bridge) do not leak.
pub struct InitiatorSocket {
    name: String,
    target: RefCell<Option<Weak<dyn BusTarget>>>,
}

impl InitiatorSocket {
    pub fn new(name: impl Into<String>) -> Self {
        InitiatorSocket {
            name: name.into(),
            target: RefCell::new(None),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bind(&self, target: &Rc<dyn BusTarget>) {
        let mut slot = self.target.borrow_mut();
        assert!(
            slot.is_none(),
            "socket {:?} is already bound; binding is 1-to-1 and fixed",
            self.name
        );
        *slot = Some(Rc::downgrade(target));
    }

    pub fn is_bound(&self) -> bool {
        self.target.borrow().is_some()
    }

    fn resolve(&self) -> Rc<dyn BusTarget> {
        self.target
            .borrow()
            .as_ref()
            .unwrap_or_else(|| panic!("socket {:?} was not bound at elaboration", self.name))
            .upgrade()
            .unwrap_or_else(|| panic!("target of socket {:?} no longer exists", self.name))
    }

    /// Blocking transport to the bound target.
    pub fn transport(&self, txn: &mut GenericPayload, delay: &mut SimTime) {
        let target = self.resolve();
        let delay_in = *delay;
        target.transport(txn, delay);
        debug_assert!(*delay >= delay_in, "target decreased the transport delay");
        debug_assert!(txn.has_response(), "target did not set a response");
    }

    pub fn dmi_request(&self, address: u64) -> Option<DmiDescriptor> {
        self.resolve().dmi_request(address)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::payload::{Direction, Response};
    use std::cell::Cell;

    struct FixedLatencyStore {
        latency: SimTime,
        calls: Cell<u32>,
    }

    impl BusTarget for FixedLatencyStore {
        fn transport(&self, txn: &mut GenericPayload, delay: &mut SimTime) {
            self.calls.set(self.calls.get() + 1);
            if txn.direction == Direction::Read {
                txn.data_mut().fill(0x5A);
            }
            *delay += self.latency;
            txn.set_response(Response::Ok);
        }
    }

    #[test]
    fn transport_accumulates_latency() {
        let target: Rc<dyn BusTarget> = Rc::new(FixedLatencyStore {
            latency: SimTime::from_ns(1),
            calls: Cell::new(0),
        });
        let socket = InitiatorSocket::new("cpu.data");
        socket.bind(&target);

        let mut txn = GenericPayload::read(0x0, 4);
        let mut delay = SimTime::from_ns(2);
        socket.transport(&mut txn, &mut delay);

        assert_eq!(delay, SimTime::from_ns(3));
        assert_eq!(txn.response(), Response::Ok);
        assert_eq!(txn.data(), &[0x5A; 4]);
    }

    #[test]
    #[should_panic(expected = "already bound")]
    fn double_bind_is_an_elaboration_error() {
        let target: Rc<dyn BusTarget> = Rc::new(FixedLatencyStore {
            latency: SimTime::ZERO,
            calls: Cell::new(0),
        });
        let socket = InitiatorSocket::new("x");
        socket.bind(&target);
        socket.bind(&target);
    }

    #[test]
    #[should_panic(expected = "not bound at elaboration")]
    fn transport_on_unbound_socket_names_the_socket() {
        let socket = InitiatorSocket::new("x");
        let mut txn = GenericPayload::read(0, 1);
        let mut delay = SimTime::ZERO;
        socket.transport(&mut txn, &mut delay);
    }
}
