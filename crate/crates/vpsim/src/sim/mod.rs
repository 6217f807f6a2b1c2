//! Simulation core: virtual time, the event kernel, blocking-transport
//! sockets, DMI, signal lines and the address-routed bus.

mod bus;
mod dmi;
mod kernel;
mod payload;
mod signal;
mod socket;
mod time;

pub use bus::Bus;
pub use dmi::{DmiDescriptor, DmiInvalidateHandle, HostBuffer, PAGE_SIZE};
pub use kernel::{EventId, Kernel, SimError};
pub use payload::{Direction, GenericPayload, Response};
pub use signal::SignalLine;
pub use socket::{BusTarget, InitiatorSocket};
pub use time::{ParseTimeError, SimTime};
