//! PCI transaction payload and the initiator/target socket pair.

use std::rc::Weak;

pub use crate::sim::{Direction, Response};

/// The three PCI address spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PciSpace {
    Config,
    Mem,
    Io,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum PciPayloadError {
    #[error("PCI data length {0} is not a power of two in 1..=8")]
    BadLength(usize),
    #[error("PCI address {address:#x} is not aligned to the {len}-byte access")]
    Misaligned { address: u64, len: usize },
}

/// One PCI transaction: an access of 1–8 bytes (power of two, naturally
/// aligned) within one of the three spaces. The space is fixed for the
/// lifetime of the transaction.
#[derive(Debug)]
pub struct PciPayload {
    space: PciSpace,
    pub address: u64,
    pub direction: Direction,
    /// For MEM/IO accesses: which BAR region the host bridge decoded the
    /// access into. `address` is then the offset within that region.
    pub bar: Option<u8>,
    data: Vec<u8>,
    response: Option<Response>,
}

impl PciPayload {
    pub fn try_new(
        space: PciSpace,
        address: u64,
        direction: Direction,
        data: Vec<u8>,
    ) -> Result<Self, PciPayloadError> {
        let len = data.len();
        if !(1..=8).contains(&len) || !len.is_power_of_two() {
            return Err(PciPayloadError::BadLength(len));
        }
        if !address.is_multiple_of(len as u64) {
            return Err(PciPayloadError::Misaligned { address, len });
        }
        Ok(PciPayload {
            space,
            address,
            direction,
            bar: None,
            data,
            response: None,
        })
    }

    pub fn with_bar(mut self, bar: u8) -> Self {
        self.bar = Some(bar);
        self
    }

    /// A read transaction; panics on malformed shape (see [`Self::try_new`]).
    pub fn read(space: PciSpace, address: u64, len: usize) -> Self {
        Self::try_new(space, address, Direction::Read, vec![0; len]).unwrap()
    }

    /// A write transaction; panics on malformed shape (see [`Self::try_new`]).
    pub fn write(space: PciSpace, address: u64, data: &[u8]) -> Self {
        Self::try_new(space, address, Direction::Write, data.to_vec()).unwrap()
    }

    pub fn space(&self) -> PciSpace {
        self.space
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn set_response(&mut self, response: Response) {
        debug_assert!(self.response.is_none(), "response set twice");
        self.response = Some(response);
    }

    pub fn response(&self) -> Response {
        self.response.expect("PCI transaction not yet completed")
    }

    /// Little-endian value of the data buffer.
    pub fn value(&self) -> u64 {
        let mut v = 0u64;
        for (i, b) in self.data.iter().enumerate() {
            v |= (*b as u64) << (8 * i);
        }
        v
    }
}

/// One of the four shared legacy interrupt pins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LegacyPin {
    A,
    B,
    C,
    D,
}

impl LegacyPin {
    pub const ALL: [LegacyPin; 4] = [LegacyPin::A, LegacyPin::B, LegacyPin::C, LegacyPin::D];

    /// Decodes the config-space interrupt-pin encoding (1 = A .. 4 = D,
    /// 0 = no pin).
    pub fn from_config_value(value: u8) -> Option<Self> {
        match value {
            1 => Some(LegacyPin::A),
            2 => Some(LegacyPin::B),
            3 => Some(LegacyPin::C),
            4 => Some(LegacyPin::D),
            _ => None,
        }
    }

    pub fn config_value(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn index(self) -> usize {
        match self {
            LegacyPin::A => 0,
            LegacyPin::B => 1,
            LegacyPin::C => 2,
            LegacyPin::D => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LegacyPin::A => "INTA",
            LegacyPin::B => "INTB",
            LegacyPin::C => "INTC",
            LegacyPin::D => "INTD",
        }
    }
}

/// Message on the device-to-host backward path of a PCI socket pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PciBackwardMessage {
    LegacyIrq { pin: LegacyPin, level: bool },
}

/// Device side of a PCI socket pair.
pub trait PciTarget {
    fn pci_transport(&self, txn: &mut PciPayload);
}

/// Host side of the backward path; implemented by the host bridge.
pub trait PciBackwardSink {
    fn backward(&self, slot: usize, msg: PciBackwardMessage);
}

/// Handle a device uses to send backward-path messages to its host bridge.
#[derive(Clone)]
pub struct PciBackwardPath {
    slot: usize,
    sink: Weak<dyn PciBackwardSink>,
}

impl PciBackwardPath {
    pub fn new(slot: usize, sink: Weak<dyn PciBackwardSink>) -> Self {
        PciBackwardPath { slot, sink }
    }

    pub fn send(&self, msg: PciBackwardMessage) {
        if let Some(sink) = self.sink.upgrade() {
            sink.backward(self.slot, msg);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_shape_is_validated() {
        assert!(PciPayload::try_new(PciSpace::Mem, 0x0, Direction::Read, vec![0; 4]).is_ok());
        assert!(matches!(
            PciPayload::try_new(PciSpace::Mem, 0x0, Direction::Read, vec![0; 3]),
            Err(PciPayloadError::BadLength(3))
        ));
        assert!(matches!(
            PciPayload::try_new(PciSpace::Mem, 0x2, Direction::Read, vec![0; 4]),
            Err(PciPayloadError::Misaligned { .. })
        ));
        assert!(matches!(
            PciPayload::try_new(PciSpace::Mem, 0x0, Direction::Read, vec![0; 16]),
            Err(PciPayloadError::BadLength(16))
        ));
    }

    #[test]
    fn value_is_little_endian() {
        let txn = PciPayload::write(PciSpace::Config, 0, &[0x0B, 0x1B]);
        assert_eq!(txn.value(), 0x1B0B);
    }

    #[test]
    fn pin_encoding_round_trips() {
        for pin in LegacyPin::ALL {
            assert_eq!(LegacyPin::from_config_value(pin.config_value()), Some(pin));
        }
        assert_eq!(LegacyPin::from_config_value(0), None);
        assert_eq!(LegacyPin::from_config_value(5), None);
    }
}
