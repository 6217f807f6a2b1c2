//! MSI(-X) termination point: a GICv2m-style doorbell.
//!
//! A 32-bit write of an interrupt number to the doorbell register pulses
//! the matching output line. The register layout mirrors GICv2m (TYPER at
//! 0x008, SETSPI at 0x040) so real driver code can be ported against it.

use std::cell::RefCell;

use crate::sim::{BusTarget, Direction, GenericPayload, Response, SignalLine, SimTime};
use crate::trace::{Tracer, WarnKind};

pub const REGION_SIZE: u64 = 0x1000;
pub const TYPER_OFFSET: u64 = 0x008;
pub const SETSPI_OFFSET: u64 = 0x040;

/// Placement and interrupt-number range of the doorbell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DoorbellConfig {
    pub base_address: u64,
    pub base_spi: u32,
    pub num_spis: u32,
}

impl DoorbellConfig {
    pub fn contains_spi(&self, value: u32) -> bool {
        value >= self.base_spi && value - self.base_spi < self.num_spis
    }
}

pub struct MsiController {
    config: DoorbellConfig,
    lines: Vec<SignalLine>,
    counters: RefCell<Vec<u64>>,
    warnings: RefCell<u64>,
    tracer: Tracer,
}

impl MsiController {
    /// Panics if `num_spis` is zero or the TYPER encoding cannot hold the
    /// configured range (base in bits [25:16], count in bits [9:0]).
    pub fn new(config: DoorbellConfig, tracer: Tracer) -> Self {
        assert!(config.num_spis >= 1, "doorbell needs at least one interrupt");
        assert!(config.base_spi < 1 << 10, "base SPI does not fit the TYPER field");
        assert!(config.num_spis < 1 << 10, "SPI count does not fit the TYPER field");
        let lines = (0..config.num_spis)
            .map(|i| SignalLine::new(format!("spi{}", config.base_spi + i)))
            .collect();
        MsiController {
            config,
            lines,
            counters: RefCell::new(vec![0; config.num_spis as usize]),
            warnings: RefCell::new(0),
            tracer,
        }
    }

    pub fn config(&self) -> DoorbellConfig {
        self.config
    }

    /// Output line for vector `index` (relative to `base_spi`).
    pub fn line(&self, index: u32) -> SignalLine {
        self.lines[index as usize].clone()
    }

    /// Delivered interrupt count per vector.
    pub fn counter(&self, index: u32) -> u64 {
        self.counters.borrow()[index as usize]
    }

    pub fn warnings(&self) -> u64 {
        *self.warnings.borrow()
    }

    fn typer(&self) -> u32 {
        (self.config.base_spi << 16) | self.config.num_spis
    }

    fn doorbell_write(&self, value: u32) {
        if self.config.contains_spi(value) {
            let index = value - self.config.base_spi;
            self.counters.borrow_mut()[index as usize] += 1;
            self.lines[index as usize].pulse();
        } else {
            *self.warnings.borrow_mut() += 1;
            self.tracer.warning(WarnKind::DoorbellOutOfRange);
        }
    }
}

impl BusTarget for MsiController {
    fn transport(&self, txn: &mut GenericPayload, delay: &mut SimTime) {
        let _ = delay;
        let offset = txn.address.wrapping_sub(self.config.base_address);
        if offset >= REGION_SIZE || txn.len() as u64 > REGION_SIZE - offset {
            txn.set_response(Response::AddressError);
            return;
        }
        match txn.direction {
            Direction::Write => {
                // Posted-write semantics: in-range values pulse, everything
                // else (wrong offset, wrong width, out-of-range number) is
                // absorbed with a warning where it indicates a bad driver.
                if offset == SETSPI_OFFSET && txn.len() == 4 {
                    let value = u32::from_le_bytes(txn.data().try_into().unwrap());
                    self.doorbell_write(value);
                }
                txn.set_response(Response::Ok);
            }
            Direction::Read => {
                let value: u32 = if offset == TYPER_OFFSET { self.typer() } else { 0 };
                let bytes = value.to_le_bytes();
                for (i, b) in txn.data_mut().iter_mut().enumerate() {
                    *b = bytes.get(i).copied().unwrap_or(0);
                }
                txn.set_response(Response::Ok);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn controller() -> MsiController {
        MsiController::new(
            DoorbellConfig {
                base_address: 0x0800_0000,
                base_spi: 64,
                num_spis: 13,
            },
            Tracer::disabled(),
        )
    }

    fn write32(ctl: &MsiController, offset: u64, value: u32) -> Response {
        let mut txn =
            GenericPayload::write(ctl.config.base_address + offset, &value.to_le_bytes());
        let mut delay = SimTime::ZERO;
        ctl.transport(&mut txn, &mut delay);
        txn.response()
    }

    fn read32(ctl: &MsiController, offset: u64) -> u32 {
        let mut txn = GenericPayload::read(ctl.config.base_address + offset, 4);
        let mut delay = SimTime::ZERO;
        ctl.transport(&mut txn, &mut delay);
        assert_eq!(txn.response(), Response::Ok);
        u32::from_le_bytes(txn.data().try_into().unwrap())
    }

    #[test]
    fn first_spi_pulses_line_zero() {
        let ctl = controller();
        assert_eq!(write32(&ctl, SETSPI_OFFSET, 64), Response::Ok);
        assert_eq!(ctl.counter(0), 1);
        assert_eq!(ctl.line(0).rising_edges(), 1);
    }

    #[test]
    fn one_past_the_range_warns_without_a_pulse() {
        let ctl = controller();
        write32(&ctl, SETSPI_OFFSET, 64 + 13);
        assert_eq!(ctl.warnings(), 1);
        assert!((0..13).all(|i| ctl.counter(i) == 0));
    }

    #[test]
    fn counters_replay_the_write_sequence() {
        let ctl = controller();
        for _ in 0..3 {
            write32(&ctl, SETSPI_OFFSET, 64 + 4);
        }
        assert_eq!(ctl.counter(4), 3);
        assert_eq!(ctl.line(4).rising_edges(), 3);
    }

    /// The invariant checked against an independent fold: pulses per line
    /// equal the in-range doorbell writes carrying that line's number.
    #[test]
    fn pulse_counts_match_a_trace_replay() {
        let ctl = controller();
        let writes: &[u32] = &[64, 70, 64, 999, 76, 70, 64, 63, 77];
        for &w in writes {
            write32(&ctl, SETSPI_OFFSET, w);
        }
        for index in 0..13u32 {
            let expected = writes.iter().filter(|&&w| w == 64 + index).count() as u64;
            assert_eq!(ctl.counter(index), expected, "vector {index}");
            assert_eq!(ctl.line(index).rising_edges(), expected);
        }
        let expected_warnings = writes
            .iter()
            .filter(|&&w| !(64..64 + 13).contains(&w))
            .count() as u64;
        assert_eq!(ctl.warnings(), expected_warnings);
    }

    #[test]
    fn writes_off_the_doorbell_never_pulse() {
        let ctl = controller();
        write32(&ctl, 0x000, 64);
        write32(&ctl, 0x044, 64);
        write32(&ctl, TYPER_OFFSET, 64);
        assert!((0..13).all(|i| ctl.counter(i) == 0));
    }

    #[test]
    fn typer_encodes_the_configured_range() {
        let ctl = controller();
        let typer = read32(&ctl, TYPER_OFFSET);
        // Independent unpack of the documented bit fields.
        assert_eq!((typer >> 16) & 0x3FF, 64);
        assert_eq!(typer & 0x3FF, 13);
        assert_eq!(read32(&ctl, TYPER_OFFSET), typer, "TYPER is read-only");
    }

    #[test]
    #[should_panic(expected = "at least one")]
    fn zero_spis_is_rejected() {
        let _ = MsiController::new(
            DoorbellConfig {
                base_address: 0,
                base_spi: 0,
                num_spis: 0,
            },
            Tracer::disabled(),
        );
    }

    #[test]
    fn out_of_region_access_is_an_address_error() {
        let ctl = controller();
        let mut txn = GenericPayload::read(ctl.config.base_address + REGION_SIZE, 4);
        let mut delay = SimTime::ZERO;
        ctl.transport(&mut txn, &mut delay);
        assert_eq!(txn.response(), Response::AddressError);
    }
}
