//! Virtual time, counted in picoseconds.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub};

/// A point in (or span of) virtual time with picosecond resolution.
///
/// A 64-bit picosecond counter covers roughly 213 days of simulated time,
/// which is far beyond the scale of any scenario this framework targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_ps(ps: u64) -> Self {
        SimTime(ps)
    }

    pub const fn from_ns(ns: u64) -> Self {
        SimTime(ns * 1_000)
    }

    pub const fn from_us(us: u64) -> Self {
        SimTime(us * 1_000_000)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000_000_000)
    }

    pub const fn as_ps(self) -> u64 {
        self.0
    }

    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Parses a duration like `10ns`, `1.5us` or `250ps`.
    ///
    /// Accepted suffixes are `ps`, `ns`, `us`, `ms` and `s`. Fractional
    /// values are allowed as long as the result is a whole picosecond count.
    pub fn parse(text: &str) -> Result<Self, ParseTimeError> {
        let text = text.trim();
        let split = text
            .find(|c: char| c.is_ascii_alphabetic())
            .ok_or_else(|| ParseTimeError(text.to_string()))?;
        let (num, unit) = text.split_at(split);
        let scale: u64 = match unit {
            "ps" => 1,
            "ns" => 1_000,
            "us" => 1_000_000,
            "ms" => 1_000_000_000,
            "s" => 1_000_000_000_000,
            _ => return Err(ParseTimeError(text.to_string())),
        };
        let value: f64 = num.trim().parse().map_err(|_| ParseTimeError(text.to_string()))?;
        if !value.is_finite() || value < 0.0 {
            return Err(ParseTimeError(text.to_string()));
        }
        let ps = value * scale as f64;
        if ps.fract() != 0.0 || ps > u64::MAX as f64 {
            return Err(ParseTimeError(text.to_string()));
        }
        Ok(SimTime(ps as u64))
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("invalid duration: {0:?} (expected e.g. \"10ns\", \"1us\")")]
pub struct ParseTimeError(String);

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_add(rhs.0).expect("virtual time overflow"))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        *self = *self + rhs;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_sub(rhs.0).expect("virtual time underflow"))
    }
}

impl Sum for SimTime {
    fn sum<I: Iterator<Item = SimTime>>(iter: I) -> Self {
        iter.fold(SimTime::ZERO, Add::add)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ps = self.0;
        if ps == 0 {
            return write!(f, "0s");
        }
        for (scale, unit) in [
            (1_000_000_000_000, "s"),
            (1_000_000_000, "ms"),
            (1_000_000, "us"),
            (1_000, "ns"),
        ] {
            if ps.is_multiple_of(scale) {
                return write!(f, "{}{}", ps / scale, unit);
            }
        }
        write!(f, "{}ps", ps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_is_additive() {
        assert_eq!(SimTime::from_ns(100) + SimTime::from_ns(5), SimTime::from_ns(105));
        assert_eq!(SimTime::from_us(1) - SimTime::from_ns(1), SimTime::from_ps(999_000));
    }

    #[test]
    fn parse_accepts_common_suffixes() {
        assert_eq!(SimTime::parse("10ns").unwrap(), SimTime::from_ns(10));
        assert_eq!(SimTime::parse("1.5us").unwrap(), SimTime::from_ps(1_500_000));
        assert_eq!(SimTime::parse("0ps").unwrap(), SimTime::ZERO);
        assert_eq!(SimTime::parse(" 2 ms ").unwrap(), SimTime::from_ms(2));
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(SimTime::parse("10").is_err());
        assert!(SimTime::parse("ns").is_err());
        assert!(SimTime::parse("-4ns").is_err());
        assert!(SimTime::parse("1.0001ps").is_err());
        assert!(SimTime::parse("10 parsecs").is_err());
    }

    #[test]
    fn display_picks_coarsest_exact_unit() {
        assert_eq!(SimTime::from_ns(4096).to_string(), "4096ns");
        assert_eq!(SimTime::from_us(1).to_string(), "1us");
        assert_eq!(SimTime::from_ps(1_001).to_string(), "1001ps");
        assert_eq!(SimTime::ZERO.to_string(), "0s");
    }
}
