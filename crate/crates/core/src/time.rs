//! Time representation shared by the virtual and the real clock.
//!
//! Time is kept as an integer number of ticks; one time unit is
//! [`TICKS_PER_UNIT`] ticks. In virtual mode a unit is abstract, in real
//! mode one unit is one microsecond of wall time.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

pub const TICKS_PER_UNIT: u64 = 1_000_000;

/// An instant or a span on the runtime clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VTime(pub u64);

impl VTime {
    pub const ZERO: VTime = VTime(0);
    pub const MAX: VTime = VTime(u64::MAX);

    pub fn from_units(units: f64) -> VTime {
        assert!(units.is_finite() && units >= 0.0, "negative or non-finite time: {units}");
        VTime((units * TICKS_PER_UNIT as f64).round() as u64)
    }

    pub fn units(n: u64) -> VTime {
        VTime(n * TICKS_PER_UNIT)
    }

    pub fn as_units(self) -> f64 {
        self.0 as f64 / TICKS_PER_UNIT as f64
    }

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: VTime) -> VTime {
        VTime(self.0.saturating_sub(other.0))
    }

    /// Smallest multiple of `period` that is `>= self`.
    pub fn ceil_to(self, period: VTime) -> VTime {
        if period.0 == 0 {
            return self;
        }
        VTime(self.0.div_ceil(period.0) * period.0)
    }

    /// Parses the fixed-point text form written by `Display`.
    pub fn parse(s: &str) -> Option<VTime> {
        let s = s.trim();
        let (int, frac) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if frac.len() > 6 || int.is_empty() {
            return None;
        }
        let int: u64 = int.parse().ok()?;
        let mut frac_ticks: u64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
        for _ in frac.len()..6 {
            frac_ticks *= 10;
        }
        Some(VTime(int.checked_mul(TICKS_PER_UNIT)?.checked_add(frac_ticks)?))
    }
}

impl fmt::Display for VTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / TICKS_PER_UNIT, self.0 % TICKS_PER_UNIT)
    }
}

impl Add for VTime {
    type Output = VTime;
    fn add(self, rhs: VTime) -> VTime {
        VTime(self.0 + rhs.0)
    }
}

impl AddAssign for VTime {
    fn add_assign(&mut self, rhs: VTime) {
        self.0 += rhs.0;
    }
}

impl Sub for VTime {
    type Output = VTime;
    fn sub(self, rhs: VTime) -> VTime {
        VTime(self.0 - rhs.0)
    }
}
