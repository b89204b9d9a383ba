//! NTP-style timestamps, per-bit addressing, and per-node clock models.
//!
//! A timestamp is a 64-bit fixed-point value: 32 bits of whole seconds and
//! 32 bits of fractional seconds in units of 2^-32 s. The epoch is
//! simulation time zero. All arithmetic that feeds match logic stays on the
//! 2^-32 s grid so that bit extraction and range matching are exact.

use thiserror::Error;

use crate::simnet::NodeId;

/// Number of 2^-32 s units in one second.
pub const UNITS_PER_SEC: u64 = 1 << 32;

#[derive(Debug, Error, PartialEq)]
pub enum TimeError {
    #[error("clock produced a negative time")]
    NegativeTime,
    #[error("time {0} s does not fit the 32-bit seconds field")]
    OutOfRange(f64),
    #[error("bit index {0} outside 1..=32")]
    InvalidBitIndex(u8),
}

/// 64-bit NTP timestamp: whole seconds plus fractional seconds in 2^-32 s units.
///
/// Ordering is lexicographic on `(sec, frac)`, which coincides with numeric
/// order of the packed 64-bit value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NtpTimestamp {
    pub sec: u32,
    pub frac: u32,
}

impl NtpTimestamp {
    pub const ZERO: NtpTimestamp = NtpTimestamp { sec: 0, frac: 0 };

    pub fn new(sec: u32, frac: u32) -> Self {
        NtpTimestamp { sec, frac }
    }

    /// Packs as a 64-bit word, seconds in the high half, fraction in the low.
    pub fn to_bits(self) -> u64 {
        ((self.sec as u64) << 32) | self.frac as u64
    }

    pub fn from_bits(bits: u64) -> Self {
        NtpTimestamp {
            sec: (bits >> 32) as u32,
            frac: bits as u32,
        }
    }

    /// Converts nonnegative seconds to a timestamp, truncating toward zero
    /// at 2^-32 s resolution.
    pub fn from_seconds(t: f64) -> Result<Self, TimeError> {
        if t < 0.0 {
            return Err(TimeError::NegativeTime);
        }
        let sec = t.trunc();
        if sec >= 4_294_967_296.0 {
            return Err(TimeError::OutOfRange(t));
        }
        // For t >= 1, trunc(t) is within a factor of two of t, so the
        // subtraction is exact; the scale by 2^32 only shifts the exponent.
        let frac = ((t - sec) * 4_294_967_296.0).floor();
        let frac = if frac >= 4_294_967_296.0 {
            u32::MAX
        } else {
            frac as u32
        };
        Ok(NtpTimestamp {
            sec: sec as u32,
            frac,
        })
    }

    /// Value in seconds; exact to 2^-32 s within f64 precision.
    pub fn as_seconds(self) -> f64 {
        self.sec as f64 + self.frac as f64 / 4_294_967_296.0
    }

    /// The addressed bit of the timestamp, 0 or 1.
    pub fn bit(self, b: BitIndex) -> u8 {
        ((self.to_bits() >> b.bit_position()) & 1) as u8
    }

    /// Adds a span of 2^-32 s units, wrapping on 64-bit overflow.
    pub fn wrapping_add_units(self, units: u64) -> Self {
        Self::from_bits(self.to_bits().wrapping_add(units))
    }

    /// Signed difference `self - other` in 2^-32 s units.
    /// Exact while the true span stays below 2^31 seconds.
    pub fn delta(self, other: NtpTimestamp) -> NtpDelta {
        NtpDelta(self.to_bits().wrapping_sub(other.to_bits()) as i64)
    }
}

impl std::fmt::Display for NtpTimestamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{:010}", self.sec, self.frac)
    }
}

/// Signed span between two timestamps, in 2^-32 s units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct NtpDelta(pub i64);

impl NtpDelta {
    pub fn as_seconds(self) -> f64 {
        self.0 as f64 / 4_294_967_296.0
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }
}

impl std::ops::Sub for NtpDelta {
    type Output = NtpDelta;
    fn sub(self, rhs: NtpDelta) -> NtpDelta {
        NtpDelta(self.0 - rhs.0)
    }
}

/// Which 32-bit half of the timestamp a bit index addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TsField {
    Sec,
    Frac,
}

/// Addresses one bit of the 64-bit timestamp.
///
/// Indices are 1-based from the least significant bit of each field, so
/// (Sec, 7) toggles every 64 s and (Frac, 12) roughly every 0.5 us.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitIndex {
    field: TsField,
    index: u8,
}

impl BitIndex {
    pub fn new(field: TsField, index: u8) -> Result<Self, TimeError> {
        if (1..=32).contains(&index) {
            Ok(BitIndex { field, index })
        } else {
            Err(TimeError::InvalidBitIndex(index))
        }
    }

    pub fn sec(index: u8) -> Result<Self, TimeError> {
        Self::new(TsField::Sec, index)
    }

    pub fn frac(index: u8) -> Result<Self, TimeError> {
        Self::new(TsField::Frac, index)
    }

    pub fn field(self) -> TsField {
        self.field
    }

    pub fn index(self) -> u8 {
        self.index
    }

    /// Position of the addressed bit in the packed 64-bit word, 0-based.
    pub fn bit_position(self) -> u32 {
        match self.field {
            TsField::Frac => self.index as u32 - 1,
            TsField::Sec => 32 + self.index as u32 - 1,
        }
    }

    /// Half-period of the addressed bit in 2^-32 s units: the bit flips
    /// every time this many units elapse.
    pub fn half_period_units(self) -> u64 {
        1u64 << self.bit_position()
    }

    pub fn half_period_seconds(self) -> f64 {
        let e = match self.field {
            TsField::Frac => self.index as i32 - 33,
            TsField::Sec => self.index as i32 - 1,
        };
        (e as f64).exp2()
    }
}

impl std::fmt::Display for BitIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.field {
            TsField::Sec => write!(f, "sec:{}", self.index),
            TsField::Frac => write!(f, "frac:{}", self.index),
        }
    }
}

impl std::str::FromStr for BitIndex {
    type Err = String;

    /// Parses `sec:N` or `frac:N` with N in 1..=32.
    fn from_str(s: &str) -> Result<Self, String> {
        let (field, idx) = s
            .split_once(':')
            .ok_or_else(|| format!("bit index `{s}` is not of the form field:index"))?;
        let field = match field.to_ascii_lowercase().as_str() {
            "sec" => TsField::Sec,
            "frac" => TsField::Frac,
            other => return Err(format!("unknown timestamp field `{other}`")),
        };
        let index: u8 = idx
            .parse()
            .map_err(|_| format!("bad bit index `{idx}`"))?;
        BitIndex::new(field, index).map_err(|e| e.to_string())
    }
}

/// Per-node clock: `read(t) = t + offset + drift * t`.
///
/// The offset is quantized to the timestamp grid and applied as an exact
/// unit count, so two clocks that differ only in offset produce timestamps
/// that differ by exactly that many units. Drift is applied in the
/// continuous domain before truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockModel {
    pub owner: NodeId,
    offset_units: i64,
    pub drift_ppm: f64,
}

impl ClockModel {
    pub fn new(owner: NodeId, offset_s: f64, drift_ppm: f64) -> Self {
        ClockModel {
            owner,
            offset_units: (offset_s * UNITS_PER_SEC as f64).round() as i64,
            drift_ppm,
        }
    }

    pub fn identity(owner: NodeId) -> Self {
        Self::new(owner, 0.0, 0.0)
    }

    pub fn offset_seconds(&self) -> f64 {
        self.offset_units as f64 / UNITS_PER_SEC as f64
    }

    /// Local timestamp for true simulation time `t_true` (seconds),
    /// truncated toward zero at 2^-32 s.
    pub fn now(&self, t_true: f64) -> Result<NtpTimestamp, TimeError> {
        if t_true < 0.0 {
            return Err(TimeError::NegativeTime);
        }
        // Term-wise evaluation keeps drift * t exact for the ppm values the
        // experiments use (drift_ppm * t / 1e6 divides instead of scaling by
        // an inexact 1e-6 factor).
        let skewed = t_true + (self.drift_ppm * t_true) / 1e6;
        if skewed < 0.0 {
            return Err(TimeError::NegativeTime);
        }
        let base = NtpTimestamp::from_seconds(skewed)?;
        let shifted = base.to_bits() as i128 + self.offset_units as i128;
        if shifted < 0 {
            Err(TimeError::NegativeTime)
        } else if shifted > u64::MAX as i128 {
            Err(TimeError::OutOfRange(t_true))
        } else {
            Ok(NtpTimestamp::from_bits(shifted as u64))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(id: u32) -> NodeId {
        NodeId(id)
    }

    #[test]
    fn identity_clock_truncates() {
        let c = ClockModel::identity(node(0));
        assert_eq!(c.now(1.5).unwrap(), NtpTimestamp::new(1, 1 << 31));
        assert_eq!(c.now(0.0).unwrap(), NtpTimestamp::ZERO);
    }

    #[test]
    fn constant_offset_shifts() {
        let c = ClockModel::new(node(0), 0.25, 0.0);
        assert_eq!(c.now(1.0).unwrap(), NtpTimestamp::new(1, 1 << 30));
    }

    #[test]
    fn drift_accumulates() {
        // 100 ppm over 10_000 s adds exactly one second.
        let c = ClockModel::new(node(0), 0.0, 100.0);
        assert_eq!(c.now(10_000.0).unwrap(), NtpTimestamp::new(10_001, 0));
    }

    #[test]
    fn negative_clock_time_is_error() {
        let c = ClockModel::new(node(0), -10.0, 0.0);
        assert_eq!(c.now(1.0).unwrap_err(), TimeError::NegativeTime);
        assert!(c.now(11.0).is_ok());
    }

    #[test]
    fn bit_extraction() {
        let b_sec1 = BitIndex::sec(1).unwrap();
        assert_eq!(NtpTimestamp::new(1, 0).bit(b_sec1), 1);
        assert_eq!(NtpTimestamp::new(2, 0).bit(b_sec1), 0);

        let b_sec7 = BitIndex::sec(7).unwrap();
        assert_eq!(NtpTimestamp::new(64, 0).bit(b_sec7), 1);
        assert_eq!(NtpTimestamp::new(63, 0).bit(b_sec7), 0);

        let b_frac_msb = BitIndex::frac(32).unwrap();
        assert_eq!(NtpTimestamp::new(0, 1 << 31).bit(b_frac_msb), 1);
        assert_eq!(NtpTimestamp::new(0, (1 << 31) - 1).bit(b_frac_msb), 0);
    }

    #[test]
    fn toggle_half_periods() {
        let half_us = BitIndex::frac(12).unwrap().half_period_seconds();
        assert!((half_us - 4.76837158203125e-7).abs() < 1e-20);
        assert_eq!(BitIndex::frac(12).unwrap().half_period_units(), 1 << 11);

        assert_eq!(BitIndex::sec(7).unwrap().half_period_seconds(), 64.0);
        assert_eq!(BitIndex::sec(1).unwrap().half_period_seconds(), 1.0);
        assert_eq!(BitIndex::sec(1).unwrap().half_period_units(), 1 << 32);
    }

    #[test]
    fn bit_index_bounds() {
        assert!(BitIndex::sec(0).is_err());
        assert!(BitIndex::frac(33).is_err());
        assert!(BitIndex::frac(32).is_ok());
    }

    #[test]
    fn bit_index_parses() {
        let b: BitIndex = "frac:12".parse().unwrap();
        assert_eq!(b, BitIndex::frac(12).unwrap());
        assert!("frac".parse::<BitIndex>().is_err());
        assert!("hour:3".parse::<BitIndex>().is_err());
    }

    proptest! {
        #[test]
        fn adding_half_period_flips_bit(bits in any::<u64>(), field in 0..2u8, index in 1..=32u8) {
            let b = BitIndex::new(if field == 0 { TsField::Sec } else { TsField::Frac }, index).unwrap();
            let ts = NtpTimestamp::from_bits(bits);
            let moved = ts.wrapping_add_units(b.half_period_units());
            prop_assert_eq!(ts.bit(b) ^ 1, moved.bit(b));
        }

        #[test]
        fn now_is_monotone(
            t1 in 0.0f64..1e6, dt in 0.0f64..1e3,
            offset in -1.0f64..1.0, drift in -1000.0f64..1000.0,
        ) {
            let c = ClockModel::new(node(1), offset, drift);
            if let (Ok(a), Ok(b)) = (c.now(t1), c.now(t1 + dt)) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn ordering_matches_seconds(a in any::<u64>(), b in any::<u64>()) {
            let (x, y) = (NtpTimestamp::from_bits(a), NtpTimestamp::from_bits(b));
            // as_seconds is not injective at f64 precision, but order can
            // never invert.
            if x < y {
                prop_assert!(x.as_seconds() <= y.as_seconds());
            }
            prop_assert_eq!(x.cmp(&y), a.cmp(&b));
        }

        #[test]
        fn from_seconds_round_trips_grid(units in 0u64..(1u64 << 53)) {
            // Values on the grid below 2^53 units are exact in f64.
            let ts = NtpTimestamp::from_bits(units);
            prop_assert_eq!(NtpTimestamp::from_seconds(ts.as_seconds()).unwrap(), ts);
        }
    }
}
