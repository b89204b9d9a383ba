//! Compiles time ranges into ternary (value, mask) match entries.
//!
//! Two range forms are supported: extremal ranges `T >= T0` and periodic
//! ranges over a bit-aligned slot field. Both compile to sets of
//! [`TernaryPattern`]s whose union matches exactly the range members; an
//! exhaustive enumeration oracle ([`oracle_members`]) verifies covers at
//! reduced widths, and [`minimize`] performs oracle-guarded greedy cube
//! merging.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::timebase::{BitIndex, NtpTimestamp};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrangeError {
    #[error("width {0} outside 1..=64")]
    BadWidth(u32),
    #[error("t0 {t0:#x} not representable in {width} bits")]
    NotRepresentable { t0: u64, width: u32 },
    #[error("width {0} too large for exhaustive enumeration (max 20)")]
    OracleWidth(u32),
    #[error("periodic range has no active slots; install an explicit drop rule instead")]
    EmptySlots,
    #[error("all 2^k slots active; construct an always-range explicitly")]
    FullSlots,
    #[error("slot {slot} outside 0..2^{bits}")]
    SlotOutOfRange { slot: u32, bits: u8 },
    #[error("slot field of {bits} bits at {base} exceeds the 64-bit timestamp")]
    SlotFieldTooWide { bits: u8, base: u32 },
    #[error("slot count 2^{0} exceeds the enumeration bound (k <= 16)")]
    TooManySlots(u8),
}

/// A ternary match entry: `matches(v)` iff `v & mask == value`.
/// Don't-care bits of `value` are kept zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TernaryPattern {
    value: u64,
    mask: u64,
}

impl TernaryPattern {
    pub fn new(value: u64, mask: u64) -> Self {
        TernaryPattern {
            value: value & mask,
            mask,
        }
    }

    /// Matches every value.
    pub fn wildcard() -> Self {
        TernaryPattern { value: 0, mask: 0 }
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn mask(&self) -> u64 {
        self.mask
    }

    pub fn matches(&self, bits: u64) -> bool {
        bits & self.mask == self.value
    }

    pub fn matches_ts(&self, ts: NtpTimestamp) -> bool {
        self.matches(ts.to_bits())
    }

    /// True if every value matched by `self` is also matched by `other`.
    pub fn subsumed_by(&self, other: &TernaryPattern) -> bool {
        other.mask & !self.mask == 0 && self.value & other.mask == other.value
    }

    /// Bit string, most significant bit first, `*` for don't-care.
    pub fn render(&self, width: u32) -> String {
        (0..width)
            .rev()
            .map(|i| {
                if self.mask >> i & 1 == 1 {
                    if self.value >> i & 1 == 1 {
                        '1'
                    } else {
                        '0'
                    }
                } else {
                    '*'
                }
            })
            .collect()
    }

    /// Renders the full 64-bit pattern split into the two timestamp fields.
    pub fn render_ntp(&self) -> String {
        let s = self.render(64);
        format!("Sec={} Frac={}", &s[..32], &s[32..])
    }
}

/// The range `T >= t0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtremalRange {
    pub t0: NtpTimestamp,
}

impl ExtremalRange {
    pub fn new(t0: NtpTimestamp) -> Self {
        ExtremalRange { t0 }
    }

    pub fn member(&self, ts: NtpTimestamp) -> bool {
        ts >= self.t0
    }

    /// Compiles over the full 64-bit timestamp.
    pub fn compile(&self) -> Vec<TernaryPattern> {
        compile_extremal(self.t0.to_bits(), 64).expect("64-bit value always representable")
    }
}

fn width_mask(width: u32) -> u64 {
    if width == 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// `!0 << n` that saturates to zero at n >= 64.
fn high_bits_from(n: u32) -> u64 {
    if n >= 64 {
        0
    } else {
        !0u64 << n
    }
}

/// Compiles `v >= t0` over `width`-bit values into a disjoint pattern set.
///
/// One entry is emitted per 0-bit of `t0` above its least significant 1-bit
/// (matching the half-open interval where that bit flips to 1), plus one
/// exact-prefix entry covering `[t0, t0 + 2^lsb)`. `t0 = 0` compiles to the
/// single all-wildcard entry.
pub fn compile_extremal(t0: u64, width: u32) -> Result<Vec<TernaryPattern>, TrangeError> {
    if width == 0 || width > 64 {
        return Err(TrangeError::BadWidth(width));
    }
    let wm = width_mask(width);
    if t0 & !wm != 0 {
        return Err(TrangeError::NotRepresentable { t0, width });
    }
    if t0 == 0 {
        return Ok(vec![TernaryPattern::wildcard()]);
    }
    let lsb = t0.trailing_zeros();
    let mut out = Vec::new();
    for i in (lsb + 1..width).rev() {
        if t0 >> i & 1 == 0 {
            // Values that agree with t0 above bit i and have bit i set are
            // all >= t0 regardless of the lower bits.
            let mask = high_bits_from(i) & wm;
            let value = (t0 & high_bits_from(i + 1) | 1 << i) & wm;
            out.push(TernaryPattern::new(value, mask));
        }
    }
    out.push(TernaryPattern::new(t0, high_bits_from(lsb) & wm));
    Ok(out)
}

/// A repeating set of bit-aligned time slots.
///
/// The slot field is `slot_bits` consecutive timestamp bits whose least
/// significant bit is `slot_lsb`; the field value is the slot index, so each
/// slot lasts one half-period of `slot_lsb` and the pattern repeats every
/// `2^slot_bits` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeriodicRange {
    slot_lsb: BitIndex,
    slot_bits: u8,
    active_slots: BTreeSet<u32>,
}

impl PeriodicRange {
    pub fn new(
        slot_lsb: BitIndex,
        slot_bits: u8,
        slots: impl IntoIterator<Item = u32>,
    ) -> Result<Self, TrangeError> {
        let r = Self::build(slot_lsb, slot_bits, slots.into_iter().collect())?;
        if r.active_slots.is_empty() {
            return Err(TrangeError::EmptySlots);
        }
        if r.active_slots.len() as u64 == r.slot_count() {
            return Err(TrangeError::FullSlots);
        }
        Ok(r)
    }

    /// All slots active; compiles to a single all-wildcard entry.
    pub fn always(slot_lsb: BitIndex, slot_bits: u8) -> Result<Self, TrangeError> {
        Self::build(slot_lsb, slot_bits, (0..1u64 << slot_bits).map(|s| s as u32).collect())
    }

    /// No slots active; refused by the compiler.
    pub fn never(slot_lsb: BitIndex, slot_bits: u8) -> Result<Self, TrangeError> {
        Self::build(slot_lsb, slot_bits, BTreeSet::new())
    }

    fn build(
        slot_lsb: BitIndex,
        slot_bits: u8,
        active_slots: BTreeSet<u32>,
    ) -> Result<Self, TrangeError> {
        if slot_bits == 0 || slot_bits > 16 {
            return Err(TrangeError::TooManySlots(slot_bits));
        }
        let base = slot_lsb.bit_position();
        if base + slot_bits as u32 > 64 {
            return Err(TrangeError::SlotFieldTooWide {
                bits: slot_bits,
                base,
            });
        }
        if let Some(&bad) = active_slots.iter().find(|&&s| s as u64 >= 1u64 << slot_bits) {
            return Err(TrangeError::SlotOutOfRange {
                slot: bad,
                bits: slot_bits,
            });
        }
        Ok(PeriodicRange {
            slot_lsb,
            slot_bits,
            active_slots,
        })
    }

    pub fn slot_count(&self) -> u64 {
        1u64 << self.slot_bits
    }

    pub fn slot_bits(&self) -> u8 {
        self.slot_bits
    }

    pub fn slot_lsb(&self) -> BitIndex {
        self.slot_lsb
    }

    pub fn active_slots(&self) -> &BTreeSet<u32> {
        &self.active_slots
    }

    pub fn slot_index(&self, ts: NtpTimestamp) -> u32 {
        let shifted = ts.to_bits() >> self.slot_lsb.bit_position();
        (shifted & width_mask(self.slot_bits as u32)) as u32
    }

    pub fn member(&self, ts: NtpTimestamp) -> bool {
        self.active_slots.contains(&self.slot_index(ts))
    }
}

/// Compiles a periodic range into an irredundant cube cover of its active
/// slots over the slot bits, all other timestamp bits wildcarded.
pub fn compile_periodic(r: &PeriodicRange) -> Result<Vec<TernaryPattern>, TrangeError> {
    if r.active_slots.is_empty() {
        return Err(TrangeError::EmptySlots);
    }
    if r.active_slots.len() as u64 == r.slot_count() {
        return Ok(vec![TernaryPattern::wildcard()]);
    }
    let cubes = irredundant_cover(&r.active_slots, r.slot_bits as u32);
    let base = r.slot_lsb.bit_position();
    Ok(cubes
        .into_iter()
        .map(|(v, m)| TernaryPattern::new((v as u64) << base, (m as u64) << base))
        .collect())
}

/// Quine-McCluskey prime implicants followed by a greedy irredundant cover.
/// Cubes are (value, mask) pairs over `width` bits.
fn irredundant_cover(minterms: &BTreeSet<u32>, width: u32) -> Vec<(u32, u32)> {
    let full = width_mask(width) as u32;
    let mut current: BTreeSet<(u32, u32)> = minterms.iter().map(|&m| (m, full)).collect();
    let mut primes: BTreeSet<(u32, u32)> = BTreeSet::new();

    while !current.is_empty() {
        let items: Vec<(u32, u32)> = current.iter().copied().collect();
        let mut merged_away: BTreeSet<(u32, u32)> = BTreeSet::new();
        let mut next: BTreeSet<(u32, u32)> = BTreeSet::new();
        for i in 0..items.len() {
            for j in i + 1..items.len() {
                let (v1, m1) = items[i];
                let (v2, m2) = items[j];
                if m1 == m2 && (v1 ^ v2).count_ones() == 1 {
                    let diff = v1 ^ v2;
                    next.insert((v1 & !diff, m1 & !diff));
                    merged_away.insert(items[i]);
                    merged_away.insert(items[j]);
                }
            }
        }
        for item in items {
            if !merged_away.contains(&item) {
                primes.insert(item);
            }
        }
        current = next;
    }

    let cube_members = |v: u32, m: u32| -> Vec<u32> {
        let wild = !m & full;
        let mut out = Vec::new();
        let mut s = wild;
        loop {
            out.push(v | s);
            if s == 0 {
                break;
            }
            s = (s - 1) & wild;
        }
        out
    };

    // Greedy cover: biggest cube first, then lowest value.
    let mut uncovered: BTreeSet<u32> = minterms.clone();
    let mut chosen: Vec<(u32, u32)> = Vec::new();
    while !uncovered.is_empty() {
        let best = primes
            .iter()
            .map(|&(v, m)| {
                let gain = cube_members(v, m)
                    .iter()
                    .filter(|x| uncovered.contains(x))
                    .count();
                (gain, std::cmp::Reverse(m.count_ones()), std::cmp::Reverse(v), (v, m))
            })
            .max()
            .map(|t| t.3)
            .expect("primes cover all minterms");
        for x in cube_members(best.0, best.1) {
            uncovered.remove(&x);
        }
        chosen.push(best);
    }

    // Prune until no entry is removable without losing coverage.
    let covers = |set: &[(u32, u32)], m: u32| set.iter().any(|&(cv, cm)| m & cm == cv);
    let mut i = 0;
    while i < chosen.len() {
        let mut rest = chosen.clone();
        rest.remove(i);
        if minterms.iter().all(|&m| covers(&rest, m)) {
            chosen = rest;
        } else {
            i += 1;
        }
    }
    chosen
}

/// Exact membership bitmap over all `width`-bit values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemberSet {
    width: u32,
    words: Vec<u64>,
}

impl MemberSet {
    pub fn empty(width: u32) -> Self {
        let n = 1usize << width;
        MemberSet {
            width,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn from_predicate(width: u32, pred: impl Fn(u64) -> bool) -> Self {
        let mut s = Self::empty(width);
        for v in 0..1u64 << width {
            if pred(v) {
                s.insert(v);
            }
        }
        s
    }

    pub fn insert(&mut self, v: u64) {
        self.words[(v / 64) as usize] |= 1 << (v % 64);
    }

    pub fn contains(&self, v: u64) -> bool {
        self.words[(v / 64) as usize] >> (v % 64) & 1 == 1
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        (0..1u64 << self.width).filter(|&v| self.contains(v))
    }
}

/// Exhaustive enumeration of all `width`-bit values matching at least one
/// pattern. Refuses widths above 20; this is the verification oracle and
/// stays independent of how the patterns were produced.
pub fn oracle_members(patterns: &[TernaryPattern], width: u32) -> Result<MemberSet, TrangeError> {
    if width == 0 || width > 20 {
        return Err(TrangeError::OracleWidth(width));
    }
    let wm = width_mask(width);
    let mut set = MemberSet::empty(width);
    for p in patterns {
        if p.value() & !wm != 0 {
            // Demands a set bit above the width; no width-bit value matches.
            continue;
        }
        // Walk every assignment of the don't-care bits.
        let wild = !p.mask() & wm;
        let base = p.value() & wm;
        let mut s = wild;
        loop {
            set.insert(base | s);
            if s == 0 {
                break;
            }
            s = (s - 1) & wild;
        }
    }
    Ok(set)
}

/// Greedy oracle-guarded cube merging: same-mask single-bit merges, one-bit
/// widenings, subsumption and redundancy pruning. The matched set is
/// preserved exactly (verified against the enumeration oracle); entry count
/// never grows. Not guaranteed globally minimal.
pub fn minimize(
    patterns: &[TernaryPattern],
    width: u32,
) -> Result<Vec<TernaryPattern>, TrangeError> {
    let target = oracle_members(patterns, width)?;
    let wm = width_mask(width);
    let mut set: Vec<TernaryPattern> = patterns.to_vec();

    let fits_target = |p: &TernaryPattern, target: &MemberSet| -> bool {
        if p.value() & !wm != 0 {
            return true; // matches nothing at this width
        }
        let wild = !p.mask() & wm;
        let base = p.value() & wm;
        let mut s = wild;
        loop {
            if !target.contains(base | s) {
                return false;
            }
            if s == 0 {
                break;
            }
            s = (s - 1) & wild;
        }
        true
    };

    let mut changed = true;
    while changed {
        changed = false;

        // Drop entries subsumed by another entry.
        let mut i = 0;
        while i < set.len() {
            if set
                .iter()
                .enumerate()
                .any(|(j, other)| j != i && set[i].subsumed_by(other))
            {
                set.remove(i);
                changed = true;
            } else {
                i += 1;
            }
        }

        // Merge pairs with equal masks differing in exactly one care bit.
        'merge: for i in 0..set.len() {
            for j in i + 1..set.len() {
                let (a, b) = (set[i], set[j]);
                if a.mask() == b.mask() && (a.value() ^ b.value()).count_ones() == 1 {
                    let diff = a.value() ^ b.value();
                    let merged = TernaryPattern::new(a.value() & !diff, a.mask() & !diff);
                    if fits_target(&merged, &target) {
                        set.remove(j);
                        set.remove(i);
                        set.push(merged);
                        changed = true;
                        break 'merge;
                    }
                }
            }
        }
        if changed {
            continue;
        }

        // Widen a single entry by releasing one care bit when the oracle
        // allows it, but only when the widened entry swallows some other
        // entry, so the following subsumption pass shrinks the set.
        'widen: for i in 0..set.len() {
            let p = set[i];
            let mut care = p.mask() & wm;
            while care != 0 {
                let bit = care & care.wrapping_neg();
                care &= care - 1;
                let widened = TernaryPattern::new(p.value() & !bit, p.mask() & !bit);
                if fits_target(&widened, &target) {
                    let swallows_other = set
                        .iter()
                        .enumerate()
                        .any(|(j, o)| j != i && o.subsumed_by(&widened));
                    if swallows_other {
                        set[i] = widened;
                        changed = true;
                        break 'widen;
                    }
                }
            }
        }
        if changed {
            continue;
        }

        // Remove entries whose members are fully covered by the rest.
        let mut i = 0;
        while i < set.len() {
            let mut rest = set.clone();
            rest.remove(i);
            if oracle_members(&rest, width)? == target {
                set = rest;
                changed = true;
            } else {
                i += 1;
            }
        }
    }

    debug_assert_eq!(oracle_members(&set, width)?, target);
    Ok(set)
}

/// Entry count predicted for `compile_extremal`: zero bits of `t0` strictly
/// above its least significant 1-bit, plus one.
pub fn extremal_entry_count(t0: u64, width: u32) -> u64 {
    if t0 == 0 {
        return 1;
    }
    let lsb = t0.trailing_zeros();
    (lsb + 1..width).filter(|&i| t0 >> i & 1 == 0).count() as u64 + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timebase::TsField;
    use proptest::prelude::*;

    #[test]
    fn fig3a_two_entries() {
        // T >= 2^30 s over the 32-bit seconds field.
        let got = compile_extremal(1 << 30, 32).unwrap();
        assert_eq!(
            got,
            vec![
                TernaryPattern::new(1 << 31, 1 << 31),
                TernaryPattern::new(1 << 30, 3 << 30),
            ]
        );
        assert_eq!(got[0].render(32), format!("1{}", "*".repeat(31)));
        assert_eq!(got[1].render(32), format!("01{}", "*".repeat(30)));
    }

    #[test]
    fn extremal_zero_is_wildcard() {
        assert_eq!(
            compile_extremal(0, 16).unwrap(),
            vec![TernaryPattern::wildcard()]
        );
    }

    #[test]
    fn extremal_five_width_four() {
        let got = compile_extremal(5, 4).unwrap();
        let rendered: Vec<String> = got.iter().map(|p| p.render(4)).collect();
        assert_eq!(rendered, vec!["1***", "011*", "0101"]);
        let members = oracle_members(&got, 4).unwrap();
        assert_eq!(members.iter().collect::<Vec<_>>(), (5..16).collect::<Vec<_>>());
    }

    #[test]
    fn extremal_rejects_unrepresentable() {
        assert_eq!(
            compile_extremal(16, 4).unwrap_err(),
            TrangeError::NotRepresentable { t0: 16, width: 4 }
        );
    }

    #[test]
    fn fig3b_single_entry() {
        // Active during the last half of every second: MSB of Time.Frac.
        let b = BitIndex::new(TsField::Frac, 32).unwrap();
        let r = PeriodicRange::new(b, 1, [1]).unwrap();
        let got = compile_periodic(&r).unwrap();
        assert_eq!(got, vec![TernaryPattern::new(1 << 31, 1 << 31)]);
    }

    #[test]
    fn periodic_full_needs_explicit_always() {
        let b = BitIndex::new(TsField::Frac, 1).unwrap();
        assert_eq!(
            PeriodicRange::new(b, 3, 0..8).unwrap_err(),
            TrangeError::FullSlots
        );
        let always = PeriodicRange::always(b, 3).unwrap();
        assert_eq!(
            compile_periodic(&always).unwrap(),
            vec![TernaryPattern::wildcard()]
        );
    }

    #[test]
    fn periodic_never_rejected_at_compile() {
        let b = BitIndex::new(TsField::Frac, 1).unwrap();
        let never = PeriodicRange::never(b, 3).unwrap();
        assert_eq!(compile_periodic(&never).unwrap_err(), TrangeError::EmptySlots);
    }

    #[test]
    fn periodic_lower_half_single_cube() {
        let b = BitIndex::new(TsField::Frac, 1).unwrap();
        let r = PeriodicRange::new(b, 3, [0, 1, 2, 3]).unwrap();
        let got = compile_periodic(&r).unwrap();
        // One entry testing the top slot bit = 0.
        assert_eq!(got, vec![TernaryPattern::new(0, 1 << 2)]);
    }

    #[test]
    fn periodic_slots_match_membership() {
        let b = BitIndex::new(TsField::Frac, 5).unwrap();
        let r = PeriodicRange::new(b, 3, [0, 2, 5]).unwrap();
        let pats = compile_periodic(&r).unwrap();
        for raw in 0..(1u64 << 10) {
            let ts = NtpTimestamp::from_bits(raw);
            let matched = pats.iter().any(|p| p.matches_ts(ts));
            assert_eq!(matched, r.member(ts), "raw={raw:#b}");
        }
    }

    #[test]
    fn oracle_wildcard_counts_everything() {
        let set = oracle_members(&[TernaryPattern::wildcard()], 4).unwrap();
        assert_eq!(set.count(), 16);
        assert!(oracle_members(&[], 21).is_err());
    }

    #[test]
    fn minimize_single_bit_merge() {
        let input = vec![
            TernaryPattern::new(0b0101, 0b1111),
            TernaryPattern::new(0b0111, 0b1111),
        ];
        let got = minimize(&input, 4).unwrap();
        assert_eq!(got, vec![TernaryPattern::new(0b0101, 0b1101)]);
    }

    #[test]
    fn minimize_keeps_irredundant_extremal() {
        let input = compile_extremal(1 << 14, 16).unwrap();
        assert_eq!(input.len(), 2);
        let got = minimize(&input, 16).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(
            oracle_members(&got, 16).unwrap(),
            oracle_members(&input, 16).unwrap()
        );
    }

    #[test]
    fn minimize_merges_slot_cover() {
        // Slots {0..5} of a 3-bit field given as three entries.
        let input = vec![
            TernaryPattern::new(0b000, 0b100),
            TernaryPattern::new(0b100, 0b111),
            TernaryPattern::new(0b101, 0b111),
        ];
        let got = minimize(&input, 3).unwrap();
        assert_eq!(
            got,
            vec![
                TernaryPattern::new(0b000, 0b100),
                TernaryPattern::new(0b100, 0b110),
            ]
        );
    }

    #[test]
    fn entry_count_formula_small_widths() {
        for width in [4u32, 8] {
            for t0 in 0..1u64 << width {
                let got = compile_extremal(t0, width).unwrap();
                assert_eq!(
                    got.len() as u64,
                    extremal_entry_count(t0, width),
                    "t0={t0} width={width}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn extremal_cover_is_exact(t0 in 0u64..4096, width in 12u32..=12) {
            let pats = compile_extremal(t0, width).unwrap();
            let got = oracle_members(&pats, width).unwrap();
            let want = MemberSet::from_predicate(width, |v| v >= t0);
            prop_assert_eq!(got, want);
        }

        #[test]
        fn periodic_cover_is_exact(seed_slots in prop::collection::btree_set(0u32..16, 1..15), base in 0u32..8) {
            let b = BitIndex::new(TsField::Frac, base as u8 + 1).unwrap();
            let r = PeriodicRange::new(b, 4, seed_slots.clone());
            prop_assume!(r.is_ok());
            let r = r.unwrap();
            let pats = compile_periodic(&r).unwrap();
            let width = base + 4 + 1; // cover the slot field plus a spare bit
            let got = oracle_members(&pats, width).unwrap();
            let want = MemberSet::from_predicate(width, |v| r.member(NtpTimestamp::from_bits(v)));
            prop_assert_eq!(got, want);
        }

        #[test]
        fn periodic_cover_is_irredundant(slots in prop::collection::btree_set(0u32..32, 1..31)) {
            let b = BitIndex::new(TsField::Frac, 1).unwrap();
            let r = PeriodicRange::new(b, 5, slots);
            prop_assume!(r.is_ok());
            let pats = compile_periodic(&r.unwrap()).unwrap();
            let full = oracle_members(&pats, 5).unwrap();
            for skip in 0..pats.len() {
                let rest: Vec<_> = pats.iter().enumerate()
                    .filter(|(i, _)| *i != skip)
                    .map(|(_, p)| *p)
                    .collect();
                prop_assert_ne!(oracle_members(&rest, 5).unwrap(), full.clone());
            }
        }

        #[test]
        fn minimize_preserves_members(raw in prop::collection::vec((0u64..256, 0u64..256), 1..8)) {
            let pats: Vec<TernaryPattern> =
                raw.into_iter().map(|(v, m)| TernaryPattern::new(v, m)).collect();
            let before = oracle_members(&pats, 8).unwrap();
            let after = minimize(&pats, 8).unwrap();
            prop_assert!(after.len() <= pats.len());
            prop_assert_eq!(oracle_members(&after, 8).unwrap(), before);
        }
    }
}
