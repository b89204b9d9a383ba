//! Stateless multipath balancing: timestamp slot tables, random packet
//! spraying, and per-flow hashing, plus the toggle-bit sizing rule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pipeline::{Action, FlowKey, FlowRule, KeyMatch, Packet, PortId};
use crate::timebase::BitIndex;
use crate::trange::{compile_periodic, PeriodicRange, TrangeError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BalanceError {
    #[error("weights sum to {got}, expected 2^{bits}")]
    WeightSum { got: u64, bits: u8 },
    #[error("balance policy needs at least one path")]
    NoPaths,
    #[error(transparent)]
    Range(#[from] TrangeError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BalanceMode {
    /// Slot-table lookup over designated timestamp bits: slot i of the
    /// 2^slot_bits cycle forwards on `table[i]` (an index into `paths`).
    DptPeriodic {
        slot_lsb: BitIndex,
        slot_bits: u8,
        table: Vec<u8>,
    },
    /// Uniform random path per packet.
    Rps,
    /// Hash of the flow key; all packets of a flow share a path.
    Ecmp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancePolicy {
    pub paths: Vec<PortId>,
    pub mode: BalanceMode,
}

impl BalancePolicy {
    pub fn rps(paths: Vec<PortId>) -> Result<Self, BalanceError> {
        if paths.is_empty() {
            return Err(BalanceError::NoPaths);
        }
        Ok(BalancePolicy {
            paths,
            mode: BalanceMode::Rps,
        })
    }

    pub fn ecmp(paths: Vec<PortId>) -> Result<Self, BalanceError> {
        if paths.is_empty() {
            return Err(BalanceError::NoPaths);
        }
        Ok(BalancePolicy {
            paths,
            mode: BalanceMode::Ecmp,
        })
    }

    /// Time-division policy: path i owns `weights[i]` of the `2^slot_bits`
    /// slots (weights must sum to the slot count). Slots are assigned to
    /// paths in contiguous runs, lowest slot first.
    pub fn dpt_weighted(
        slot_lsb: BitIndex,
        slot_bits: u8,
        paths_weights: Vec<(PortId, u32)>,
    ) -> Result<Self, BalanceError> {
        if paths_weights.is_empty() {
            return Err(BalanceError::NoPaths);
        }
        let total: u64 = paths_weights.iter().map(|(_, w)| *w as u64).sum();
        if total != 1u64 << slot_bits {
            return Err(BalanceError::WeightSum {
                got: total,
                bits: slot_bits,
            });
        }
        let mut table = Vec::with_capacity(total as usize);
        for (i, (_, w)) in paths_weights.iter().enumerate() {
            table.extend(std::iter::repeat_n(i as u8, *w as usize));
        }
        Ok(BalancePolicy {
            paths: paths_weights.into_iter().map(|(p, _)| p).collect(),
            mode: BalanceMode::DptPeriodic {
                slot_lsb,
                slot_bits,
                table,
            },
        })
    }

    /// Picks an output port for one packet. In DPT mode an unstamped packet
    /// falls back to the first path.
    pub fn pick(&self, pkt: &Packet, rng: &mut ChaCha8Rng) -> PortId {
        match &self.mode {
            BalanceMode::DptPeriodic {
                slot_lsb,
                slot_bits,
                table,
            } => match pkt.dpt {
                Some(ts) => {
                    let slot = (ts.to_bits() >> slot_lsb.bit_position())
                        & ((1u64 << slot_bits) - 1);
                    self.paths[table[slot as usize] as usize]
                }
                None => self.paths[0],
            },
            BalanceMode::Rps => self.paths[rng.random_range(0..self.paths.len())],
            BalanceMode::Ecmp => {
                self.paths[(hash_flow(&pkt.flow) % self.paths.len() as u64) as usize]
            }
        }
    }
}

/// Picks the forwarding path for one packet under the given policy.
pub fn balance(policy: &BalancePolicy, pkt: &Packet, rng: &mut ChaCha8Rng) -> PortId {
    policy.pick(pkt, rng)
}

/// FNV-1a over the flow key fields; fixed algorithm so path placement never
/// depends on the process or toolchain.
pub fn hash_flow(key: &FlowKey) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for b in key.src.0.to_be_bytes() {
        eat(b);
    }
    for b in key.dst.0.to_be_bytes() {
        eat(b);
    }
    eat(key.proto);
    for b in key.sport.to_be_bytes() {
        eat(b);
    }
    for b in key.dport.to_be_bytes() {
        eat(b);
    }
    h
}

/// Chooses the Time.Frac bit whose toggle half-period is the largest value
/// not exceeding the inter-packet interval `mtu * 8 / total_path_rate`.
/// Returns the bit and its half-period in seconds.
pub fn compute_toggle_interval(total_path_rate_bps: f64, mtu_bytes: u32) -> (BitIndex, f64) {
    let inter_packet = mtu_bytes as f64 * 8.0 / total_path_rate_bps;
    let mut best = BitIndex::frac(1).expect("index 1 valid");
    for idx in 1..=32u8 {
        let bit = BitIndex::frac(idx).expect("index in range");
        if bit.half_period_seconds() <= inter_packet {
            best = bit;
        } else {
            break;
        }
    }
    (best, best.half_period_seconds())
}

/// Builds the per-path match rules of a DPT slot table: one rule per ternary
/// entry of each path's active-slot compilation.
pub fn dpt_balance_rules(
    key: KeyMatch,
    slot_lsb: BitIndex,
    slot_bits: u8,
    path_slots: &[(PortId, Vec<u32>)],
    first_rule_id: u64,
    priority: u32,
) -> Result<Vec<FlowRule>, BalanceError> {
    let mut rules = Vec::new();
    let mut id = first_rule_id;
    for (port, slots) in path_slots {
        let range = PeriodicRange::new(slot_lsb, slot_bits, slots.iter().copied())
            .or_else(|e| match e {
                // A path owning every slot is a legal degenerate table.
                TrangeError::FullSlots => PeriodicRange::always(slot_lsb, slot_bits),
                other => Err(other),
            })?;
        for pattern in compile_periodic(&range)? {
            rules.push(
                FlowRule::new(id, priority, key, Action::Forward(*port)).with_ts_match(pattern),
            );
            id += 1;
        }
    }
    Ok(rules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::NodeId;
    use crate::timebase::NtpTimestamp;
    use rand::SeedableRng;

    fn flow() -> FlowKey {
        FlowKey {
            src: NodeId(0),
            dst: NodeId(1),
            proto: 6,
            sport: 40000,
            dport: 5001,
        }
    }

    fn stamped(ts_units: u64) -> Packet {
        let mut p = Packet::new(0, flow(), 1500, 0, 0.0);
        p.dpt = Some(NtpTimestamp::from_bits(ts_units));
        p
    }

    #[test]
    fn one_bit_policy_alternates() {
        let bit = BitIndex::frac(12).unwrap();
        let policy = BalancePolicy::dpt_weighted(
            bit,
            1,
            vec![(PortId(1), 1), (PortId(2), 1)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(policy.pick(&stamped(0), &mut rng), PortId(1));
        assert_eq!(policy.pick(&stamped(1 << 11), &mut rng), PortId(2));
        assert_eq!(policy.pick(&stamped(1 << 12), &mut rng), PortId(1));
    }

    #[test]
    fn ecmp_pins_a_flow_to_one_path() {
        let policy =
            BalancePolicy::ecmp(vec![PortId(1), PortId(2), PortId(3)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = policy.pick(&stamped(0), &mut rng);
        for units in 1..1000u64 {
            assert_eq!(policy.pick(&stamped(units * 977), &mut rng), first);
        }
    }

    #[test]
    fn toggle_interval_examples() {
        // 20 Gb/s, 1500 B: a packet every 0.6 us, bit 12 toggles ~0.477 us.
        let (bit, period) = compute_toggle_interval(20e9, 1500);
        assert_eq!(bit, BitIndex::frac(12).unwrap());
        assert!((period - 4.76837158203125e-7).abs() < 1e-20);

        // Same rule at Mb/s scale.
        let (bit, period) = compute_toggle_interval(20e6, 1500);
        assert_eq!(bit, BitIndex::frac(22).unwrap());
        assert!((period - 2f64.powi(-11)).abs() < 1e-20);

        // Exact power-of-two boundary picks that bit.
        let mtu = 1024u32; // 8192 bits
        let rate = 8192.0 * (1u64 << 21) as f64; // inter-packet exactly 2^-21 s
        let (bit, _) = compute_toggle_interval(rate, mtu);
        assert_eq!(bit, BitIndex::frac(12).unwrap());
    }

    #[test]
    fn weighted_shares_follow_slots() {
        // 8 slots split 4:3:1; jittered stamps land in slots uniformly.
        let bit = BitIndex::frac(20).unwrap();
        let policy = BalancePolicy::dpt_weighted(
            bit,
            3,
            vec![(PortId(1), 4), (PortId(2), 3), (PortId(3), 1)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0u64; 3];
        let n = 100_000;
        let mut t_units: u64 = 0;
        for _ in 0..n {
            // Mean spacing ~1.2 slots of bit 20 with jitter.
            t_units += rng.random_range(400_000..900_000);
            let port = policy.pick(&stamped(t_units), &mut rng);
            counts[(port.0 - 1) as usize] += 1;
        }
        let share = |c: u64| c as f64 / n as f64;
        assert!((share(counts[0]) - 0.5).abs() < 0.02, "{counts:?}");
        assert!((share(counts[1]) - 0.375).abs() < 0.02, "{counts:?}");
        assert!((share(counts[2]) - 0.125).abs() < 0.02, "{counts:?}");
    }

    #[test]
    fn weight_sum_must_match_slots() {
        let bit = BitIndex::frac(20).unwrap();
        assert_eq!(
            BalancePolicy::dpt_weighted(bit, 3, vec![(PortId(1), 4), (PortId(2), 3)])
                .unwrap_err(),
            BalanceError::WeightSum { got: 7, bits: 3 }
        );
    }

    #[test]
    fn slot_rules_compile_per_path() {
        let bit = BitIndex::frac(22).unwrap();
        let rules = dpt_balance_rules(
            KeyMatch::any(),
            bit,
            1,
            &[(PortId(1), vec![0]), (PortId(2), vec![1])],
            100,
            50,
        )
        .unwrap();
        assert_eq!(rules.len(), 2);
        let ts0 = NtpTimestamp::from_bits(0);
        let ts1 = NtpTimestamp::from_bits(1 << 21);
        assert!(rules[0].ts_match.unwrap().matches_ts(ts0));
        assert!(!rules[0].ts_match.unwrap().matches_ts(ts1));
        assert!(rules[1].ts_match.unwrap().matches_ts(ts1));
    }
}
