//! Per-switch packet processing: DPT push at ingress, ternary flow-table
//! lookup (flow key, version tag, and masked timestamp bits), actions with
//! per-rule counters, timestamp registers, and DPT pop at egress.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::controller::balance::BalancePolicy;
use crate::simnet::NodeId;
use crate::timebase::{ClockModel, NtpTimestamp, TimeError};
use crate::trange::TernaryPattern;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RuleId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegisterId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId(pub u32);

/// Configuration-generation label carried by rules of one update round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EpochTag(pub u64);

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("packet already carries a timestamp header")]
    DoublePush,
    #[error("packet carries no timestamp header")]
    MissingDpt,
    #[error("flow table has no matching rule and no default")]
    NoMatch,
    #[error("packet resubmitted more than once")]
    ResubmitLoop,
    #[error("unknown port group {0:?}")]
    UnknownGroup(GroupId),
    #[error("unknown timestamp register {0:?}")]
    UnknownRegister(RegisterId),
    #[error(transparent)]
    Time(#[from] TimeError),
}

/// Five-tuple flow identity. Hosts are the address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub src: NodeId,
    pub dst: NodeId,
    pub proto: u8,
    pub sport: u16,
    pub dport: u16,
}

impl FlowKey {
    /// Key of traffic flowing the opposite way (ACKs and reverse blocks).
    pub fn reversed(&self, proto: u8) -> FlowKey {
        FlowKey {
            src: self.dst,
            dst: self.src,
            proto,
            sport: self.dport,
            dport: self.sport,
        }
    }
}

/// A simulated frame.
///
/// `size` is the on-wire size and includes the DPT header while present;
/// `dpt_overhead` remembers how many bytes the push added so the pop can
/// restore the original size exactly. `tag` and `block` are shim metadata
/// applied by ingress marking and stripped together with the DPT header.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub id: u64,
    pub flow: FlowKey,
    pub size: u32,
    pub dpt: Option<NtpTimestamp>,
    pub dpt_overhead: u32,
    pub seq: u64,
    pub created_at: f64,
    pub tag: Option<u8>,
    pub block: Option<u64>,
    pub ack: Option<u64>,
}

impl Packet {
    pub fn new(id: u64, flow: FlowKey, size: u32, seq: u64, created_at: f64) -> Packet {
        Packet {
            id,
            flow,
            size,
            dpt: None,
            dpt_overhead: 0,
            seq,
            created_at,
            tag: None,
            block: None,
            ack: None,
        }
    }

    /// Attaches the timestamp header: stamps the local clock and grows the
    /// on-wire size by `overhead` bytes (0 in one-bit mode).
    pub fn push_dpt(
        mut self,
        clock: &ClockModel,
        t_true: f64,
        overhead: u32,
    ) -> Result<Packet, PipelineError> {
        if self.dpt.is_some() {
            return Err(PipelineError::DoublePush);
        }
        self.dpt = Some(clock.now(t_true)?);
        self.dpt_overhead = overhead;
        self.size += overhead;
        Ok(self)
    }

    /// Removes the timestamp header and restores the original size.
    pub fn pop_dpt(mut self) -> Result<Packet, PipelineError> {
        if self.dpt.is_none() {
            return Err(PipelineError::MissingDpt);
        }
        self.dpt = None;
        self.size -= self.dpt_overhead;
        self.dpt_overhead = 0;
        Ok(self)
    }
}

/// Exact-or-wildcard match over the flow key plus the version tag shim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KeyMatch {
    pub src: Option<NodeId>,
    pub dst: Option<NodeId>,
    pub proto: Option<u8>,
    pub sport: Option<u16>,
    pub dport: Option<u16>,
    pub tag: Option<u8>,
}

impl KeyMatch {
    pub fn any() -> KeyMatch {
        KeyMatch::default()
    }

    pub fn for_flow(flow: FlowKey) -> KeyMatch {
        KeyMatch {
            src: Some(flow.src),
            dst: Some(flow.dst),
            proto: Some(flow.proto),
            sport: Some(flow.sport),
            dport: Some(flow.dport),
            tag: None,
        }
    }

    pub fn to_dst(dst: NodeId) -> KeyMatch {
        KeyMatch {
            dst: Some(dst),
            ..KeyMatch::default()
        }
    }

    pub fn with_tag(mut self, tag: u8) -> KeyMatch {
        self.tag = Some(tag);
        self
    }

    pub fn matches(&self, pkt: &Packet) -> bool {
        fn ok<T: PartialEq>(want: Option<T>, got: T) -> bool {
            want.map_or(true, |w| w == got)
        }
        ok(self.src, pkt.flow.src)
            && ok(self.dst, pkt.flow.dst)
            && ok(self.proto, pkt.flow.proto)
            && ok(self.sport, pkt.flow.sport)
            && ok(self.dport, pkt.flow.dport)
            && (self.tag.is_none() || self.tag == pkt.tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Forward(PortId),
    /// Stamp the packet and resubmit it to the table; only applicable to
    /// packets that do not yet carry a timestamp header.
    PushDpt,
    PopDptAndForward(PortId),
    Drop,
    RecordTsAndForward { port: PortId, register: RegisterId },
    /// Hand the packet to a port group (stateless balancing baselines).
    Balance(GroupId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RuleCounters {
    pub packets: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowRule {
    pub id: RuleId,
    pub priority: u32,
    pub key_match: KeyMatch,
    pub ts_match: Option<TernaryPattern>,
    pub action: Action,
    pub epoch_tag: Option<EpochTag>,
    pub counters: RuleCounters,
}

impl FlowRule {
    pub fn new(id: u64, priority: u32, key_match: KeyMatch, action: Action) -> FlowRule {
        FlowRule {
            id: RuleId(id),
            priority,
            key_match,
            ts_match: None,
            action,
            epoch_tag: None,
            counters: RuleCounters::default(),
        }
    }

    pub fn with_ts_match(mut self, pattern: TernaryPattern) -> FlowRule {
        self.ts_match = Some(pattern);
        self
    }

    pub fn with_epoch(mut self, epoch: EpochTag) -> FlowRule {
        self.epoch_tag = Some(epoch);
        self
    }

    /// Applicability: key fields, then the timestamp pattern (which requires
    /// a DPT header), and PushDpt only applies to unstamped packets.
    fn applicable(&self, pkt: &Packet) -> bool {
        if !self.key_match.matches(pkt) {
            return false;
        }
        if let Some(pattern) = &self.ts_match {
            match pkt.dpt {
                Some(ts) => {
                    if !pattern.matches_ts(ts) {
                        return false;
                    }
                }
                None => return false,
            }
        }
        if matches!(self.action, Action::PushDpt) && pkt.dpt.is_some() {
            return false;
        }
        true
    }
}

/// First-packet-per-block timestamp register.
///
/// Blocks are spans of `interval_units` on the timestamp grid, indexed by
/// the packet's own DPT value, so sender and receiver side agree on block
/// membership without consulting their clocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsRegister {
    pub id: RegisterId,
    pub interval_units: u64,
    pub valid: bool,
    pub block: u64,
    pub last_dpth: NtpTimestamp,
    pub local_time: NtpTimestamp,
}

impl TsRegister {
    pub fn new(id: RegisterId, interval_units: u64) -> TsRegister {
        TsRegister {
            id,
            interval_units,
            valid: false,
            block: 0,
            last_dpth: NtpTimestamp::ZERO,
            local_time: NtpTimestamp::ZERO,
        }
    }

    pub fn block_of(&self, dpth: NtpTimestamp) -> u64 {
        dpth.to_bits() / self.interval_units
    }

    /// Stores (dpth, local) for the first packet of each block; later
    /// packets of the same block and stragglers from older blocks are
    /// ignored.
    pub fn record(&mut self, dpth: NtpTimestamp, local: NtpTimestamp) {
        let block = self.block_of(dpth);
        if !self.valid || block > self.block {
            self.valid = true;
            self.block = block;
            self.last_dpth = dpth;
            self.local_time = local;
        }
    }
}

/// A fired rule as seen by the audit trail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Firing {
    pub rule: RuleId,
    pub epoch: Option<EpochTag>,
}

/// Outcome of running one packet through a switch.
#[derive(Debug)]
pub enum Verdict {
    Forward { port: PortId, pkt: Packet },
    Drop { pkt: Packet },
}

/// Stateless-balancing port group: a policy plus the group's own seeded
/// generator for random spraying.
#[derive(Debug, Clone)]
pub struct PortGroup {
    pub policy: BalancePolicy,
    pub rng: ChaCha8Rng,
}

/// One switch: a priority-ordered ternary flow table, timestamp registers,
/// port groups, ingress marking policy, and a local clock. Mutated only by
/// the event loop.
#[derive(Debug, Clone)]
pub struct Switch {
    pub id: NodeId,
    pub clock: ClockModel,
    pub dpt_overhead: u32,
    table: Vec<FlowRule>,
    pub registers: BTreeMap<RegisterId, TsRegister>,
    pub groups: BTreeMap<GroupId, PortGroup>,
    /// Version/color tag stamped on packets at DPT push, with the marking
    /// epoch used for ground-truth block attribution.
    pub tag_policy: Option<(u8, u64)>,
    /// Packets offered to the table (one per lookup, resubmits included).
    pub lookups: u64,
    /// Firings accumulated by rules that have since been removed.
    retired_counted: u64,
}

impl Switch {
    pub fn new(id: NodeId, clock: ClockModel, dpt_overhead: u32) -> Switch {
        Switch {
            id,
            clock,
            dpt_overhead,
            table: Vec::new(),
            registers: BTreeMap::new(),
            groups: BTreeMap::new(),
            tag_policy: None,
            lookups: 0,
            retired_counted: 0,
        }
    }

    pub fn install_rule(&mut self, rule: FlowRule) {
        let key = (std::cmp::Reverse(rule.priority), rule.id);
        let pos = self
            .table
            .partition_point(|r| (std::cmp::Reverse(r.priority), r.id) < key);
        self.table.insert(pos, rule);
    }

    pub fn remove_rules_by_epoch(&mut self, epoch: EpochTag) -> usize {
        let before = self.table.len();
        let retired: u64 = self
            .table
            .iter()
            .filter(|r| r.epoch_tag == Some(epoch))
            .map(|r| r.counters.packets)
            .sum();
        self.retired_counted += retired;
        self.table.retain(|r| r.epoch_tag != Some(epoch));
        before - self.table.len()
    }

    pub fn remove_rule(&mut self, id: RuleId) -> bool {
        let before = self.table.len();
        if let Some(r) = self.table.iter().find(|r| r.id == id) {
            self.retired_counted += r.counters.packets;
        }
        self.table.retain(|r| r.id != id);
        before != self.table.len()
    }

    pub fn rules(&self) -> &[FlowRule] {
        &self.table
    }

    pub fn rule(&self, id: RuleId) -> Option<&FlowRule> {
        self.table.iter().find(|r| r.id == id)
    }

    pub fn set_tag_policy(&mut self, tag: u8, epoch: u64) {
        self.tag_policy = Some((tag, epoch));
    }

    /// Highest-priority applicable rule; ties break toward the lowest rule
    /// id. Increments the winner's counters.
    pub fn lookup(&mut self, pkt: &Packet) -> Result<&FlowRule, PipelineError> {
        self.lookups += 1;
        // Table is sorted by (priority desc, id asc); first hit wins.
        let rule = self
            .table
            .iter_mut()
            .find(|r| r.applicable(pkt))
            .ok_or(PipelineError::NoMatch)?;
        rule.counters.packets += 1;
        rule.counters.bytes += pkt.size as u64;
        Ok(rule)
    }

    /// Full processing of one packet at true time `t_true`: lookup, action,
    /// and at most one resubmit after a DPT push. Returns the verdict and
    /// the rules that fired, in firing order.
    pub fn process(
        &mut self,
        mut pkt: Packet,
        t_true: f64,
    ) -> Result<(Verdict, Vec<Firing>), PipelineError> {
        let mut fired = Vec::with_capacity(1);
        for _round in 0..2 {
            let (action, firing) = {
                let rule = self.lookup(&pkt)?;
                (rule.action, Firing { rule: rule.id, epoch: rule.epoch_tag })
            };
            fired.push(firing);
            match action {
                Action::Forward(port) => {
                    return Ok((Verdict::Forward { port, pkt }, fired));
                }
                Action::Drop => {
                    return Ok((Verdict::Drop { pkt }, fired));
                }
                Action::PushDpt => {
                    pkt = pkt.push_dpt(&self.clock, t_true, self.dpt_overhead)?;
                    if let Some((tag, epoch)) = self.tag_policy {
                        pkt.tag = Some(tag);
                        pkt.block = Some(epoch);
                    }
                    // fall through to the second lookup
                }
                Action::PopDptAndForward(port) => {
                    pkt = pkt.pop_dpt()?;
                    pkt.tag = None;
                    pkt.block = None;
                    return Ok((Verdict::Forward { port, pkt }, fired));
                }
                Action::RecordTsAndForward { port, register } => {
                    let dpth = pkt.dpt.ok_or(PipelineError::MissingDpt)?;
                    // A skewed clock that cannot produce a valid local time
                    // yet leaves the register untouched; forwarding is not
                    // the measurement's hostage.
                    if let Ok(local) = self.clock.now(t_true) {
                        let reg = self
                            .registers
                            .get_mut(&register)
                            .ok_or(PipelineError::UnknownRegister(register))?;
                        reg.record(dpth, local);
                    }
                    return Ok((Verdict::Forward { port, pkt }, fired));
                }
                Action::Balance(group) => {
                    let g = self
                        .groups
                        .get_mut(&group)
                        .ok_or(PipelineError::UnknownGroup(group))?;
                    let port = g.policy.pick(&pkt, &mut g.rng);
                    return Ok((Verdict::Forward { port, pkt }, fired));
                }
            }
        }
        Err(PipelineError::ResubmitLoop)
    }

    /// Sum of per-rule packet counters, including rules since removed;
    /// equals `lookups` when every offered packet fired exactly one rule.
    pub fn counted_packets(&self) -> u64 {
        self.retired_counted + self.table.iter().map(|r| r.counters.packets).sum::<u64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timebase::BitIndex;
    use crate::trange::compile_periodic;
    use crate::trange::PeriodicRange;

    fn key() -> FlowKey {
        FlowKey {
            src: NodeId(0),
            dst: NodeId(1),
            proto: 6,
            sport: 1000,
            dport: 2000,
        }
    }

    fn pkt(id: u64) -> Packet {
        Packet::new(id, key(), 1500, id, 2.5)
    }

    fn ingress_switch() -> Switch {
        let mut sw = Switch::new(NodeId(10), ClockModel::identity(NodeId(10)), 8);
        sw.install_rule(FlowRule::new(0, 0, KeyMatch::any(), Action::Drop));
        sw.install_rule(FlowRule::new(1, 100, KeyMatch::any(), Action::PushDpt));
        sw.install_rule(FlowRule::new(2, 50, KeyMatch::any(), Action::Forward(PortId(1))));
        sw
    }

    #[test]
    fn push_stamps_and_grows() {
        let clock = ClockModel::identity(NodeId(0));
        let p = pkt(1).push_dpt(&clock, 2.5, 8).unwrap();
        assert_eq!(p.dpt, Some(NtpTimestamp::new(2, 1 << 31)));
        assert_eq!(p.size, 1508);

        let shifted = ClockModel::new(NodeId(0), 1.0, 0.0);
        let p = pkt(2).push_dpt(&shifted, 2.5, 8).unwrap();
        assert_eq!(p.dpt, Some(NtpTimestamp::new(3, 1 << 31)));
    }

    #[test]
    fn double_push_is_error() {
        let clock = ClockModel::identity(NodeId(0));
        let p = pkt(1).push_dpt(&clock, 1.0, 8).unwrap();
        assert_eq!(p.push_dpt(&clock, 2.0, 8).unwrap_err(), PipelineError::DoublePush);
    }

    #[test]
    fn push_pop_round_trips() {
        let clock = ClockModel::identity(NodeId(0));
        let original = pkt(1);
        let restored = original
            .clone()
            .push_dpt(&clock, 1.0, 8)
            .unwrap()
            .pop_dpt()
            .unwrap();
        assert_eq!(restored, original);
        assert_eq!(restored.pop_dpt().unwrap_err(), PipelineError::MissingDpt);
    }

    #[test]
    fn color_rules_split_by_timestamp_bit() {
        let color_bit = BitIndex::sec(1).unwrap();
        let c0 = compile_periodic(&PeriodicRange::new(color_bit, 1, [0]).unwrap()).unwrap();
        let c1 = compile_periodic(&PeriodicRange::new(color_bit, 1, [1]).unwrap()).unwrap();

        let mut sw = Switch::new(NodeId(3), ClockModel::identity(NodeId(3)), 8);
        sw.install_rule(FlowRule::new(0, 0, KeyMatch::any(), Action::Drop));
        sw.install_rule(
            FlowRule::new(1, 10, KeyMatch::any(), Action::Forward(PortId(0)))
                .with_ts_match(c0[0]),
        );
        sw.install_rule(
            FlowRule::new(2, 10, KeyMatch::any(), Action::Forward(PortId(0)))
                .with_ts_match(c1[0]),
        );

        let clock = ClockModel::identity(NodeId(0));
        // Even second: color 0 fires rule 1.
        let even = pkt(1).push_dpt(&clock, 2.25, 8).unwrap();
        sw.process(even, 2.25).unwrap();
        assert_eq!(sw.rule(RuleId(1)).unwrap().counters.packets, 1);
        assert_eq!(sw.rule(RuleId(2)).unwrap().counters.packets, 0);

        let odd = pkt(2).push_dpt(&clock, 3.75, 8).unwrap();
        sw.process(odd, 3.75).unwrap();
        assert_eq!(sw.rule(RuleId(2)).unwrap().counters.packets, 1);

        // Unstamped packets skip timestamp rules entirely and hit the default.
        sw.process(pkt(3), 4.0).unwrap();
        assert_eq!(sw.rule(RuleId(0)).unwrap().counters.packets, 1);
    }

    #[test]
    fn threshold_pair_prefers_new_epoch() {
        use crate::trange::compile_extremal;
        let thr = NtpTimestamp::new(100, 0);
        let mut sw = Switch::new(NodeId(3), ClockModel::identity(NodeId(3)), 8);
        sw.install_rule(FlowRule::new(0, 0, KeyMatch::any(), Action::Drop));
        sw.install_rule(
            FlowRule::new(1, 10, KeyMatch::any(), Action::Forward(PortId(0)))
                .with_epoch(EpochTag(0)),
        );
        for (i, pat) in compile_extremal(thr.to_bits(), 64).unwrap().iter().enumerate() {
            sw.install_rule(
                FlowRule::new(10 + i as u64, 20, KeyMatch::any(), Action::Forward(PortId(1)))
                    .with_ts_match(*pat)
                    .with_epoch(EpochTag(1)),
            );
        }

        let clock = ClockModel::identity(NodeId(0));
        let before = pkt(1).push_dpt(&clock, 99.0, 8).unwrap();
        let (v, fired) = sw.process(before, 99.0).unwrap();
        assert!(matches!(v, Verdict::Forward { port: PortId(0), .. }));
        assert_eq!(fired[0].epoch, Some(EpochTag(0)));

        let after = pkt(2).push_dpt(&clock, 100.0, 8).unwrap();
        let (v, fired) = sw.process(after, 100.0).unwrap();
        assert!(matches!(v, Verdict::Forward { port: PortId(1), .. }));
        assert_eq!(fired[0].epoch, Some(EpochTag(1)));
    }

    #[test]
    fn ingress_push_resubmits_once() {
        let mut sw = ingress_switch();
        sw.set_tag_policy(1, 7);
        let (v, fired) = sw.process(pkt(1), 2.5).unwrap();
        let out = match v {
            Verdict::Forward { port, pkt } => {
                assert_eq!(port, PortId(1));
                pkt
            }
            Verdict::Drop { .. } => panic!("expected forward"),
        };
        assert_eq!(fired.len(), 2);
        assert_eq!(out.dpt, Some(NtpTimestamp::new(2, 1 << 31)));
        assert_eq!(out.tag, Some(1));
        assert_eq!(out.block, Some(7));
        assert_eq!(out.size, 1508);
        assert_eq!(sw.lookups, 2);
        assert_eq!(sw.counted_packets(), 2);
    }

    #[test]
    fn egress_pop_restores_and_strips_shims() {
        let mut ingress = ingress_switch();
        ingress.set_tag_policy(0, 0);
        let (v, _) = ingress.process(pkt(9), 2.5).unwrap();
        let stamped = match v {
            Verdict::Forward { pkt, .. } => pkt,
            _ => panic!(),
        };

        let mut egress = Switch::new(NodeId(11), ClockModel::identity(NodeId(11)), 8);
        egress.install_rule(FlowRule::new(0, 0, KeyMatch::any(), Action::Drop));
        egress.install_rule(FlowRule::new(
            1,
            10,
            KeyMatch::any(),
            Action::PopDptAndForward(PortId(0)),
        ));
        let (v, _) = egress.process(stamped, 2.6).unwrap();
        let out = match v {
            Verdict::Forward { pkt, .. } => pkt,
            _ => panic!(),
        };
        assert_eq!(out, pkt(9));
    }

    #[test]
    fn ties_break_by_lowest_rule_id() {
        let mut sw = Switch::new(NodeId(3), ClockModel::identity(NodeId(3)), 8);
        sw.install_rule(FlowRule::new(5, 10, KeyMatch::any(), Action::Forward(PortId(5))));
        sw.install_rule(FlowRule::new(2, 10, KeyMatch::any(), Action::Forward(PortId(2))));
        sw.install_rule(FlowRule::new(0, 0, KeyMatch::any(), Action::Drop));
        let (v, _) = sw.process(pkt(1), 0.0).unwrap();
        assert!(matches!(v, Verdict::Forward { port: PortId(2), .. }));
    }

    #[test]
    fn register_keeps_first_packet_per_block() {
        let mut reg = TsRegister::new(RegisterId(0), crate::timebase::UNITS_PER_SEC);
        reg.record(NtpTimestamp::new(10, 0), NtpTimestamp::new(10, 4_294_967));
        assert!(reg.valid);
        assert_eq!(reg.last_dpth, NtpTimestamp::new(10, 0));

        // Second packet of the same block: no-op.
        reg.record(NtpTimestamp::new(10, 500), NtpTimestamp::new(10, 900));
        assert_eq!(reg.last_dpth, NtpTimestamp::new(10, 0));

        // Straggler from an earlier block: no-op.
        reg.record(NtpTimestamp::new(9, 999), NtpTimestamp::new(10, 950));
        assert_eq!(reg.block, 10);

        // Rollover: overwritten by the next block's first packet.
        reg.record(NtpTimestamp::new(11, 3), NtpTimestamp::new(11, 7));
        assert_eq!(reg.last_dpth, NtpTimestamp::new(11, 3));
        assert_eq!(reg.block, 11);
    }

    #[test]
    fn counters_conserve_offered_packets() {
        let mut sw = ingress_switch();
        for i in 0..100 {
            let _ = sw.process(pkt(i), i as f64 * 0.1).unwrap();
        }
        assert_eq!(sw.counted_packets(), sw.lookups);
    }
}
