//! Block-based loss and delay measurement between switch pairs.
//!
//! Traffic is divided into one-interval blocks by the color derived from the
//! packet timestamp (or by an ingress-marked color bit in the baseline
//! method). The sender keeps one match counter per color, the receiver
//! likewise; reading both once per interval gives exact per-block loss. The
//! first packet of each block is recorded in timestamp registers on both
//! sides for one-way and two-way delay.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::controller::{MsgKind, MsgPayload, Reading};
use crate::pipeline::{RegisterId, RuleId};
use crate::simnet::{NodeId, Sim};
use crate::timebase::{BitIndex, NtpDelta, NtpTimestamp};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TelemetryError {
    #[error("counter snapshots misaligned: loss came out negative")]
    Misaligned,
    #[error("counters decreased between collections")]
    CounterRegressed,
    #[error("DPTH mismatch between paired readings: sample rejected")]
    Reordered,
}

/// Color of a timestamp: the least significant bit of the seconds field,
/// toggling once per second.
pub fn telemetry_color_of(ts: NtpTimestamp) -> u8 {
    ts.bit(BitIndex::sec(1).expect("index 1 valid"))
}

/// One collection's counter values for a single color: packets the sender
/// matched and packets the receiver matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossCounters {
    pub sent: u64,
    pub received: u64,
}

/// Per-block loss from two consecutive collections of the same color
/// counters: `(CS_2 - CS_1) - (CR_2 - CR_1)`.
pub fn compute_loss(first: LossCounters, second: LossCounters) -> Result<u64, TelemetryError> {
    if second.sent < first.sent || second.received < first.received {
        return Err(TelemetryError::CounterRegressed);
    }
    let sent = second.sent - first.sent;
    let received = second.received - first.received;
    if received > sent {
        return Err(TelemetryError::Misaligned);
    }
    Ok(sent - received)
}

/// One-way delay `T2 - T1`. A negative result means the two clocks are
/// inconsistent; the value is still returned, flagged.
pub fn compute_one_way_delay(t1: NtpTimestamp, t2: NtpTimestamp) -> (NtpDelta, bool) {
    let d = t2.delta(t1);
    (d, d.is_negative())
}

/// Two-way delay `(T4 - T1) - (T3 - T2)`; offsets between the two clocks
/// cancel, so no synchronization is required.
pub fn compute_two_way_delay(
    t1: NtpTimestamp,
    t2: NtpTimestamp,
    t3: NtpTimestamp,
    t4: NtpTimestamp,
) -> NtpDelta {
    t4.delta(t1) - t3.delta(t2)
}

/// A delay reading: the recorded local time plus the DPTH of the packet it
/// came from, used to pair readings taken at the two ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmSample {
    pub dpth: NtpTimestamp,
    pub local: NtpTimestamp,
}

/// Two-way delay with the reordering guard: both reading pairs must refer
/// to the same packet (matching DPTH values) or the sample is rejected.
pub fn matched_two_way_delay(
    t1: DmSample,
    t2: DmSample,
    t3: DmSample,
    t4: DmSample,
) -> Result<NtpDelta, TelemetryError> {
    if t1.dpth != t2.dpth || t3.dpth != t4.dpth {
        return Err(TelemetryError::Reordered);
    }
    Ok(compute_two_way_delay(t1.local, t2.local, t3.local, t4.local))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TelemetryMethod {
    /// Colors derive from the packet timestamp; the controller only reads.
    DptBased,
    /// Colors are marked at the sender; the controller also toggles the
    /// marking once per interval.
    ColorBased,
}

/// Static identities of one measurement pair, installed at setup.
#[derive(Debug, Clone)]
pub struct SessionSpec {
    pub s1: NodeId,
    pub s2: NodeId,
    /// Where the color marking is applied in the baseline method: the
    /// ingress switch stamping this pair's flow (may be s1 itself).
    pub marker: NodeId,
    /// Sender counters CS0/CS1, indexed by color.
    pub cs: [RuleId; 2],
    /// Receiver counters CR0/CR1, indexed by color.
    pub cr: [RuleId; 2],
    pub reg_fwd_tx: RegisterId,
    pub reg_fwd_rx: RegisterId,
    pub reg_rev_tx: RegisterId,
    pub reg_rev_rx: RegisterId,
}

#[derive(Debug, Clone, Default)]
struct PairReadings {
    s1: Option<Reading>,
    s2: Option<Reading>,
}

/// Completed per-block measurement.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub block: u64,
    pub sent: u64,
    pub received: u64,
    pub lost: u64,
    pub misaligned: bool,
    pub one_way: Option<NtpDelta>,
    pub one_way_warned: bool,
    pub two_way: Option<NtpDelta>,
    pub reordered: bool,
}

#[derive(Debug, Clone)]
pub struct MeasurementSession {
    pub spec: SessionSpec,
    readings: BTreeMap<u64, PairReadings>,
    pub blocks: Vec<BlockReport>,
}

impl MeasurementSession {
    pub fn new(spec: SessionSpec) -> Self {
        MeasurementSession {
            spec,
            readings: BTreeMap::new(),
            blocks: Vec::new(),
        }
    }
}

pub const TICK_READ: u32 = 1;
pub const TICK_TOGGLE: u32 = 2;

/// The telemetry application: one timer per interval issues the counter
/// reads (plus the color toggle in the baseline method), readings coming
/// back complete per-block loss and delay reports.
#[derive(Debug, Clone)]
pub struct TelemetryApp {
    pub method: TelemetryMethod,
    pub interval: f64,
    /// Offset into the interval at which counters are read; by then the
    /// previous block's packets have drained and its counters are stable.
    pub guard: f64,
    /// Number of read rounds to issue.
    pub reads: u64,
    pub sessions: Vec<MeasurementSession>,
}

impl TelemetryApp {
    pub fn start(&self, sim: &mut Sim, me: usize) {
        sim.schedule_app_timer(self.guard, me, TICK_READ, 0);
        if self.method == TelemetryMethod::ColorBased {
            // Sent one delivery delay early so the new color lands exactly
            // on the block boundary.
            sim.schedule_app_timer(self.interval - sim.ctrl_delay(), me, TICK_TOGGLE, 1);
        }
    }

    pub fn on_timer(&mut self, sim: &mut Sim, me: usize, tick: u32, arg: u64) {
        match tick {
            TICK_READ => {
                let k = arg;
                for (i, session) in self.sessions.iter().enumerate() {
                    let token = (i as u64) << 32 | k;
                    sim.send_control(
                        MsgKind::ReadCounters,
                        session.spec.s1,
                        MsgPayload::ReadCounters { app: me, token },
                    );
                    sim.send_control(
                        MsgKind::ReadCounters,
                        session.spec.s2,
                        MsgPayload::ReadCounters { app: me, token },
                    );
                }
                if k + 1 < self.reads {
                    let t = (k + 1) as f64 * self.interval + self.guard;
                    sim.schedule_app_timer(t, me, TICK_READ, k + 1);
                }
            }
            TICK_TOGGLE => {
                let epoch = arg;
                for session in &self.sessions {
                    sim.send_control(
                        MsgKind::SetTagPolicy,
                        session.spec.marker,
                        MsgPayload::SetTag {
                            tag: (epoch & 1) as u8,
                            epoch,
                        },
                    );
                }
                if epoch < self.reads {
                    let t = (epoch + 1) as f64 * self.interval - sim.ctrl_delay();
                    sim.schedule_app_timer(t, me, TICK_TOGGLE, epoch + 1);
                }
            }
            _ => unreachable!("unknown telemetry tick {tick}"),
        }
    }

    pub fn on_reading(&mut self, _sim: &mut Sim, _me: usize, reading: Reading) {
        let session_idx = (reading.token >> 32) as usize;
        let k = reading.token & 0xffff_ffff;
        let session = &mut self.sessions[session_idx];
        let entry = session.readings.entry(k).or_default();
        if reading.target == session.spec.s1 {
            entry.s1 = Some(reading);
        } else {
            entry.s2 = Some(reading);
        }
        let complete = {
            let e = &session.readings[&k];
            e.s1.is_some() && e.s2.is_some()
        };
        if complete && k >= 1 {
            session.compute_block(k - 1);
            // Readings older than the baseline of the next block are done.
            if k >= 2 {
                session.readings.remove(&(k - 2));
            }
        }
    }
}

impl MeasurementSession {
    fn counters_at(&self, k: u64, color: usize) -> Option<LossCounters> {
        let pair = self.readings.get(&k)?;
        let sent = pair.s1.as_ref()?.counter(self.spec.cs[color])?;
        let received = pair.s2.as_ref()?.counter(self.spec.cr[color])?;
        Some(LossCounters {
            sent: sent.packets,
            received: received.packets,
        })
    }

    fn register_at(&self, k: u64, s1_side: bool, reg: RegisterId, block: u64) -> Option<DmSample> {
        let pair = self.readings.get(&k)?;
        let reading = if s1_side {
            pair.s1.as_ref()?
        } else {
            pair.s2.as_ref()?
        };
        let snap = reading.register(reg)?;
        if snap.valid && snap.block == block {
            Some(DmSample {
                dpth: snap.last_dpth,
                local: snap.local_time,
            })
        } else {
            None
        }
    }

    /// Block `b` completes once reading `b + 1` is in: its color went idle
    /// at the end of the block, so the reading pair `(b - 1, b + 1)`
    /// brackets exactly the packets of block `b`.
    fn compute_block(&mut self, b: u64) {
        let color = (b & 1) as usize;
        let baseline = if b == 0 {
            Some(LossCounters {
                sent: 0,
                received: 0,
            })
        } else {
            self.counters_at(b - 1, color)
        };
        let (Some(first), Some(second)) = (baseline, self.counters_at(b + 1, color)) else {
            return;
        };
        let sent = second.sent - first.sent;
        let received = second.received - first.received;
        let (lost, misaligned) = match compute_loss(first, second) {
            Ok(l) => (l, false),
            Err(_) => (0, true),
        };

        // Delay samples come from the registers read during block b itself.
        let t1 = self.register_at(b, true, self.spec.reg_fwd_tx, b);
        let t2 = self.register_at(b, false, self.spec.reg_fwd_rx, b);
        let t3 = self.register_at(b, false, self.spec.reg_rev_tx, b);
        let t4 = self.register_at(b, true, self.spec.reg_rev_rx, b);

        let mut one_way = None;
        let mut one_way_warned = false;
        let mut two_way = None;
        let mut reordered = false;
        if let (Some(t1), Some(t2)) = (t1, t2) {
            if t1.dpth == t2.dpth {
                let (d, warned) = compute_one_way_delay(t1.local, t2.local);
                one_way = Some(d);
                one_way_warned = warned;
                if let (Some(t3), Some(t4)) = (t3, t4) {
                    match matched_two_way_delay(t1, t2, t3, t4) {
                        Ok(d) => two_way = Some(d),
                        Err(_) => reordered = true,
                    }
                }
            } else {
                reordered = true;
            }
        }

        self.blocks.push(BlockReport {
            block: b,
            sent,
            received,
            lost,
            misaligned,
            one_way,
            one_way_warned,
            two_way,
            reordered,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_follows_seconds_parity() {
        assert_eq!(telemetry_color_of(NtpTimestamp::new(0, 7)), 0);
        assert_eq!(telemetry_color_of(NtpTimestamp::new(1, 0)), 1);
        assert_eq!(telemetry_color_of(NtpTimestamp::new(2, u32::MAX)), 0);
    }

    #[test]
    fn color_matches_periodic_range_membership() {
        use crate::trange::{compile_periodic, PeriodicRange};
        let bit = BitIndex::sec(1).unwrap();
        let odd = compile_periodic(&PeriodicRange::new(bit, 1, [1]).unwrap()).unwrap();
        for raw in (0..1u64 << 40).step_by((1 << 29) + 12345) {
            let ts = NtpTimestamp::from_bits(raw);
            let in_odd = odd.iter().any(|p| p.matches_ts(ts));
            assert_eq!(in_odd, telemetry_color_of(ts) == 1, "ts={ts}");
        }
    }

    #[test]
    fn loss_is_plain_counter_arithmetic() {
        let first = LossCounters { sent: 0, received: 0 };
        let second = LossCounters { sent: 100, received: 97 };
        assert_eq!(compute_loss(first, second), Ok(3));

        let lossless = LossCounters { sent: 250, received: 250 };
        let later = LossCounters { sent: 300, received: 300 };
        assert_eq!(compute_loss(lossless, later), Ok(0));
    }

    #[test]
    fn loss_flags_misalignment() {
        let first = LossCounters { sent: 10, received: 5 };
        let second = LossCounters { sent: 20, received: 18 };
        assert_eq!(compute_loss(first, second), Err(TelemetryError::Misaligned));
        assert_eq!(
            compute_loss(second, first),
            Err(TelemetryError::CounterRegressed)
        );
    }

    #[test]
    fn one_way_delay_subtracts() {
        let t1 = NtpTimestamp::from_seconds(10.000).unwrap();
        let t2 = NtpTimestamp::from_seconds(10.003).unwrap();
        let (d, warned) = compute_one_way_delay(t1, t2);
        assert!(!warned);
        assert!((d.as_seconds() - 0.003).abs() < 1e-9);

        let (zero, warned) = compute_one_way_delay(t1, t1);
        assert_eq!(zero.0, 0);
        assert!(!warned);

        let (neg, warned) = compute_one_way_delay(t2, t1);
        assert!(warned);
        assert!(neg.is_negative());
    }

    #[test]
    fn two_way_delay_and_offset_cancellation() {
        let ts = |s: f64| NtpTimestamp::from_seconds(s).unwrap();
        let d = compute_two_way_delay(ts(100.0), ts(100.6), ts(101.0), ts(101.5));
        assert!((d.as_seconds() - 1.1).abs() < 1e-9);

        // Adding a constant to T2 and T3 (the far end's clock) cancels.
        let shifted = compute_two_way_delay(ts(100.0), ts(107.6), ts(108.0), ts(101.5));
        assert_eq!(d, shifted);
    }

    #[test]
    fn dm_pairing_rejects_mismatched_dpth() {
        let ts = |s: f64| NtpTimestamp::from_seconds(s).unwrap();
        let sample = |dpth: f64, local: f64| DmSample {
            dpth: ts(dpth),
            local: ts(local),
        };
        let ok = matched_two_way_delay(
            sample(10.0, 10.0),
            sample(10.0, 10.2),
            sample(10.5, 10.5),
            sample(10.5, 10.8),
        );
        assert!(ok.is_ok());

        let reordered = matched_two_way_delay(
            sample(10.0, 10.0),
            sample(10.1, 10.2),
            sample(10.5, 10.5),
            sample(10.5, 10.8),
        );
        assert_eq!(reordered, Err(TelemetryError::Reordered));
    }
}
