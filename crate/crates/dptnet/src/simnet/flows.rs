//! Traffic sources: constant-bit-rate senders and a window-based AIMD flow
//! with slow start, duplicate-ack loss detection, and a coarse retransmit
//! timer. ACKs are real packets routed back through the network.

use std::collections::{BTreeSet, HashMap};

use crate::pipeline::Packet;
use crate::simnet::{EventKind, FlowId, NodeId, Sim, SimError, PROTO_ACK, PROTO_DATA};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AimdConfig {
    pub init_cwnd: f64,
    pub init_ssthresh: f64,
    pub max_cwnd: f64,
    /// RTT estimate before the first sample.
    pub init_rtt: f64,
    pub min_rto: f64,
    pub ack_size: u32,
    /// Duplicate-ack count that signals a delivery gap.
    pub dup_threshold: u32,
}

impl Default for AimdConfig {
    fn default() -> Self {
        AimdConfig {
            init_cwnd: 2.0,
            init_ssthresh: 32.0,
            max_cwnd: 256.0,
            init_rtt: 0.01,
            min_rto: 0.02,
            ack_size: 64,
            dup_threshold: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FlowStats {
    pub sent_pkts: u64,
    pub sent_bytes: u64,
    pub delivered_pkts: u64,
    pub delivered_bytes: u64,
    pub retransmits: u64,
    pub acks: u64,
}

#[derive(Debug)]
pub(crate) struct CbrState {
    pub rate_bps: f64,
    next_seq: u64,
}

#[derive(Debug)]
pub(crate) struct AimdState {
    cfg: AimdConfig,
    cwnd: f64,
    ssthresh: f64,
    next_seq: u64,
    highest_acked: u64,
    dup_acks: u32,
    recover_until: u64,
    srtt: f64,
    have_rtt: bool,
    sent_time: HashMap<u64, f64>,
    last_progress: f64,
    rto_scheduled: bool,
    ack_seq: u64,
    // receiver side
    rx_next: u64,
    rx_buf: BTreeSet<u64>,
}

#[derive(Debug)]
pub(crate) enum FlowKind {
    Cbr(CbrState),
    Aimd(AimdState),
}

impl FlowKind {
    pub fn cbr(rate_bps: f64) -> FlowKind {
        FlowKind::Cbr(CbrState {
            rate_bps,
            next_seq: 0,
        })
    }

    pub fn aimd(cfg: AimdConfig) -> FlowKind {
        FlowKind::Aimd(AimdState {
            cfg,
            cwnd: cfg.init_cwnd,
            ssthresh: cfg.init_ssthresh,
            next_seq: 0,
            highest_acked: 0,
            dup_acks: 0,
            recover_until: 0,
            srtt: cfg.init_rtt,
            have_rtt: false,
            sent_time: HashMap::new(),
            last_progress: 0.0,
            rto_scheduled: false,
            ack_seq: 0,
            rx_next: 0,
            rx_buf: BTreeSet::new(),
        })
    }
}

impl AimdState {
    fn outstanding(&self) -> u64 {
        self.next_seq - self.highest_acked
    }

    fn rto(&self) -> f64 {
        let base = if self.have_rtt { self.srtt } else { self.cfg.init_rtt };
        (2.0 * base).max(self.cfg.min_rto)
    }

    /// Halve and re-enter avoidance; the single loss response.
    fn loss_response(&mut self) {
        self.ssthresh = (self.cwnd / 2.0).max(1.0);
        self.cwnd = self.ssthresh;
    }
}

impl Sim {
    pub(crate) fn begin_flow(&mut self, id: FlowId) -> Result<(), SimError> {
        match &self.flows[id.0 as usize].kind {
            FlowKind::Cbr(_) => self.cbr_send(id),
            FlowKind::Aimd(_) => {
                self.aimd_fill_window(id)?;
                Ok(())
            }
        }
    }

    pub(crate) fn cbr_send(&mut self, id: FlowId) -> Result<(), SimError> {
        let t = self.t;
        let pkt_id = self.next_packet_id();
        let flow = &mut self.flows[id.0 as usize];
        let FlowKind::Cbr(cbr) = &mut flow.kind else {
            unreachable!("cbr tick on non-cbr flow");
        };
        let seq = cbr.next_seq;
        cbr.next_seq += 1;
        let period = flow.mtu as f64 * 8.0 / cbr.rate_bps;
        let pkt = Packet::new(pkt_id, flow.key, flow.mtu, seq, t);
        flow.stats.sent_pkts += 1;
        flow.stats.sent_bytes += flow.mtu as u64;
        let src = flow.key.src;
        self.host_send(src, pkt)?;
        self.schedule(t + period, EventKind::CbrSend(id));
        Ok(())
    }

    /// Hosts have a single access port.
    fn host_send(&mut self, host: NodeId, pkt: Packet) -> Result<(), SimError> {
        self.transmit(host, crate::pipeline::PortId(0), pkt)
    }

    pub(crate) fn host_receive(&mut self, host: NodeId, pkt: Packet) -> Result<(), SimError> {
        if pkt.dpt.is_some() {
            return Err(SimError::StampedAtHost {
                host: self.node_name(host).to_string(),
            });
        }
        if pkt.flow.proto == PROTO_ACK {
            let data_key = pkt.flow.reversed(PROTO_DATA);
            if let Some(&id) = self.flow_index.get(&data_key) {
                let ack = pkt.ack.expect("ack packet without ack number");
                self.aimd_on_ack(id, ack)?;
            }
            return Ok(());
        }
        let Some(&id) = self.flow_index.get(&pkt.flow) else {
            return Ok(()); // stray traffic, not an endpoint we model
        };
        match &self.flows[id.0 as usize].kind {
            FlowKind::Cbr(_) => {
                let flow = &mut self.flows[id.0 as usize];
                flow.stats.delivered_pkts += 1;
                flow.stats.delivered_bytes += pkt.size as u64;
                Ok(())
            }
            FlowKind::Aimd(_) => self.aimd_on_data(id, pkt),
        }
    }

    // ---- AIMD sender ------------------------------------------------------

    fn aimd_send_seq(&mut self, id: FlowId, seq: u64, retransmit: bool) -> Result<(), SimError> {
        let t = self.t;
        let pkt_id = self.next_packet_id();
        let flow = &mut self.flows[id.0 as usize];
        let FlowKind::Aimd(s) = &mut flow.kind else {
            unreachable!();
        };
        if retransmit {
            // Karn's rule: no RTT sample from retransmitted sequences.
            s.sent_time.remove(&seq);
            flow.stats.retransmits += 1;
        } else {
            s.sent_time.insert(seq, t);
        }
        let pkt = Packet::new(pkt_id, flow.key, flow.mtu, seq, t);
        flow.stats.sent_pkts += 1;
        flow.stats.sent_bytes += flow.mtu as u64;
        let src = flow.key.src;
        self.host_send(src, pkt)
    }

    fn aimd_fill_window(&mut self, id: FlowId) -> Result<(), SimError> {
        loop {
            let (seq, rto, schedule_rto) = {
                let flow = &mut self.flows[id.0 as usize];
                let FlowKind::Aimd(s) = &mut flow.kind else {
                    unreachable!();
                };
                if s.outstanding() >= s.cwnd.floor() as u64 {
                    let schedule = !s.rto_scheduled && s.outstanding() > 0;
                    if schedule {
                        s.rto_scheduled = true;
                    }
                    (None, s.rto(), schedule)
                } else {
                    let seq = s.next_seq;
                    s.next_seq += 1;
                    (Some(seq), 0.0, false)
                }
            };
            match seq {
                Some(seq) => self.aimd_send_seq(id, seq, false)?,
                None => {
                    if schedule_rto {
                        self.schedule(self.t + rto, EventKind::RtoCheck(id));
                    }
                    return Ok(());
                }
            }
        }
    }

    fn aimd_on_ack(&mut self, id: FlowId, ack: u64) -> Result<(), SimError> {
        let t = self.t;
        enum Next {
            Fill,
            Retransmit(u64),
            Nothing,
        }
        let next = {
            let flow = &mut self.flows[id.0 as usize];
            let FlowKind::Aimd(s) = &mut flow.kind else {
                unreachable!();
            };
            flow.stats.acks += 1;
            if ack > s.highest_acked {
                let newly = ack - s.highest_acked;
                let in_recovery = ack < s.recover_until;
                // RTT samples only outside recovery; acks released by a
                // retransmission measure the stall, not the path.
                if !in_recovery {
                    if let Some(sent) = s.sent_time.get(&(ack - 1)).copied() {
                        let sample = t - sent;
                        s.srtt = if s.have_rtt {
                            0.875 * s.srtt + 0.125 * sample
                        } else {
                            sample
                        };
                        s.have_rtt = true;
                    }
                }
                for q in s.highest_acked..ack {
                    s.sent_time.remove(&q);
                }
                s.highest_acked = ack;
                s.dup_acks = 0;
                s.last_progress = t;
                if !in_recovery {
                    for _ in 0..newly {
                        if s.cwnd < s.ssthresh {
                            s.cwnd += 1.0;
                        } else {
                            s.cwnd += 1.0 / s.cwnd;
                        }
                    }
                    s.cwnd = s.cwnd.min(s.cfg.max_cwnd);
                }
                // Remaining holes in the window wait for the coarse
                // retransmit timer; there is no selective feedback.
                Next::Fill
            } else if ack == s.highest_acked && s.outstanding() > 0 {
                s.dup_acks += 1;
                if s.dup_acks >= s.cfg.dup_threshold && s.highest_acked >= s.recover_until {
                    s.loss_response();
                    s.recover_until = s.next_seq;
                    s.dup_acks = 0;
                    Next::Retransmit(ack)
                } else {
                    Next::Nothing
                }
            } else {
                Next::Nothing
            }
        };
        match next {
            Next::Fill => self.aimd_fill_window(id),
            Next::Retransmit(seq) => {
                self.aimd_send_seq(id, seq, true)?;
                self.aimd_fill_window(id)
            }
            Next::Nothing => Ok(()),
        }
    }

    pub(crate) fn aimd_rto_check(&mut self, id: FlowId) -> Result<(), SimError> {
        let t = self.t;
        enum Next {
            Idle,
            Rearm(f64),
            Timeout(u64, f64),
        }
        let next = {
            let flow = &mut self.flows[id.0 as usize];
            let FlowKind::Aimd(s) = &mut flow.kind else {
                unreachable!();
            };
            s.rto_scheduled = false;
            if s.outstanding() == 0 {
                Next::Idle
            } else if t - s.last_progress >= s.rto() {
                s.loss_response();
                s.recover_until = s.next_seq;
                s.last_progress = t;
                s.dup_acks = 0;
                let seq = s.highest_acked;
                let rto = s.rto();
                s.rto_scheduled = true;
                Next::Timeout(seq, rto)
            } else {
                s.rto_scheduled = true;
                Next::Rearm(s.rto())
            }
        };
        match next {
            Next::Idle => Ok(()),
            Next::Rearm(rto) => {
                self.schedule(t + rto, EventKind::RtoCheck(id));
                Ok(())
            }
            Next::Timeout(seq, rto) => {
                self.schedule(t + rto, EventKind::RtoCheck(id));
                self.aimd_send_seq(id, seq, true)
            }
        }
    }

    // ---- AIMD receiver ----------------------------------------------------

    fn aimd_on_data(&mut self, id: FlowId, pkt: Packet) -> Result<(), SimError> {
        let t = self.t;
        let ack_pkt = {
            let pkt_seq = pkt.seq;
            let flow = &mut self.flows[id.0 as usize];
            let FlowKind::Aimd(s) = &mut flow.kind else {
                unreachable!();
            };
            if pkt_seq == s.rx_next {
                let mut advanced = 1u64;
                s.rx_next += 1;
                while s.rx_buf.remove(&s.rx_next) {
                    s.rx_next += 1;
                    advanced += 1;
                }
                flow.stats.delivered_pkts += advanced;
                flow.stats.delivered_bytes += advanced * flow.mtu as u64;
            } else if pkt_seq > s.rx_next {
                s.rx_buf.insert(pkt_seq);
            }
            // Cumulative ack on every delivery, duplicates included.
            let seq = s.ack_seq;
            s.ack_seq += 1;
            let mut ack = Packet::new(0, flow.key.reversed(PROTO_ACK), s.cfg.ack_size, seq, t);
            ack.ack = Some(s.rx_next);
            ack
        };
        let mut ack = ack_pkt;
        ack.id = self.next_packet_id();
        let from = ack.flow.src;
        self.host_send(from, ack)
    }
}
