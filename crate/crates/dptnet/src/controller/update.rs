//! Consistent configuration updates.
//!
//! Three flavours: conventional two-phase updates (install tagged rules
//! everywhere, then enable the new version tag at ingress switches),
//! one-phase updates where the packet timestamp against a threshold T_thr
//! plays the version tag, and periodic rounds driven by a single toggling
//! timestamp bit. Old configurations are garbage collected after a drain
//! period in every flavour, and every message is counted.

use thiserror::Error;

use crate::controller::{MsgKind, MsgPayload};
use crate::pipeline::{Action, EpochTag, FlowRule, KeyMatch};
use crate::simnet::{NodeId, Sim};
use crate::timebase::{BitIndex, NtpTimestamp};
use crate::trange::{compile_extremal, compile_periodic, PeriodicRange};

#[derive(Debug, Error, PartialEq)]
pub enum UpdateError {
    #[error("drain {drain}s plus control delay must fit inside the round period {period}s")]
    DrainTooLong { drain: f64, period: f64 },
    #[error("periodic rounds need a version bit")]
    MissingRoundBit,
    #[error("T_thr {thr} already passed at switch {node:?} clock {now}")]
    MarginViolated {
        node: NodeId,
        thr: NtpTimestamp,
        now: NtpTimestamp,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMethod {
    TwoPhase,
    OnePhase,
    PeriodicRounds,
}

/// One switch's forwarding entry in a configuration, before the round's
/// version dressing (tag match, timestamp match, epoch, priority) is added.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleTemplate {
    pub switch: NodeId,
    pub key: KeyMatch,
    pub action: Action,
}

#[derive(Debug, Clone)]
pub struct UpdatePlan {
    pub switches: Vec<NodeId>,
    pub ingress: Vec<NodeId>,
    /// Configurations applied on alternating rounds (round r uses r mod 2).
    pub configs: [Vec<RuleTemplate>; 2],
    pub rounds: u64,
    pub period: f64,
    /// One-phase: T_thr is this far in the controller's future; must exceed
    /// the worst clock offset plus the control delivery delay.
    pub margin: f64,
    pub drain: f64,
    pub base_priority: u32,
    /// Periodic rounds: the toggling version bit; the round period is its
    /// half-period.
    pub round_bit: Option<BitIndex>,
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: u64,
    pub installed_at: f64,
    pub changed: bool,
    pub aborted: Option<String>,
    pub t_thr: Option<NtpTimestamp>,
}

pub const TICK_COMPUTE: u32 = 1;
pub const TICK_INSTALL: u32 = 2;
pub const TICK_ENABLE: u32 = 3;
pub const TICK_REMOVE: u32 = 4;

#[derive(Debug, Clone)]
pub struct UpdateApp {
    pub method: UpdateMethod,
    pub plan: UpdatePlan,
    pub reports: Vec<RoundReport>,
    pending_changed: bool,
}

impl UpdateApp {
    pub fn new(method: UpdateMethod, plan: UpdatePlan) -> Result<Self, UpdateError> {
        if method == UpdateMethod::PeriodicRounds && plan.round_bit.is_none() {
            return Err(UpdateError::MissingRoundBit);
        }
        Ok(UpdateApp {
            method,
            plan,
            reports: Vec::new(),
            pending_changed: true,
        })
    }

    /// Validates timing against the simulator's control delay and schedules
    /// the first round.
    pub fn start(&self, sim: &mut Sim, me: usize) -> Result<(), UpdateError> {
        let lead = 2.0 * sim.ctrl_delay();
        if self.plan.drain + lead >= self.plan.period {
            return Err(UpdateError::DrainTooLong {
                drain: self.plan.drain,
                period: self.plan.period,
            });
        }
        if self.plan.rounds == 0 {
            return Ok(());
        }
        match self.method {
            UpdateMethod::TwoPhase | UpdateMethod::OnePhase => {
                sim.schedule_app_timer(self.plan.period, me, TICK_INSTALL, 1);
            }
            UpdateMethod::PeriodicRounds => {
                let h = self.plan.period;
                sim.schedule_app_timer(h - h / 2.0, me, TICK_COMPUTE, 1);
            }
        }
        Ok(())
    }

    pub fn on_timer(&mut self, sim: &mut Sim, me: usize, tick: u32, round: u64) {
        match (self.method, tick) {
            (UpdateMethod::TwoPhase, TICK_INSTALL) => self.two_phase_install(sim, me, round),
            (UpdateMethod::TwoPhase, TICK_ENABLE) => self.two_phase_enable(sim, me, round),
            (UpdateMethod::OnePhase, TICK_INSTALL) => self.one_phase_install(sim, me, round),
            (_, TICK_REMOVE) => self.remove_old(sim, round),
            (UpdateMethod::PeriodicRounds, TICK_COMPUTE) => self.periodic_compute(sim, me, round),
            (UpdateMethod::PeriodicRounds, TICK_INSTALL) => self.periodic_install(sim, me, round),
            other => unreachable!("unexpected update tick {other:?}"),
        }
    }

    fn config_for(&self, round: u64) -> &[RuleTemplate] {
        &self.plan.configs[(round % 2) as usize]
    }

    /// Sends one install message per switch carrying that switch's rules.
    fn install_config(&self, sim: &mut Sim, rules_of: impl Fn(&mut Sim, NodeId) -> Vec<FlowRule>) {
        for &sw in &self.plan.switches {
            let rules = rules_of(sim, sw);
            sim.send_control(MsgKind::InstallRule, sw, MsgPayload::Install(rules));
        }
    }

    fn schedule_next_round(&self, sim: &mut Sim, me: usize, round: u64) {
        if round < self.plan.rounds {
            let t = (round + 1) as f64 * self.plan.period;
            sim.schedule_app_timer(t, me, TICK_INSTALL, round + 1);
        }
    }

    fn two_phase_install(&mut self, sim: &mut Sim, me: usize, round: u64) {
        let tag = (round % 2) as u8;
        let config: Vec<RuleTemplate> = self.config_for(round).to_vec();
        let priority = self.plan.base_priority;
        self.install_config(sim, |sim, sw| {
            config
                .iter()
                .filter(|t| t.switch == sw)
                .map(|t| {
                    FlowRule::new(sim.alloc_rule_id(), priority, t.key.with_tag(tag), t.action)
                        .with_epoch(EpochTag(round))
                })
                .collect()
        });
        self.reports.push(RoundReport {
            round,
            installed_at: sim.now(),
            changed: true,
            aborted: None,
            t_thr: None,
        });
        sim.schedule_app_timer(sim.now() + 2.0 * sim.ctrl_delay(), me, TICK_ENABLE, round);
        self.schedule_next_round(sim, me, round);
    }

    fn two_phase_enable(&mut self, sim: &mut Sim, me: usize, round: u64) {
        let tag = (round % 2) as u8;
        for &sw in &self.plan.ingress {
            sim.send_control(
                MsgKind::SetTagPolicy,
                sw,
                MsgPayload::SetTag { tag, epoch: round },
            );
        }
        sim.schedule_app_timer(sim.now() + self.plan.drain, me, TICK_REMOVE, round);
    }

    fn one_phase_install(&mut self, sim: &mut Sim, me: usize, round: u64) {
        let now = sim.now();
        let thr_s = now + self.plan.margin;
        let t_thr = NtpTimestamp::from_seconds(thr_s).expect("threshold in range");

        // The threshold must still be in the future of every switch clock.
        for &sw in &self.plan.switches {
            let local = sim
                .switch_clock(sw)
                .now(now)
                .unwrap_or(NtpTimestamp::ZERO);
            if local >= t_thr {
                self.reports.push(RoundReport {
                    round,
                    installed_at: now,
                    changed: false,
                    aborted: Some(format!(
                        "margin violated: switch clock {local} at or past T_thr {t_thr}"
                    )),
                    t_thr: Some(t_thr),
                });
                self.schedule_next_round(sim, me, round);
                return;
            }
        }

        let patterns = compile_extremal(t_thr.to_bits(), 64).expect("64-bit threshold");
        let config: Vec<RuleTemplate> = self.config_for(round).to_vec();
        // New rules shadow older epochs by priority; packets stamped before
        // T_thr fall through to them untouched.
        let priority = self.plan.base_priority + round as u32;
        self.install_config(sim, |sim, sw| {
            let mut rules = Vec::new();
            for t in config.iter().filter(|t| t.switch == sw) {
                for pattern in &patterns {
                    rules.push(
                        FlowRule::new(sim.alloc_rule_id(), priority, t.key, t.action)
                            .with_ts_match(*pattern)
                            .with_epoch(EpochTag(round)),
                    );
                }
            }
            rules
        });
        self.reports.push(RoundReport {
            round,
            installed_at: now,
            changed: true,
            aborted: None,
            t_thr: Some(t_thr),
        });
        // A slow ingress clock keeps stamping below T_thr for up to the
        // margin; only then does the drain clock start.
        sim.schedule_app_timer(thr_s + self.plan.margin + self.plan.drain, me, TICK_REMOVE, round);
        self.schedule_next_round(sim, me, round);
    }

    fn remove_old(&mut self, sim: &mut Sim, round: u64) {
        if round == 0 {
            return;
        }
        for &sw in &self.plan.switches {
            sim.send_control(
                MsgKind::RemoveRule,
                sw,
                MsgPayload::RemoveEpoch(EpochTag(round - 1)),
            );
        }
    }

    fn periodic_compute(&mut self, sim: &mut Sim, me: usize, round: u64) {
        // Slot 1: pick the next round's paths. Slot 2 installs them.
        self.pending_changed = self.config_for(round) != self.config_for(round + 1);
        let h = self.plan.period;
        let toggle_at = round as f64 * h;
        sim.schedule_app_timer(toggle_at - h / 4.0, me, TICK_INSTALL, round);
        if round < self.plan.rounds {
            sim.schedule_app_timer((round + 1) as f64 * h - h / 2.0, me, TICK_COMPUTE, round + 1);
        }
    }

    fn periodic_install(&mut self, sim: &mut Sim, me: usize, round: u64) {
        let h = self.plan.period;
        let toggle_at = round as f64 * h;
        if !self.pending_changed {
            // Paths unchanged: the standing configuration already covers
            // both bit values, nothing to install or remove.
            self.reports.push(RoundReport {
                round,
                installed_at: sim.now(),
                changed: false,
                aborted: None,
                t_thr: None,
            });
            return;
        }
        if sim.now() + sim.ctrl_delay() >= toggle_at {
            self.reports.push(RoundReport {
                round,
                installed_at: sim.now(),
                changed: true,
                aborted: Some("slot overrun: installation not finished before toggle".into()),
                t_thr: None,
            });
            return;
        }
        let bit = self.plan.round_bit.expect("checked at construction");
        let parity = (round % 2) as u32;
        let range = PeriodicRange::new(bit, 1, [parity]).expect("one-bit range");
        let pattern = compile_periodic(&range).expect("one-bit compile")[0];

        let config: Vec<RuleTemplate> = self.config_for(round).to_vec();
        let priority = self.plan.base_priority;
        self.install_config(sim, |sim, sw| {
            config
                .iter()
                .filter(|t| t.switch == sw)
                .map(|t| {
                    FlowRule::new(sim.alloc_rule_id(), priority, t.key, t.action)
                        .with_ts_match(pattern)
                        .with_epoch(EpochTag(round))
                })
                .collect()
        });
        self.reports.push(RoundReport {
            round,
            installed_at: sim.now(),
            changed: true,
            aborted: None,
            t_thr: None,
        });
        // Slot 4: the previous round has drained, collect its rules.
        sim.schedule_app_timer(toggle_at + h / 4.0, me, TICK_REMOVE, round);
    }
}
