//! The simulated SDN controller: an explicit, counted message channel to
//! the switches and the applications built on it. Every controller-switch
//! interaction is exactly one [`ControlMessage`] in the append-only ledger;
//! controller load is compared by counting them.

pub mod balance;
pub mod telemetry;
pub mod update;

use crate::pipeline::{EpochTag, FlowRule, RegisterId, RuleCounters, RuleId, TsRegister};
use crate::simnet::{NodeId, Sim};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MsgKind {
    InstallRule,
    RemoveRule,
    ReadCounters,
    ReadTsRegister,
    SetTagPolicy,
}

impl MsgKind {
    pub fn name(self) -> &'static str {
        match self {
            MsgKind::InstallRule => "INSTALL_RULE",
            MsgKind::RemoveRule => "REMOVE_RULE",
            MsgKind::ReadCounters => "READ_COUNTERS",
            MsgKind::ReadTsRegister => "READ_TS_REGISTER",
            MsgKind::SetTagPolicy => "SET_TAG_POLICY",
        }
    }
}

#[derive(Debug, Clone)]
pub enum MsgPayload {
    Install(Vec<FlowRule>),
    RemoveEpoch(EpochTag),
    RemoveRules(Vec<RuleId>),
    /// Snapshot of the switch's rule counters and monitoring registers,
    /// routed back to `app` with an app-chosen correlation token.
    ReadCounters { app: usize, token: u64 },
    ReadRegisters { app: usize, token: u64 },
    SetTag { tag: u8, epoch: u64 },
}

/// One counted controller-to-switch message.
#[derive(Debug, Clone)]
pub struct ControlMessage {
    pub kind: MsgKind,
    pub target: NodeId,
    pub sent_at: f64,
    pub payload: MsgPayload,
}

/// What a read returns: the switch's per-rule counters and its timestamp
/// registers, snapshotted at delivery time.
#[derive(Debug, Clone)]
pub struct Reading {
    pub target: NodeId,
    pub at: f64,
    pub token: u64,
    pub counters: Vec<(RuleId, RuleCounters)>,
    pub registers: Vec<TsRegister>,
}

impl Reading {
    pub fn counter(&self, id: RuleId) -> Option<RuleCounters> {
        self.counters.iter().find(|(r, _)| *r == id).map(|(_, c)| *c)
    }

    pub fn register(&self, id: RegisterId) -> Option<&TsRegister> {
        self.registers.iter().find(|r| r.id == id)
    }
}

/// A controller application, driven by timer events and read replies from
/// inside the simulation loop.
#[derive(Debug, Clone)]
pub enum App {
    Telemetry(telemetry::TelemetryApp),
    Update(update::UpdateApp),
}

impl App {
    pub fn on_timer(&mut self, sim: &mut Sim, me: usize, tick: u32, arg: u64) {
        match self {
            App::Telemetry(a) => a.on_timer(sim, me, tick, arg),
            App::Update(a) => a.on_timer(sim, me, tick, arg),
        }
    }

    pub fn on_reading(&mut self, sim: &mut Sim, me: usize, reading: Reading) {
        match self {
            App::Telemetry(a) => a.on_reading(sim, me, reading),
            App::Update(_) => {}
        }
    }
}
