//! Builds and runs the experiments described by a config: per-pair
//! loss/delay telemetry, consistent-update rounds, multipath load
//! balancing, and the range encoder. Emits CSV reports plus a short
//! human-readable summary, and checks run invariants (packet conservation,
//! update consistency) so violations surface as a nonzero exit.

use std::collections::BTreeMap;

use crate::config::{AppCfg, ExperimentConfig, ExperimentKind, FlowKindCfg, NodeKindCfg};
use crate::controller::balance::{compute_toggle_interval, dpt_balance_rules, BalancePolicy};
use crate::controller::telemetry::{
    MeasurementSession, SessionSpec, TelemetryApp, TelemetryMethod,
};
use crate::controller::update::{RuleTemplate, UpdateApp, UpdateMethod, UpdatePlan};
use crate::controller::{App, MsgKind};
use crate::pipeline::{
    Action, FlowKey, FlowRule, GroupId, KeyMatch, PortId, RegisterId,
};
use crate::report::{b, f, u, Csv};
use crate::simnet::{
    AimdConfig, DropKind, FlowId, LinkParams, NodeId, Sim, SimParams,
};
use crate::timebase::{BitIndex, NtpTimestamp, UNITS_PER_SEC};
use crate::trange::{compile_extremal, compile_periodic, PeriodicRange, TernaryPattern};

#[derive(Debug)]
pub struct RunOutput {
    /// File name to contents; written under the output directory.
    pub files: BTreeMap<String, String>,
    pub summary: Vec<String>,
    /// Invariant violations found during or after the run (exit code 2).
    pub violations: Vec<String>,
}

impl RunOutput {
    fn new() -> RunOutput {
        RunOutput {
            files: BTreeMap::new(),
            summary: Vec::new(),
            violations: Vec::new(),
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, String> {
    match cfg.kind {
        ExperimentKind::Telemetry => run_telemetry(cfg),
        ExperimentKind::Updates => run_updates(cfg),
        ExperimentKind::LoadBalance => run_loadbalance(cfg),
        ExperimentKind::Encode => run_encode(&cfg.app),
    }
}

fn sim_params(cfg: &ExperimentConfig) -> SimParams {
    SimParams {
        seed: cfg.seed,
        dpth_overhead: cfg.dpth_overhead,
        ctrl_delay: cfg.ctrl_delay,
    }
}

/// One ternary entry for "timestamp color bit equals `c`".
fn color_pattern(c: u32) -> TernaryPattern {
    let bit = BitIndex::sec(1).expect("index 1 valid");
    let range = PeriodicRange::new(bit, 1, [c]).expect("single-slot range");
    compile_periodic(&range).expect("one-bit compile")[0]
}

// ---------------------------------------------------------------------------
// telemetry
// ---------------------------------------------------------------------------

struct PairWiring {
    fwd_key: FlowKey,
    lossy_dir: usize,
    spec: SessionSpec,
}

fn run_telemetry(cfg: &ExperimentConfig) -> Result<RunOutput, String> {
    let method = match cfg.app.method.as_str() {
        "" | "dpt" => TelemetryMethod::DptBased,
        "color" => TelemetryMethod::ColorBased,
        other => return Err(format!("unknown telemetry method `{other}`")),
    };
    let pairs = cfg
        .app
        .pairs
        .ok_or("telemetry needs app.pairs (number of measured switch pairs)")?;
    if pairs == 0 {
        return Err("app.pairs must be at least 1".into());
    }
    let interval = cfg.app.interval;
    if method == TelemetryMethod::DptBased && interval != 1.0 {
        return Err("timestamp-derived colors toggle once per second; set interval = 1".into());
    }
    let guard = cfg.guard();
    let interval_units = (interval * UNITS_PER_SEC as f64).round() as u64;
    if interval_units == 0 {
        return Err("interval too small".into());
    }

    let mut sim = Sim::new(sim_params(cfg));
    let plain = LinkParams {
        rate_bps: cfg.app.link_rate,
        prop_delay: cfg.app.link_delay,
        queue_cap: 32,
        loss_prob: 0.0,
    };
    let lossy = LinkParams {
        loss_prob: cfg.app.loss,
        ..plain
    };

    let mut wirings = Vec::new();
    for i in 0..pairs {
        let hsrc = sim.add_host(&format!("hsrc{i}"));
        let se1 = sim.add_switch(&format!("se1_{i}"), 0.0, 0.0);
        let sa = sim.add_switch(&format!("sa{i}"), 0.0, 0.0);
        let sb = sim.add_switch(&format!("sb{i}"), 0.0, 0.0);
        let se2 = sim.add_switch(&format!("se2_{i}"), 0.0, 0.0);
        let hdst = sim.add_host(&format!("hdst{i}"));

        sim.add_link(hsrc, se1, plain);
        sim.add_link(se1, sa, plain);
        sim.add_link(sa, sb, lossy);
        sim.add_link(sb, se2, plain);
        sim.add_link(se2, hdst, plain);

        let sport = 40000 + i as u16;
        let fwd = sim.add_cbr_flow(
            hsrc,
            hdst,
            cfg.app.flow_rate,
            cfg.app.flow_mtu,
            0.0003,
            sport,
            5001,
        );
        let rev = sim.add_cbr_flow(
            hdst,
            hsrc,
            cfg.app.flow_rate,
            cfg.app.flow_mtu,
            0.0004,
            sport,
            5002,
        );
        let fwd_key = sim.flow_key(fwd);
        let rev_key = sim.flow_key(rev);

        let reg_fwd_tx = RegisterId(4 * i as u32);
        let reg_rev_rx = RegisterId(4 * i as u32 + 1);
        let reg_fwd_rx = RegisterId(4 * i as u32 + 2);
        let reg_rev_tx = RegisterId(4 * i as u32 + 3);
        sim.add_register(sa, reg_fwd_tx, interval_units);
        sim.add_register(sa, reg_rev_rx, interval_units);
        sim.add_register(sb, reg_fwd_rx, interval_units);
        sim.add_register(sb, reg_rev_tx, interval_units);

        // Edge switches: stamp on entry, strip on exit.
        let to = |sim: &Sim, a: NodeId, b: NodeId| -> PortId {
            sim.port_towards(a, b).expect("adjacent")
        };

        let r = sim.alloc_rule_id();
        sim.install_rule_direct(se1, FlowRule::new(r, 100, KeyMatch::any(), Action::PushDpt));
        let r = sim.alloc_rule_id();
        sim.install_rule_direct(
            se1,
            FlowRule::new(r, 50, KeyMatch::for_flow(fwd_key), Action::Forward(to(&sim, se1, sa))),
        );
        let r = sim.alloc_rule_id();
        sim.install_rule_direct(
            se1,
            FlowRule::new(
                r,
                50,
                KeyMatch::for_flow(rev_key),
                Action::PopDptAndForward(to(&sim, se1, hsrc)),
            ),
        );
        let r = sim.alloc_rule_id();
        sim.install_rule_direct(se1, FlowRule::new(r, 0, KeyMatch::any(), Action::Drop));

        // Measurement switch S1: per-color counters plus tx-time register.
        let mut cs = [crate::pipeline::RuleId(0); 2];
        for c in 0..2u32 {
            let key = KeyMatch::for_flow(fwd_key);
            let key = if method == TelemetryMethod::ColorBased {
                key.with_tag(c as u8)
            } else {
                key
            };
            let mut rule = FlowRule::new(
                sim.alloc_rule_id(),
                50,
                key,
                Action::RecordTsAndForward {
                    port: to(&sim, sa, sb),
                    register: reg_fwd_tx,
                },
            );
            if method == TelemetryMethod::DptBased {
                rule = rule.with_ts_match(color_pattern(c));
            }
            cs[c as usize] = rule.id;
            sim.install_rule_direct(sa, rule);
        }
        let r = sim.alloc_rule_id();
        sim.install_rule_direct(
            sa,
            FlowRule::new(
                r,
                50,
                KeyMatch::for_flow(rev_key),
                Action::RecordTsAndForward {
                    port: to(&sim, sa, se1),
                    register: reg_rev_rx,
                },
            ),
        );
        let r = sim.alloc_rule_id();
        sim.install_rule_direct(sa, FlowRule::new(r, 0, KeyMatch::any(), Action::Drop));

        // Measurement switch S2: receive counters plus rx-time register.
        let mut cr = [crate::pipeline::RuleId(0); 2];
        for c in 0..2u32 {
            let key = KeyMatch::for_flow(fwd_key);
            let key = if method == TelemetryMethod::ColorBased {
                key.with_tag(c as u8)
            } else {
                key
            };
            let mut rule = FlowRule::new(
                sim.alloc_rule_id(),
                50,
                key,
                Action::RecordTsAndForward {
                    port: to(&sim, sb, se2),
                    register: reg_fwd_rx,
                },
            );
            if method == TelemetryMethod::DptBased {
                rule = rule.with_ts_match(color_pattern(c));
            }
            cr[c as usize] = rule.id;
            sim.install_rule_direct(sb, rule);
        }
        let r = sim.alloc_rule_id();
        sim.install_rule_direct(
            sb,
            FlowRule::new(
                r,
                50,
                KeyMatch::for_flow(rev_key),
                Action::RecordTsAndForward {
                    port: to(&sim, sb, sa),
                    register: reg_rev_tx,
                },
            ),
        );
        let r = sim.alloc_rule_id();
        sim.install_rule_direct(sb, FlowRule::new(r, 0, KeyMatch::any(), Action::Drop));

        let r = sim.alloc_rule_id();
        sim.install_rule_direct(se2, FlowRule::new(r, 100, KeyMatch::any(), Action::PushDpt));
        let r = sim.alloc_rule_id();
        sim.install_rule_direct(
            se2,
            FlowRule::new(r, 50, KeyMatch::for_flow(rev_key), Action::Forward(to(&sim, se2, sb))),
        );
        let r = sim.alloc_rule_id();
        sim.install_rule_direct(
            se2,
            FlowRule::new(
                r,
                50,
                KeyMatch::for_flow(fwd_key),
                Action::PopDptAndForward(to(&sim, se2, hdst)),
            ),
        );
        let r = sim.alloc_rule_id();
        sim.install_rule_direct(se2, FlowRule::new(r, 0, KeyMatch::any(), Action::Drop));

        if method == TelemetryMethod::ColorBased {
            sim.set_tag_policy_direct(se1, 0, 0);
            sim.set_tag_policy_direct(se2, 0, 0);
        }

        wirings.push(PairWiring {
            fwd_key,
            lossy_dir: sim.dir_between(sa, sb).expect("middle link"),
            spec: SessionSpec {
                s1: sa,
                s2: sb,
                marker: se1,
                cs,
                cr,
                reg_fwd_tx,
                reg_fwd_rx,
                reg_rev_tx,
                reg_rev_rx,
            },
        });
    }

    let reads = cfg
        .app
        .intervals
        .unwrap_or_else(|| ((cfg.duration - guard) / interval).floor() as u64 + 1);
    let app = TelemetryApp {
        method,
        interval,
        guard,
        reads,
        sessions: wirings
            .iter()
            .map(|w| MeasurementSession::new(w.spec.clone()))
            .collect(),
    };
    let idx = sim.reserve_app();
    app.start(&mut sim, idx);
    sim.set_app(idx, App::Telemetry(app));

    sim.run(cfg.duration).map_err(|e| e.to_string())?;

    let mut out = RunOutput::new();
    if let Err(e) = sim.check_conservation() {
        out.violations.push(e);
    }

    let App::Telemetry(app) = sim.apps[idx].take().expect("app present") else {
        unreachable!();
    };

    // Every completed block's measured loss must equal the drop log.
    let mut telemetry = Csv::new(
        "session,block,sent,received,lost,misaligned,one_way_s,one_way_warned,two_way_s,reordered",
    );
    let mut total_lost = 0u64;
    let mut blocks_reported = 0u64;
    for (si, session) in app.sessions.iter().enumerate() {
        let wiring = &wirings[si];
        for report in &session.blocks {
            blocks_reported += 1;
            total_lost += report.lost;
            if report.misaligned {
                out.violations
                    .push(format!("session {si} block {}: counters misaligned", report.block));
            }
            let truth = sim
                .drops
                .iter()
                .filter(|d| {
                    matches!(d.kind, DropKind::Loss | DropKind::QueueTail)
                        && d.dir == Some(wiring.lossy_dir)
                        && d.pkt.flow == wiring.fwd_key
                        && block_of_dropped(d.pkt.dpt, d.pkt.block, interval_units, method)
                            == Some(report.block)
                })
                .count() as u64;
            if truth != report.lost {
                out.violations.push(format!(
                    "session {si} block {}: measured loss {} != ground truth {truth}",
                    report.block, report.lost
                ));
            }
            telemetry.row([
                u(si as u64),
                u(report.block),
                u(report.sent),
                u(report.received),
                u(report.lost),
                b(report.misaligned),
                report.one_way.map(|d| f(d.as_seconds())).unwrap_or_default(),
                b(report.one_way_warned),
                report.two_way.map(|d| f(d.as_seconds())).unwrap_or_default(),
                b(report.reordered),
            ]);
        }
    }

    let read_msgs = count_kind(&sim, MsgKind::ReadCounters);
    let tag_msgs = count_kind(&sim, MsgKind::SetTagPolicy);
    out.files.insert("telemetry.csv".into(), telemetry.finish());
    emit_common(&sim, cfg.duration, &mut out);
    out.summary = vec![
        format!(
            "experiment=telemetry method={} pairs={pairs} reads={reads} interval={interval}",
            cfg.app.method_or("dpt"),
        ),
        format!(
            "messages: read_counters={read_msgs} set_tag_policy={tag_msgs} total={}",
            read_msgs + tag_msgs
        ),
        format!("blocks={blocks_reported} lost_total={total_lost}"),
    ];
    Ok(out)
}

fn block_of_dropped(
    dpt: Option<NtpTimestamp>,
    mark: Option<u64>,
    interval_units: u64,
    method: TelemetryMethod,
) -> Option<u64> {
    match method {
        TelemetryMethod::DptBased => dpt.map(|ts| ts.to_bits() / interval_units),
        TelemetryMethod::ColorBased => mark,
    }
}

impl AppCfg {
    fn method_or(&self, default: &str) -> String {
        if self.method.is_empty() {
            default.to_string()
        } else {
            self.method.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// updates
// ---------------------------------------------------------------------------

fn run_updates(cfg: &ExperimentConfig) -> Result<RunOutput, String> {
    let method = match cfg.app.method.as_str() {
        "" | "onephase" => UpdateMethod::OnePhase,
        "twophase" => UpdateMethod::TwoPhase,
        "periodic" => UpdateMethod::PeriodicRounds,
        other => return Err(format!("unknown update method `{other}`")),
    };
    let n = cfg.app.switches.ok_or("updates needs app.switches")? as usize;
    if n < 4 || n % 2 != 0 {
        return Err("app.switches must be an even number of switches, at least 4".into());
    }
    let m = (n - 2) / 2;
    let delay = cfg.app.link_delay;

    let mut sim = Sim::new(sim_params(cfg));
    let link = LinkParams {
        rate_bps: cfg.app.link_rate,
        prop_delay: delay,
        queue_cap: 64,
        loss_prob: 0.0,
    };

    // Deterministic per-switch clock offsets in [-spread, +spread].
    let spread = cfg.app.clock_spread;
    let mut offset_rng = crate::simnet::offset_stream(cfg.seed);
    let mut next_offset = move || {
        if spread == 0.0 {
            0.0
        } else {
            use rand::Rng;
            offset_rng.random_range(-spread..=spread)
        }
    };

    let hsrc = sim.add_host("hsrc");
    let hdst = sim.add_host("hdst");
    let s_in = sim.add_switch("sin", next_offset(), 0.0);
    let mut upper = Vec::new();
    for i in 0..m {
        upper.push(sim.add_switch(&format!("u{i}"), next_offset(), 0.0));
    }
    let mut lower = Vec::new();
    for i in 0..m {
        lower.push(sim.add_switch(&format!("l{i}"), next_offset(), 0.0));
    }
    let s_out = sim.add_switch("sout", next_offset(), 0.0);

    sim.add_link(hsrc, s_in, link);
    sim.add_link(s_out, hdst, link);
    for chain in [&upper, &lower] {
        sim.add_link(s_in, chain[0], link);
        for w in chain.windows(2) {
            sim.add_link(w[0], w[1], link);
        }
        sim.add_link(chain[m - 1], s_out, link);
    }

    // Start after the most negative clock offset has cleared zero, so the
    // ingress can stamp every packet.
    let flow_start = (3.0 * cfg.app.clock_spread).max(0.0001);
    let flow = sim.add_cbr_flow(
        hsrc,
        hdst,
        cfg.app.flow_rate,
        cfg.app.flow_mtu,
        flow_start,
        40000,
        5001,
    );
    let key = sim.flow_key(flow);
    let kmatch = KeyMatch::for_flow(key);

    // Static infrastructure: stamping at the ingress, defaults everywhere.
    let switches: Vec<NodeId> = std::iter::once(s_in)
        .chain(upper.iter().copied())
        .chain(lower.iter().copied())
        .chain(std::iter::once(s_out))
        .collect();
    let r = sim.alloc_rule_id();
    sim.install_rule_direct(s_in, FlowRule::new(r, 100, KeyMatch::any(), Action::PushDpt));
    for &sw in &switches {
        let r = sim.alloc_rule_id();
        sim.install_rule_direct(sw, FlowRule::new(r, 0, KeyMatch::any(), Action::Drop));
    }

    // The two alternating configurations: route via one chain, guard the
    // other. Every switch owns exactly one entry per configuration.
    let template_via = |sim: &Sim, active: &[NodeId], inactive: &[NodeId]| -> Vec<RuleTemplate> {
        let mut t = Vec::new();
        t.push(RuleTemplate {
            switch: s_in,
            key: kmatch,
            action: Action::Forward(sim.port_towards(s_in, active[0]).expect("chain head")),
        });
        for i in 0..m {
            let next = if i + 1 < m { active[i + 1] } else { s_out };
            t.push(RuleTemplate {
                switch: active[i],
                key: kmatch,
                action: Action::Forward(sim.port_towards(active[i], next).expect("chain link")),
            });
        }
        for &sw in inactive {
            t.push(RuleTemplate {
                switch: sw,
                key: kmatch,
                action: Action::Drop,
            });
        }
        t.push(RuleTemplate {
            switch: s_out,
            key: kmatch,
            action: Action::PopDptAndForward(sim.port_towards(s_out, hdst).expect("egress")),
        });
        t
    };
    let configs = [
        template_via(&sim, &upper, &lower),
        template_via(&sim, &lower, &upper),
    ];

    let ingress_count = (2 * n).div_ceil(3);
    let ingress: Vec<NodeId> = switches.iter().copied().take(ingress_count).collect();

    let period = match method {
        UpdateMethod::PeriodicRounds => cfg
            .app
            .round_bit
            .unwrap_or_else(|| BitIndex::sec(1).expect("sec:1"))
            .half_period_seconds(),
        _ => cfg.app.period,
    };
    let drain = cfg
        .app
        .drain
        .unwrap_or(2.0 * (m as f64 + 3.0) * delay)
        .max(0.004);
    let base_priority = 10;

    // Round 0 configuration, installed out of band.
    let parity0 = color_pattern_for(cfg.app.round_bit, 0);
    for t in &configs[0] {
        let mut rule = FlowRule::new(sim.alloc_rule_id(), base_priority, t.key, t.action)
            .with_epoch(crate::pipeline::EpochTag(0));
        match method {
            UpdateMethod::TwoPhase => rule.key_match = t.key.with_tag(0),
            UpdateMethod::OnePhase => {}
            UpdateMethod::PeriodicRounds => rule = rule.with_ts_match(parity0),
        }
        sim.install_rule_direct(t.switch, rule);
    }
    if method == UpdateMethod::TwoPhase {
        for &sw in &ingress {
            sim.set_tag_policy_direct(sw, 0, 0);
        }
    }

    let plan = UpdatePlan {
        switches: switches.clone(),
        ingress: ingress.clone(),
        configs,
        rounds: cfg.app.rounds,
        period,
        margin: cfg.app.margin,
        drain,
        base_priority,
        round_bit: Some(
            cfg.app
                .round_bit
                .unwrap_or_else(|| BitIndex::sec(1).expect("sec:1")),
        ),
    };
    let app = UpdateApp::new(method, plan).map_err(|e| e.to_string())?;
    let idx = sim.reserve_app();
    app.start(&mut sim, idx).map_err(|e| e.to_string())?;
    sim.set_app(idx, App::Update(app));

    // Periodic rounds only configure the bit's value up to the round after
    // the last installation; stop before that window closes.
    let duration = if method == UpdateMethod::PeriodicRounds {
        let last_window_end = (cfg.app.rounds + 1) as f64 * period;
        cfg.duration
            .min(last_window_end - 3.0 * cfg.app.clock_spread - 0.05)
    } else {
        cfg.duration
    };
    sim.run(duration).map_err(|e| e.to_string())?;

    let mut out = RunOutput::new();
    if let Err(e) = sim.check_conservation() {
        out.violations.push(e);
    }
    let App::Update(app) = sim.apps[idx].take().expect("app present") else {
        unreachable!();
    };

    // Consistency audit: one epoch per packet, no routing holes.
    let mut audit = Csv::new("packet,epoch,consistent");
    let mut audited = 0u64;
    let mut mixed = 0u64;
    for (pkt, epochs) in sim.audit_epochs_by_packet() {
        audited += 1;
        let consistent = epochs.len() == 1;
        if !consistent {
            mixed += 1;
        }
        let label = if consistent {
            epochs[0].to_string()
        } else {
            format!(
                "mixed:{}",
                epochs
                    .iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join("|")
            )
        };
        audit.row([pkt.to_string(), label, b(consistent)]);
    }
    if mixed > 0 {
        out.violations
            .push(format!("{mixed} of {audited} packets saw mixed epochs"));
    }
    for d in &sim.drops {
        if d.kind == DropKind::Rule && d.pkt.flow == key {
            out.violations.push(format!(
                "flow packet {} dropped by rule at t={}",
                d.pkt.id, d.t
            ));
        }
    }

    // Message accounting against the per-round formulas.
    let installs = count_kind(&sim, MsgKind::InstallRule);
    let enables = count_kind(&sim, MsgKind::SetTagPolicy);
    let removes = count_kind(&sim, MsgKind::RemoveRule);
    let changed_rounds: Vec<_> = app
        .reports
        .iter()
        .filter(|r| r.aborted.is_none() && r.changed)
        .collect();
    let removal_due = |r: &crate::controller::update::RoundReport| -> f64 {
        match method {
            UpdateMethod::TwoPhase => r.installed_at + 2.0 * cfg.ctrl_delay + drain,
            UpdateMethod::OnePhase => r.installed_at + 2.0 * cfg.app.margin + drain,
            UpdateMethod::PeriodicRounds => r.round as f64 * period + period / 4.0,
        }
    };
    let expected_installs = changed_rounds.len() as u64 * n as u64;
    let expected_enables = if method == UpdateMethod::TwoPhase {
        changed_rounds.len() as u64 * ingress.len() as u64
    } else {
        0
    };
    let expected_removes = changed_rounds
        .iter()
        .filter(|r| removal_due(r) <= duration)
        .count() as u64
        * n as u64;
    if (installs, enables, removes) != (expected_installs, expected_enables, expected_removes) {
        out.violations.push(format!(
            "message ledger ({installs},{enables},{removes}) does not match round accounting \
             ({expected_installs},{expected_enables},{expected_removes})"
        ));
    }

    let mut rounds = Csv::new("round,installed_at,changed,aborted,t_thr");
    for r in &app.reports {
        rounds.row([
            u(r.round),
            f(r.installed_at),
            b(r.changed),
            r.aborted.clone().unwrap_or_default(),
            r.t_thr.map(|t| t.to_string()).unwrap_or_default(),
        ]);
    }

    out.files.insert("audit.csv".into(), audit.finish());
    out.files.insert("rounds.csv".into(), rounds.finish());
    emit_common(&sim, cfg.duration, &mut out);
    out.summary = vec![
        format!(
            "experiment=updates method={} switches={n} rounds={} period={period}",
            cfg.app.method_or("onephase"),
            cfg.app.rounds
        ),
        format!(
            "messages: install={installs} enable={enables} remove={removes} total={}",
            installs + enables + removes
        ),
        format!("audited_packets={audited} mixed_epochs={mixed}"),
    ];
    Ok(out)
}

fn color_pattern_for(bit: Option<BitIndex>, parity: u32) -> TernaryPattern {
    let bit = bit.unwrap_or_else(|| BitIndex::sec(1).expect("sec:1"));
    let range = PeriodicRange::new(bit, 1, [parity]).expect("single-slot range");
    compile_periodic(&range).expect("one-bit compile")[0]
}

// ---------------------------------------------------------------------------
// load balancing
// ---------------------------------------------------------------------------

fn run_loadbalance(cfg: &ExperimentConfig) -> Result<RunOutput, String> {
    if cfg.nodes.is_empty() || cfg.links.is_empty() {
        return Err("loadbalance needs an explicit [node]/[link] topology".into());
    }
    if cfg.flows.len() != 1 {
        return Err("loadbalance expects exactly one [flow]".into());
    }
    let balance_name = cfg
        .app
        .balance_at
        .as_ref()
        .ok_or("loadbalance needs app.balance_at")?;

    let mut sim = Sim::new(sim_params(cfg));
    for n in &cfg.nodes {
        match n.kind {
            NodeKindCfg::Host => {
                sim.add_host(&n.id);
            }
            NodeKindCfg::Switch => {
                sim.add_switch(&n.id, n.clock_offset, n.clock_drift);
            }
        }
    }
    for l in &cfg.links {
        let a = sim.node_id(&l.a).expect("validated");
        let b = sim.node_id(&l.b).expect("validated");
        sim.add_link(
            a,
            b,
            LinkParams {
                rate_bps: l.rate,
                prop_delay: l.delay,
                queue_cap: l.queue,
                loss_prob: l.loss,
            },
        );
    }

    let fc = &cfg.flows[0];
    let src = sim.node_id(&fc.src).expect("validated");
    let dst = sim.node_id(&fc.dst).expect("validated");
    let flow = match fc.kind {
        FlowKindCfg::Aimd => sim.add_aimd_flow(
            src,
            dst,
            fc.mtu,
            fc.start,
            AimdConfig::default(),
            fc.sport,
            fc.dport,
        ),
        FlowKindCfg::Cbr => {
            sim.add_cbr_flow(src, dst, fc.rate, fc.mtu, fc.start, fc.sport, fc.dport)
        }
    };
    let key = sim.flow_key(flow);

    let balance_at = sim
        .node_id(balance_name)
        .ok_or_else(|| format!("balance_at node `{balance_name}` not defined"))?;
    if !sim.is_switch(balance_at) {
        return Err(format!("balance_at `{balance_name}` is not a switch"));
    }

    install_shortest_path_routing(&mut sim)?;

    // Equal-cost next hops toward the flow destination, parallel links as
    // separate paths.
    let dist = bfs_distances(&sim, dst);
    let here = dist[balance_at.0 as usize]
        .ok_or_else(|| format!("`{balance_name}` cannot reach the flow destination"))?;
    let mut path_ports: Vec<PortId> = Vec::new();
    for d in 0..sim.dir_count() {
        let (from, to) = sim.dir_endpoints(d);
        if from == balance_at && dist[to.0 as usize] == Some(here - 1) {
            for p in sim.ports_towards(balance_at, to) {
                if !path_ports.contains(&p) {
                    path_ports.push(p);
                }
            }
        }
    }
    path_ports.sort();
    if path_ports.len() < 2 {
        return Err(format!(
            "`{balance_name}` has {} equal-cost ports toward {}; need at least 2",
            path_ports.len(),
            fc.dst
        ));
    }
    let path_rate: f64 = path_ports
        .iter()
        .map(|p| sim.port_rate(balance_at, *p))
        .sum();

    let method = cfg.app.method_or("dpt");
    let mut used_bit: Option<BitIndex> = None;
    match method.as_str() {
        "dpt" => {
            let bit = match cfg.app.toggle_bit.as_deref() {
                None | Some("auto") => compute_toggle_interval(path_rate, fc.mtu).0,
                Some(spec) => spec.parse::<BitIndex>()?,
            };
            used_bit = Some(bit);
            let k = (path_ports.len() as f64).log2().ceil().max(1.0) as u8;
            let slots_per_path: Vec<(PortId, Vec<u32>)> = path_ports
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let slots = (0..1u32 << k)
                        .filter(|s| *s as usize % path_ports.len() == i)
                        .collect();
                    (*p, slots)
                })
                .collect();
            let first = sim.alloc_rule_id();
            let rules = dpt_balance_rules(KeyMatch::for_flow(key), bit, k, &slots_per_path, first, 50)
                .map_err(|e| e.to_string())?;
            for _ in 1..rules.len() {
                sim.alloc_rule_id();
            }
            for r in rules {
                sim.install_rule_direct(balance_at, r);
            }
        }
        "rps" | "ecmp" => {
            let policy = if method == "rps" {
                BalancePolicy::rps(path_ports.clone())
            } else {
                BalancePolicy::ecmp(path_ports.clone())
            }
            .map_err(|e| e.to_string())?;
            sim.set_group(balance_at, GroupId(0), policy);
            let r = sim.alloc_rule_id();
            sim.install_rule_direct(
                balance_at,
                FlowRule::new(r, 50, KeyMatch::for_flow(key), Action::Balance(GroupId(0))),
            );
        }
        other => return Err(format!("unknown balance method `{other}`")),
    }

    sim.run(cfg.duration).map_err(|e| e.to_string())?;

    let mut out = RunOutput::new();
    if let Err(e) = sim.check_conservation() {
        out.violations.push(e);
    }

    let mut balance = Csv::new("path,via,packets,bytes,share");
    let totals: Vec<(PortId, u64, u64)> = path_ports
        .iter()
        .map(|p| {
            let stats = sim.port_dir_stats(balance_at, *p);
            (*p, stats.offered, 0u64)
        })
        .collect();
    let sum: u64 = totals.iter().map(|t| t.1).sum();
    for (i, (p, pkts, _)) in totals.iter().enumerate() {
        let (_, to) = sim.dir_endpoints(sim.port_dir(balance_at, *p));
        balance.row([
            u(i as u64),
            format!("{}#{}", sim.node_name(to), p.0),
            u(*pkts),
            u(*pkts * (fc.mtu as u64 + cfg.dpth_overhead as u64)),
            if sum > 0 {
                f(*pkts as f64 / sum as f64)
            } else {
                f(0.0)
            },
        ]);
    }

    let stats = sim.flow_stats(flow);
    let goodput = stats.delivered_bytes as f64 * 8.0 / (cfg.duration - fc.start);
    out.files.insert("balance.csv".into(), balance.finish());
    emit_common(&sim, cfg.duration, &mut out);
    out.summary = vec![
        format!(
            "experiment=loadbalance method={method} balance_at={balance_name} paths={}",
            path_ports.len()
        ),
        match used_bit {
            Some(bit) => format!(
                "toggle_bit={bit} half_period_s={}",
                f(bit.half_period_seconds())
            ),
            None => "toggle_bit=".to_string(),
        },
        format!(
            "goodput_bps={} path_capacity_bps={} fraction={}",
            f(goodput),
            f(path_rate),
            f(goodput / path_rate)
        ),
    ];
    Ok(out)
}

/// Hop distances from every node to `target` over the undirected topology.
fn bfs_distances(sim: &Sim, target: NodeId) -> Vec<Option<u32>> {
    let n = sim.node_count();
    let mut dist = vec![None; n];
    dist[target.0 as usize] = Some(0);
    let mut queue = std::collections::VecDeque::from([target]);
    while let Some(at) = queue.pop_front() {
        let here = dist[at.0 as usize].expect("queued nodes have distances");
        for d in 0..sim.dir_count() {
            let (from, to) = sim.dir_endpoints(d);
            if to == at && dist[from.0 as usize].is_none() {
                dist[from.0 as usize] = Some(here + 1);
                queue.push_back(from);
            }
        }
    }
    dist
}

/// Destination-based forwarding to every host: each switch forwards toward
/// its first min-distance neighbor; the last switch strips the DPT header.
/// Host-adjacent switches also stamp entering packets.
fn install_shortest_path_routing(sim: &mut Sim) -> Result<(), String> {
    let hosts: Vec<NodeId> = (0..sim.node_count() as u32)
        .map(NodeId)
        .filter(|&n| !sim.is_switch(n))
        .collect();
    let switches: Vec<NodeId> = (0..sim.node_count() as u32)
        .map(NodeId)
        .filter(|&n| sim.is_switch(n))
        .collect();

    for &sw in &switches {
        let r = sim.alloc_rule_id();
        sim.install_rule_direct(sw, FlowRule::new(r, 0, KeyMatch::any(), Action::Drop));
    }
    for &host in &hosts {
        let dist = bfs_distances(sim, host);
        for &sw in &switches {
            let Some(here) = dist[sw.0 as usize] else {
                continue;
            };
            let mut chosen: Option<(PortId, bool)> = None;
            for d in 0..sim.dir_count() {
                let (from, to) = sim.dir_endpoints(d);
                if from == sw && dist[to.0 as usize] == Some(here - 1) {
                    let port = sim.ports_towards(sw, to)[0];
                    chosen = Some((port, to == host));
                    break;
                }
            }
            let Some((port, is_last_hop)) = chosen else {
                return Err(format!(
                    "switch {} has no route toward host {}",
                    sim.node_name(sw),
                    sim.node_name(host)
                ));
            };
            let action = if is_last_hop {
                Action::PopDptAndForward(port)
            } else {
                Action::Forward(port)
            };
            let r = sim.alloc_rule_id();
            sim.install_rule_direct(sw, FlowRule::new(r, 10, KeyMatch::to_dst(host), action));
        }
        // The host's access switch stamps everything the host sends.
        for d in 0..sim.dir_count() {
            let (from, to) = sim.dir_endpoints(d);
            if from == host && sim.is_switch(to) {
                let r = sim.alloc_rule_id();
                sim.install_rule_direct(to, FlowRule::new(r, 100, KeyMatch::any(), Action::PushDpt));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

pub fn encode_extremal_lines(t0: u64, width: u32) -> Result<Vec<String>, String> {
    let patterns = compile_extremal(t0, width).map_err(|e| e.to_string())?;
    Ok(patterns.iter().map(|p| p.render(width)).collect())
}

/// `spec` is `k:slot,slot,...`; the slot field's least significant bit is
/// `bit` (defaults to frac:32, the color example of the figure).
pub fn encode_periodic_lines(spec: &str, bit: &str) -> Result<Vec<String>, String> {
    let (k, slots) = spec
        .split_once(':')
        .ok_or_else(|| format!("periodic spec `{spec}` is not of the form k:slots"))?;
    let k: u8 = k.parse().map_err(|_| format!("bad slot-bit count `{k}`"))?;
    let slots: Vec<u32> = slots
        .split(',')
        .map(|s| s.trim().parse::<u32>().map_err(|_| format!("bad slot `{s}`")))
        .collect::<Result<_, _>>()?;
    let bit: BitIndex = bit.parse()?;
    let range = match PeriodicRange::new(bit, k, slots.iter().copied()) {
        Ok(r) => r,
        Err(crate::trange::TrangeError::FullSlots) => {
            PeriodicRange::always(bit, k).map_err(|e| e.to_string())?
        }
        Err(e) => return Err(e.to_string()),
    };
    let patterns = compile_periodic(&range).map_err(|e| e.to_string())?;
    Ok(patterns.iter().map(|p| p.render_ntp()).collect())
}

fn run_encode(app: &AppCfg) -> Result<RunOutput, String> {
    let lines = if let Some(t0) = app.extremal {
        encode_extremal_lines(t0, app.width)?
    } else if let Some(spec) = &app.periodic {
        encode_periodic_lines(spec, app.bit.as_deref().unwrap_or("frac:32"))?
    } else {
        return Err("encode needs app.extremal or app.periodic".into());
    };
    let mut out = RunOutput::new();
    out.files
        .insert("patterns.txt".into(), lines.join("\n") + "\n");
    out.summary = lines;
    Ok(out)
}

// ---------------------------------------------------------------------------
// common emitters
// ---------------------------------------------------------------------------

fn count_kind(sim: &Sim, kind: MsgKind) -> u64 {
    sim.ledger.iter().filter(|m| m.kind == kind).count() as u64
}

fn emit_common(sim: &Sim, duration: f64, out: &mut RunOutput) {
    let mut messages = Csv::new("time,kind,target");
    for m in &sim.ledger {
        messages.row([f(m.sent_at), m.kind.name().to_string(), sim.node_name(m.target).to_string()]);
    }
    out.files.insert("messages.csv".into(), messages.finish());

    let mut links = Csv::new("from,to,offered,delivered,queue_drops,loss_drops");
    for d in 0..sim.dir_count() {
        let (from, to) = sim.dir_endpoints(d);
        let s = sim.dir_stats(d);
        links.row([
            sim.node_name(from).to_string(),
            sim.node_name(to).to_string(),
            u(s.offered),
            u(s.delivered),
            u(s.queue_drops),
            u(s.loss_drops),
        ]);
    }
    out.files.insert("links.csv".into(), links.finish());

    let mut flows = Csv::new(
        "flow,src,dst,sent_pkts,delivered_pkts,delivered_bytes,goodput_bps,retransmits",
    );
    for i in 0..sim.flow_count() {
        let id = FlowId(i as u32);
        let key = sim.flow_key(id);
        let s = sim.flow_stats(id);
        let active = duration - sim.flow_start(id);
        flows.row([
            u(i as u64),
            sim.node_name(key.src).to_string(),
            sim.node_name(key.dst).to_string(),
            u(s.sent_pkts),
            u(s.delivered_pkts),
            u(s.delivered_bytes),
            f(s.delivered_bytes as f64 * 8.0 / active),
            u(s.retransmits),
        ]);
    }
    out.files.insert("flows.csv".into(), flows.finish());
}
