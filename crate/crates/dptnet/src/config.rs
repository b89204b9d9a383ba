//! Experiment configuration.
//!
//! Plain sectioned text: `[section]` headers, `key = value` lines, `#`
//! comments. `[node]`, `[link]` and `[flow]` sections repeat to form lists.
//! Parsing collects every error (with its line number) instead of stopping
//! at the first.

use crate::timebase::BitIndex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.line == 0 {
            write!(f, "config: {}", self.msg)
        } else {
            write!(f, "line {}: {}", self.line, self.msg)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Telemetry,
    Updates,
    LoadBalance,
    Encode,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Telemetry => "telemetry",
            ExperimentKind::Updates => "updates",
            ExperimentKind::LoadBalance => "loadbalance",
            ExperimentKind::Encode => "encode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKindCfg {
    Host,
    Switch,
}

#[derive(Debug, Clone)]
pub struct NodeCfg {
    pub id: String,
    pub kind: NodeKindCfg,
    pub clock_offset: f64,
    pub clock_drift: f64,
    pub line: usize,
}

#[derive(Debug, Clone)]
pub struct LinkCfg {
    pub a: String,
    pub b: String,
    pub rate: f64,
    pub delay: f64,
    pub queue: usize,
    pub loss: f64,
    pub line: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKindCfg {
    Cbr,
    Aimd,
}

#[derive(Debug, Clone)]
pub struct FlowCfg {
    pub kind: FlowKindCfg,
    pub src: String,
    pub dst: String,
    pub rate: f64,
    pub mtu: u32,
    pub start: f64,
    pub sport: u16,
    pub dport: u16,
    pub line: usize,
}

/// Application knobs; which ones matter depends on the experiment kind.
#[derive(Debug, Clone)]
pub struct AppCfg {
    pub method: String,
    pub interval: f64,
    pub guard: Option<f64>,
    pub intervals: Option<u64>,
    pub pairs: Option<u64>,
    pub loss: f64,
    pub flow_rate: f64,
    pub flow_mtu: u32,
    pub link_rate: f64,
    pub link_delay: f64,
    pub switches: Option<u64>,
    pub rounds: u64,
    pub period: f64,
    pub margin: f64,
    pub drain: Option<f64>,
    pub clock_spread: f64,
    pub round_bit: Option<BitIndex>,
    pub balance_at: Option<String>,
    pub toggle_bit: Option<String>,
    pub extremal: Option<u64>,
    pub periodic: Option<String>,
    pub width: u32,
    pub bit: Option<String>,
}

impl Default for AppCfg {
    fn default() -> Self {
        AppCfg {
            method: String::new(),
            interval: 1.0,
            guard: None,
            intervals: None,
            pairs: None,
            loss: 0.0,
            flow_rate: 200e3,
            flow_mtu: 125,
            link_rate: 10e6,
            link_delay: 1e-3,
            switches: None,
            rounds: 12,
            period: 1.0,
            margin: 0.1,
            drain: None,
            clock_spread: 0.0,
            round_bit: None,
            balance_at: None,
            toggle_bit: None,
            extremal: None,
            periodic: None,
            width: 32,
            bit: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub duration: f64,
    pub seed: u64,
    pub dpth_overhead: u32,
    pub ctrl_delay: f64,
    pub nodes: Vec<NodeCfg>,
    pub links: Vec<LinkCfg>,
    pub flows: Vec<FlowCfg>,
    pub app: AppCfg,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::Telemetry,
            duration: 10.0,
            seed: 1,
            dpth_overhead: 8,
            ctrl_delay: 1e-3,
            nodes: Vec::new(),
            links: Vec::new(),
            flows: Vec::new(),
            app: AppCfg::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn guard(&self) -> f64 {
        self.app.guard.unwrap_or(self.app.interval / 2.0)
    }

    /// Applies a `key=value` override (sweep or command line). Accepts the
    /// same keys as the file sections, qualified as `app.X` or bare
    /// experiment keys.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), String> {
        if let Some(app_key) = key.strip_prefix("app.") {
            return set_app_key(&mut self.app, app_key, value);
        }
        set_experiment_key(self, key, value)
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("bad {what} value `{value}`"))
}

fn parse_f64(value: &str, what: &str) -> Result<f64, String> {
    let v: f64 = value
        .parse()
        .map_err(|_| format!("bad {what} value `{value}`"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{what} must be finite, got `{value}`"))
    }
}

fn set_experiment_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "kind" => {
            cfg.kind = match value {
                "telemetry" => ExperimentKind::Telemetry,
                "updates" => ExperimentKind::Updates,
                "loadbalance" => ExperimentKind::LoadBalance,
                "encode" => ExperimentKind::Encode,
                other => return Err(format!("unknown experiment kind `{other}`")),
            }
        }
        "duration" => cfg.duration = parse_f64(value, "duration")?,
        "seed" => cfg.seed = parse_num(value, "seed")?,
        "dpth_overhead" => cfg.dpth_overhead = parse_num(value, "dpth_overhead")?,
        "ctrl_delay" => cfg.ctrl_delay = parse_f64(value, "ctrl_delay")?,
        other => return Err(format!("unknown key `{other}` in [experiment]")),
    }
    Ok(())
}

fn set_app_key(app: &mut AppCfg, key: &str, value: &str) -> Result<(), String> {
    match key {
        "method" => app.method = value.to_string(),
        "interval" => app.interval = parse_f64(value, "interval")?,
        "guard" => app.guard = Some(parse_f64(value, "guard")?),
        "intervals" => app.intervals = Some(parse_num(value, "intervals")?),
        "pairs" => app.pairs = Some(parse_num(value, "pairs")?),
        "loss" => app.loss = parse_f64(value, "loss")?,
        "flow_rate" => app.flow_rate = parse_f64(value, "flow_rate")?,
        "flow_mtu" => app.flow_mtu = parse_num(value, "flow_mtu")?,
        "link_rate" => app.link_rate = parse_f64(value, "link_rate")?,
        "link_delay" => app.link_delay = parse_f64(value, "link_delay")?,
        "switches" => app.switches = Some(parse_num(value, "switches")?),
        "rounds" => app.rounds = parse_num(value, "rounds")?,
        "period" => app.period = parse_f64(value, "period")?,
        "margin" => app.margin = parse_f64(value, "margin")?,
        "drain" => app.drain = Some(parse_f64(value, "drain")?),
        "clock_spread" => app.clock_spread = parse_f64(value, "clock_spread")?,
        "round_bit" => app.round_bit = Some(value.parse::<BitIndex>()?),
        "balance_at" => app.balance_at = Some(value.to_string()),
        "toggle_bit" => app.toggle_bit = Some(value.to_string()),
        "extremal" => app.extremal = Some(parse_num(value, "extremal")?),
        "periodic" => app.periodic = Some(value.to_string()),
        "width" => app.width = parse_num(value, "width")?,
        "bit" => app.bit = Some(value.to_string()),
        other => return Err(format!("unknown key `{other}` in [app]")),
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Experiment,
    Node,
    Link,
    Flow,
    App,
}

/// Parses and validates a config file, reporting every error found.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let mut cfg = ExperimentConfig::default();
    let mut errors: Vec<ConfigError> = Vec::new();
    let mut section = Section::None;
    let mut saw_experiment = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                errors.push(ConfigError {
                    line,
                    msg: format!("malformed section header `{content}`"),
                });
                continue;
            };
            section = match name.trim() {
                "experiment" => {
                    saw_experiment = true;
                    Section::Experiment
                }
                "node" => {
                    cfg.nodes.push(NodeCfg {
                        id: String::new(),
                        kind: NodeKindCfg::Host,
                        clock_offset: 0.0,
                        clock_drift: 0.0,
                        line,
                    });
                    Section::Node
                }
                "link" => {
                    cfg.links.push(LinkCfg {
                        a: String::new(),
                        b: String::new(),
                        rate: 10e6,
                        delay: 1e-3,
                        queue: 32,
                        loss: 0.0,
                        line,
                    });
                    Section::Link
                }
                "flow" => {
                    cfg.flows.push(FlowCfg {
                        kind: FlowKindCfg::Cbr,
                        src: String::new(),
                        dst: String::new(),
                        rate: 1e6,
                        mtu: 1500,
                        start: 0.0,
                        sport: 40000,
                        dport: 5001,
                        line,
                    });
                    Section::Flow
                }
                "app" => Section::App,
                other => {
                    errors.push(ConfigError {
                        line,
                        msg: format!("unknown section `[{other}]`"),
                    });
                    Section::None
                }
            };
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            errors.push(ConfigError {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            });
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        let result = match section {
            Section::None => Err("key outside any section".to_string()),
            Section::Experiment => set_experiment_key(&mut cfg, key, value),
            Section::App => set_app_key(&mut cfg.app, key, value),
            Section::Node => set_node_key(cfg.nodes.last_mut().expect("open node"), key, value),
            Section::Link => set_link_key(cfg.links.last_mut().expect("open link"), key, value),
            Section::Flow => set_flow_key(cfg.flows.last_mut().expect("open flow"), key, value),
        };
        if let Err(msg) = result {
            errors.push(ConfigError { line, msg });
        }
    }

    if !saw_experiment {
        errors.push(ConfigError {
            line: 0,
            msg: "missing [experiment] section".to_string(),
        });
    }
    validate(&cfg, &mut errors);
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

fn set_node_key(node: &mut NodeCfg, key: &str, value: &str) -> Result<(), String> {
    match key {
        "id" => node.id = value.to_string(),
        "kind" => {
            node.kind = match value {
                "host" => NodeKindCfg::Host,
                "switch" => NodeKindCfg::Switch,
                other => return Err(format!("unknown node kind `{other}`")),
            }
        }
        "clock_offset" => node.clock_offset = parse_f64(value, "clock_offset")?,
        "clock_drift" => node.clock_drift = parse_f64(value, "clock_drift")?,
        other => return Err(format!("unknown key `{other}` in [node]")),
    }
    Ok(())
}

fn set_link_key(link: &mut LinkCfg, key: &str, value: &str) -> Result<(), String> {
    match key {
        "a" => link.a = value.to_string(),
        "b" => link.b = value.to_string(),
        "rate" => link.rate = parse_f64(value, "rate")?,
        "delay" => link.delay = parse_f64(value, "delay")?,
        "queue" => link.queue = parse_num(value, "queue")?,
        "loss" => link.loss = parse_f64(value, "loss")?,
        other => return Err(format!("unknown key `{other}` in [link]")),
    }
    Ok(())
}

fn set_flow_key(flow: &mut FlowCfg, key: &str, value: &str) -> Result<(), String> {
    match key {
        "kind" => {
            flow.kind = match value {
                "cbr" => FlowKindCfg::Cbr,
                "aimd" => FlowKindCfg::Aimd,
                other => return Err(format!("unknown flow kind `{other}`")),
            }
        }
        "src" => flow.src = value.to_string(),
        "dst" => flow.dst = value.to_string(),
        "rate" => flow.rate = parse_f64(value, "rate")?,
        "mtu" => flow.mtu = parse_num(value, "mtu")?,
        "start" => flow.start = parse_f64(value, "start")?,
        "sport" => flow.sport = parse_num(value, "sport")?,
        "dport" => flow.dport = parse_num(value, "dport")?,
        other => return Err(format!("unknown key `{other}` in [flow]")),
    }
    Ok(())
}

fn validate(cfg: &ExperimentConfig, errors: &mut Vec<ConfigError>) {
    use std::collections::HashSet;
    let mut ids: HashSet<&str> = HashSet::new();
    for node in &cfg.nodes {
        if node.id.is_empty() {
            errors.push(ConfigError {
                line: node.line,
                msg: "[node] missing id".to_string(),
            });
        } else if !ids.insert(node.id.as_str()) {
            errors.push(ConfigError {
                line: node.line,
                msg: format!("duplicate node id `{}`", node.id),
            });
        }
    }
    let defined = |id: &str| ids.contains(id);
    for link in &cfg.links {
        for end in [&link.a, &link.b] {
            if end.is_empty() {
                errors.push(ConfigError {
                    line: link.line,
                    msg: "[link] missing endpoint".to_string(),
                });
            } else if !defined(end) {
                errors.push(ConfigError {
                    line: link.line,
                    msg: format!("link references undefined node `{end}`"),
                });
            }
        }
        if link.rate <= 0.0 {
            errors.push(ConfigError {
                line: link.line,
                msg: "link rate must be positive".to_string(),
            });
        }
        if !(0.0..=1.0).contains(&link.loss) {
            errors.push(ConfigError {
                line: link.line,
                msg: "link loss must be in [0, 1]".to_string(),
            });
        }
    }
    let host = |id: &str| {
        cfg.nodes
            .iter()
            .any(|n| n.id == id && n.kind == NodeKindCfg::Host)
    };
    for flow in &cfg.flows {
        for end in [&flow.src, &flow.dst] {
            if !defined(end) {
                errors.push(ConfigError {
                    line: flow.line,
                    msg: format!("flow references undefined node `{end}`"),
                });
            } else if !host(end) {
                errors.push(ConfigError {
                    line: flow.line,
                    msg: format!("flow endpoint `{end}` is not a host"),
                });
            }
        }
        if flow.mtu == 0 {
            errors.push(ConfigError {
                line: flow.line,
                msg: "flow mtu must be positive".to_string(),
            });
        }
    }
    if cfg.duration <= 0.0 {
        errors.push(ConfigError {
            line: 0,
            msg: "duration must be positive".to_string(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_telemetry_config_fills_defaults() {
        let cfg = parse_config(
            "[experiment]\nkind = telemetry\n[node]\nid = a\nkind = host\n\
             [node]\nid = b\nkind = host\n[link]\na = a\nb = b\n",
        )
        .unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Telemetry);
        assert_eq!(cfg.duration, 10.0);
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.links[0].queue, 32);
        assert_eq!(cfg.guard(), 0.5);
    }

    #[test]
    fn dangling_reference_reported_with_line() {
        let err = parse_config(
            "[experiment]\nkind = telemetry\n[node]\nid = a\nkind = host\n\
             [link]\na = a\nb = ghost\n",
        )
        .unwrap_err();
        assert_eq!(err.len(), 1);
        assert_eq!(err[0].line, 6);
        assert!(err[0].msg.contains("ghost"));
    }

    #[test]
    fn all_errors_are_aggregated() {
        let err = parse_config(
            "[experiment]\nkind = bogus\nduration = soon\n[node]\nid = a\nkindd = host\n",
        )
        .unwrap_err();
        assert_eq!(err.len(), 3);
        assert_eq!(err[0].line, 2);
        assert_eq!(err[1].line, 3);
        assert_eq!(err[2].line, 6);
    }

    #[test]
    fn comments_and_spacing_are_tolerated() {
        let cfg = parse_config(
            "# top comment\n[experiment]\nkind = updates   # trailing\n\n  seed=42\n[app]\nswitches = 12\n",
        )
        .unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Updates);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.app.switches, Some(12));
    }

    #[test]
    fn overrides_reuse_section_keys() {
        let mut cfg = parse_config("[experiment]\nkind = telemetry\n").unwrap();
        cfg.apply_override("seed", "9").unwrap();
        cfg.apply_override("app.pairs", "16").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.app.pairs, Some(16));
        assert!(cfg.apply_override("app.nope", "1").is_err());
    }
}
