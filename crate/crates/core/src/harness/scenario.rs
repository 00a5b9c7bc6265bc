//! Scenario description and its plain-text file format.
//!
//! A scenario file holds one `key=value` setting per line; blank lines and
//! lines starting with `#` are ignored. `fault=` may repeat.
//!
//! ```text
//! nodes=4
//! cycles=3
//! seed=42
//! mode=both
//! fixture=table1
//! loss=0.1
//! fault=kill_leader@3000
//! fault=partition:1,2:4000@1000
//! fault=restart_node:4@8000
//! ```
//!
//! | key                      | meaning                                      |
//! |--------------------------|----------------------------------------------|
//! | `nodes`                  | node count, ids `1..=nodes`                  |
//! | `cycles`                 | cycles to run                                |
//! | `drain_cycles`           | extra cycles allowed until buffers empty     |
//! | `seed`                   | master seed for network, traffic and nonces  |
//! | `backend`                | `sim` or `udp`                               |
//! | `mode`                   | `visitor`, `room` or `both`                  |
//! | `override`               | node id preferred as leader                  |
//! | `cycle_ms`, `window_ms`  | cycle duration and MapReduce window          |
//! | `min_responding`         | participation threshold                      |
//! | `retry_limit`            | local fallback attempts                      |
//! | `settle_ms`              | registration settle delay                    |
//! | `probe_timeout_ms`       | PING timeout                                 |
//! | `probe_retries`          | PING attempts                                |
//! | `max_pairs_per_datagram` | pair cap per data datagram                   |
//! | `loss`                   | initial loss probability                     |
//! | `latency_ms`             | one-way latency range `min-max`              |
//! | `service_us`             | per-datagram processing time on a node       |
//! | `fixture`                | replay a named fixture instead of visitors   |
//! | `requests`               | inject this many readings for a load run     |
//! | `visitors`               | generated visitor count                      |
//! | `tag_mix`                | `man,woman,other` probabilities              |
//! | `rooms`                  | room count                                   |
//! | `dwell_ms`               | dwell range `min-max`                        |
//! | `double_read_rate`       | doorway double-read probability              |
//! | `readings_until_ms`      | end of generated traffic                     |
//! | `store`                  | journal file path (default: in memory)       |
//! | `fault`                  | `<kind>@<at_ms>`, see [`FaultSpec`]          |

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::domain::{ModeSet, NodeId};
use crate::runtime::CycleConfig;
use crate::simgen::VisitorModel;
use crate::transport::{Backend, NetConfig};

use super::HarnessError;

/// Where a scenario's readings come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Traffic {
    /// Seeded visitors, routed to nodes by room.
    Visitors(VisitorModel),
    /// A named fixture, all delivered to the lowest-id node.
    Fixture(String),
    /// `n` readings spread round-robin over every node but the highest id,
    /// arriving before the first submission.
    Load(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FaultKind {
    KillLeader,
    KillNode(NodeId),
    SetLoss(f64),
    Partition {
        nodes: Vec<NodeId>,
        duration_ms: u64,
    },
    /// Brings a killed node back with the buffer it had on disk.
    RestartNode(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultSpec {
    pub at_ms: u64,
    pub kind: FaultKind,
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            FaultKind::KillLeader => write!(f, "kill_leader")?,
            FaultKind::KillNode(n) => write!(f, "kill_node:{n}")?,
            FaultKind::SetLoss(p) => write!(f, "set_loss:{p}")?,
            FaultKind::Partition { nodes, duration_ms } => {
                let ids: Vec<String> = nodes.iter().map(|n| n.to_string()).collect();
                write!(f, "partition:{}:{duration_ms}", ids.join(","))?
            }
            FaultKind::RestartNode(n) => write!(f, "restart_node:{n}")?,
        }
        write!(f, "@{}", self.at_ms)
    }
}

fn node_id(s: &str) -> Result<NodeId, String> {
    s.trim()
        .parse::<u32>()
        .ok()
        .and_then(|n| NodeId::new(n).ok())
        .ok_or_else(|| format!("bad node id {s:?}"))
}

impl FromStr for FaultSpec {
    type Err = String;

    /// `kill_leader@3000`, `kill_node:2@3000`, `set_loss:0.3@0`,
    /// `partition:1,2:4000@1000`, `restart_node:4@8000`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (body, at) = s
            .trim()
            .rsplit_once('@')
            .ok_or_else(|| format!("fault {s:?} lacks @<ms>"))?;
        let at_ms = at
            .trim()
            .parse()
            .map_err(|_| format!("bad fault time in {s:?}"))?;
        let (name, args) = body.split_once(':').unwrap_or((body, ""));
        let kind = match name.trim().to_ascii_lowercase().as_str() {
            "kill_leader" if args.is_empty() => FaultKind::KillLeader,
            "kill_node" => FaultKind::KillNode(node_id(args)?),
            "restart_node" => FaultKind::RestartNode(node_id(args)?),
            "set_loss" => {
                let p: f64 = args
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad loss in {s:?}"))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("loss {p} outside [0, 1]"));
                }
                FaultKind::SetLoss(p)
            }
            "partition" => {
                let (ids, dur) = args
                    .rsplit_once(':')
                    .ok_or_else(|| format!("bad partition {s:?}"))?;
                FaultKind::Partition {
                    nodes: ids.split(',').map(node_id).collect::<Result<_, _>>()?,
                    duration_ms: dur
                        .trim()
                        .parse()
                        .map_err(|_| format!("bad duration in {s:?}"))?,
                }
            }
            _ => return Err(format!("unknown fault {s:?}")),
        };
        Ok(FaultSpec { at_ms, kind })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub node_count: u32,
    pub cycle: CycleConfig,
    pub net: NetConfig,
    pub traffic: Traffic,
    pub cycles_to_run: u32,
    /// Extra cycles to run, one at a time, until every live buffer is empty.
    pub drain_cycles: u32,
    pub faults: Vec<FaultSpec>,
    pub modes: ModeSet,
    pub override_leader: Option<NodeId>,
    pub seed: u64,
    /// Processing time each node spends per inbound datagram.
    pub service_time_us: u64,
    /// End of generated traffic; defaults to the end of the run.
    pub readings_until_ms: Option<u64>,
    pub store_path: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            node_count: 3,
            cycle: CycleConfig::default(),
            net: NetConfig::default(),
            traffic: Traffic::Visitors(VisitorModel::default()),
            cycles_to_run: 3,
            drain_cycles: 0,
            faults: Vec::new(),
            modes: ModeSet::BOTH,
            override_leader: None,
            seed: 1,
            service_time_us: 150,
            readings_until_ms: None,
            store_path: None,
        }
    }
}

impl ScenarioConfig {
    pub fn run_ms(&self) -> u64 {
        u64::from(self.cycles_to_run) * self.cycle.cycle_duration_ms
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        (1..=self.node_count)
            .map(|n| NodeId::new(n).expect("ids start at 1"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.node_count == 0 {
            return bad("node_count must be at least 1".into());
        }
        self.cycle
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.net.validate().map_err(HarnessError::Config)?;
        if let Traffic::Visitors(m) = &self.traffic {
            m.validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if let Some(o) = self.override_leader {
            if o.get() > self.node_count {
                return bad(format!(
                    "override {o} is not one of the {} nodes",
                    self.node_count
                ));
            }
        }
        let horizon =
            u64::from(self.cycles_to_run + self.drain_cycles) * self.cycle.cycle_duration_ms;
        for f in &self.faults {
            if f.at_ms > horizon {
                return bad(format!("fault {f} is after the end of the run"));
            }
            let ids: Vec<NodeId> = match &f.kind {
                FaultKind::KillNode(n) | FaultKind::RestartNode(n) => vec![*n],
                FaultKind::Partition { nodes, .. } => nodes.clone(),
                _ => vec![],
            };
            if let Some(n) = ids.iter().find(|n| n.get() > self.node_count) {
                return bad(format!("fault {f} names unknown node {n}"));
            }
        }
        if self.net.mode == Backend::Udp && !self.faults.is_empty() {
            return bad("fault injection needs the simulated backend".into());
        }
        Ok(())
    }

    /// Parses a scenario file over the defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = ScenarioConfig::default();
        let mut visitors = VisitorModel::default();
        let mut traffic: Option<Traffic> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| HarnessError::Config(format!("line {}: {m}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            fn num<T: FromStr>(v: &str) -> Result<T, String> {
                v.parse().map_err(|_| format!("bad number {v:?}"))
            }
            fn range(v: &str) -> Result<(u64, u64), String> {
                let (a, b) = v
                    .split_once('-')
                    .ok_or_else(|| format!("expected min-max, got {v:?}"))?;
                Ok((num(a.trim())?, num(b.trim())?))
            }
            let applied: Result<(), String> = (|| {
                match key {
                    "nodes" => cfg.node_count = num(value)?,
                    "cycles" => cfg.cycles_to_run = num(value)?,
                    "drain_cycles" => cfg.drain_cycles = num(value)?,
                    "seed" => cfg.seed = num(value)?,
                    "backend" => cfg.net.mode = value.parse()?,
                    "mode" => cfg.modes = value.parse()?,
                    "override" => cfg.override_leader = Some(node_id(value)?),
                    "cycle_ms" => cfg.cycle.cycle_duration_ms = num(value)?,
                    "window_ms" => cfg.cycle.mapreduce_window_ms = num(value)?,
                    "min_responding" => cfg.cycle.min_responding_nodes = num(value)?,
                    "retry_limit" => cfg.cycle.retry_limit = num(value)?,
                    "settle_ms" => cfg.cycle.settle_ms = num(value)?,
                    "probe_timeout_ms" => cfg.cycle.probe_timeout_ms = num(value)?,
                    "probe_retries" => cfg.cycle.probe_retries = num(value)?,
                    "max_pairs_per_datagram" => {
                        cfg.cycle.max_pairs_per_datagram = Some(num(value)?)
                    }
                    "loss" => cfg.net.loss_rate = num(value)?,
                    "latency_ms" => cfg.net.latency_ms = range(value)?,
                    "service_us" => cfg.service_time_us = num(value)?,
                    "fixture" => traffic = Some(Traffic::Fixture(value.to_string())),
                    "requests" => traffic = Some(Traffic::Load(num(value)?)),
                    "visitors" => visitors.visitor_count = num(value)?,
                    "tag_mix" => {
                        let ps: Vec<f64> = value
                            .split(',')
                            .map(|p| num(p.trim()))
                            .collect::<Result<_, _>>()?;
                        visitors.tag_mix = ps
                            .try_into()
                            .map_err(|_| "tag_mix needs three values".to_string())?;
                    }
                    "rooms" => visitors.rooms = num(value)?,
                    "dwell_ms" => visitors.dwell_ms = range(value)?,
                    "double_read_rate" => visitors.double_read_rate = num(value)?,
                    "readings_until_ms" => cfg.readings_until_ms = Some(num(value)?),
                    "store" => cfg.store_path = Some(PathBuf::from(value)),
                    "fault" => cfg.faults.push(value.parse()?),
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            })();
            applied.map_err(err)?;
        }
        cfg.traffic = traffic.unwrap_or(Traffic::Visitors(visitors));
        cfg.faults.sort_by_key(|f| f.at_ms);
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_file() {
        let cfg = ScenarioConfig::parse(
            "# demo\nnodes=4\ncycles=5\nseed=9\nmode=room\nloss=0.1\nlatency_ms=10-20\n\
             visitors=80\ntag_mix=0.3,0.3,0.4\nfault=restart_node:4@8000\nfault=kill_leader@3000\n\
             fault=partition:1,2:4000@1000\nfault=set_loss:0.3@0\noverride=2\n",
        )
        .unwrap();
        assert_eq!(cfg.node_count, 4);
        assert_eq!(cfg.cycles_to_run, 5);
        assert_eq!(cfg.modes, ModeSet::only(crate::domain::CountMode::Room));
        assert_eq!(cfg.net.latency_ms, (10, 20));
        assert_eq!(cfg.override_leader, NodeId::new(2).ok());
        let Traffic::Visitors(v) = &cfg.traffic else {
            panic!("expected visitors")
        };
        assert_eq!(v.visitor_count, 80);
        let faults: Vec<String> = cfg.faults.iter().map(|f| f.to_string()).collect();
        assert_eq!(
            faults,
            [
                "set_loss:0.3@0",
                "partition:1,2:4000@1000",
                "kill_leader@3000",
                "restart_node:4@8000"
            ]
        );
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "nodes",
            "nodes=x",
            "colour=red",
            "fault=explode@1",
            "fault=kill_node:0@5",
            "tag_mix=1,0",
        ] {
            assert!(ScenarioConfig::parse(text).is_err(), "{text}");
        }
        let cfg = ScenarioConfig::parse("nodes=2\nfault=kill_node:3@10").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ScenarioConfig::parse("backend=udp\nfault=kill_leader@10").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ScenarioConfig::parse("cycles=1\nfault=kill_leader@999999").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fault_roundtrip() {
        for s in [
            "kill_leader@0",
            "kill_node:3@10",
            "set_loss:0.25@7",
            "partition:2,3:500@9",
            "restart_node:1@4",
        ] {
            assert_eq!(s.parse::<FaultSpec>().unwrap().to_string(), s);
        }
    }
}
