//! Metrics derived from the event log, and their CSV rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::runtime::{CycleConfig, Event, EventKind, Metric, NodePhase};
use crate::transport::MessageKind;

use super::HarnessError;

pub const REQUEST_DEFINITION: &str = "one request = one DATA_SUBMIT datagram";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRow {
    pub metric: Metric,
    pub node: u32,
    pub cycle: u32,
    pub at_us: u64,
    pub value_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CycleRow {
    pub cycle: u32,
    /// Node that committed the cycle, 0 if none did.
    pub leader: u32,
    /// Cycle start to commit.
    pub duration_us: Option<u64>,
    /// Leader entering DISPATCHING to the last REDUCE_RESULT it received,
    /// or to its commit when every segment was reduced locally.
    pub mapreduce_us: Option<u64>,
    pub sent: u64,
    pub received: u64,
    pub readings_committed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub metric: &'static str,
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetricsReport {
    pub samples: Vec<SampleRow>,
    pub cycles: Vec<CycleRow>,
    /// DATA_SUBMIT datagrams sent.
    pub requests: u64,
    pub event_lines: Vec<String>,
}

fn ms(us: u64) -> String {
    format!("{}.{:03}", us / 1000, us % 1000)
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl MetricsReport {
    pub fn from_events(events: &[Event], cycle: &CycleConfig) -> Self {
        let mut report = MetricsReport::default();
        let mut cycles: BTreeMap<u32, CycleRow> = BTreeMap::new();
        let mut dispatch_at: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        let mut last_result: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for e in events {
            report.event_lines.push(e.to_string());
            let row = cycles.entry(e.cycle).or_insert_with(|| CycleRow {
                cycle: e.cycle,
                ..Default::default()
            });
            match &e.kind {
                EventKind::Sample { metric, micros } => report.samples.push(SampleRow {
                    metric: *metric,
                    node: e.node,
                    cycle: e.cycle,
                    at_us: e.at_us,
                    value_us: *micros,
                }),
                EventKind::Sent { kind, .. } => {
                    row.sent += 1;
                    if *kind == MessageKind::DataSubmit {
                        report.requests += 1;
                    }
                }
                EventKind::Received { kind, .. } => {
                    row.received += 1;
                    if *kind == MessageKind::ReduceResult {
                        last_result.insert((e.cycle, e.node), e.at_us);
                    }
                }
                EventKind::Phase {
                    to: NodePhase::Dispatching,
                    ..
                } => {
                    dispatch_at.insert((e.cycle, e.node), e.at_us);
                }
                EventKind::Committed { readings, .. } => {
                    row.leader = e.node;
                    row.readings_committed += readings;
                    row.duration_us = Some(e.at_us.saturating_sub(cycle.cycle_start_us(e.cycle)));
                    let end = last_result
                        .get(&(e.cycle, e.node))
                        .copied()
                        .unwrap_or(e.at_us);
                    row.mapreduce_us = dispatch_at
                        .get(&(e.cycle, e.node))
                        .map(|d| end.saturating_sub(*d));
                }
                _ => {}
            }
        }
        report.cycles = cycles.into_values().collect();
        report
    }

    pub fn values(&self, metric: Metric) -> Vec<u64> {
        let mut v: Vec<u64> = self
            .samples
            .iter()
            .filter(|s| s.metric == metric)
            .map(|s| s.value_us)
            .collect();
        v.sort_unstable();
        v
    }

    /// Mean in milliseconds, 0 without samples.
    pub fn mean_ms(&self, metric: Metric) -> f64 {
        mean_ms(&self.values(metric))
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let durations: Vec<u64> = {
            let mut v: Vec<u64> = self.cycles.iter().filter_map(|c| c.duration_us).collect();
            v.sort_unstable();
            v
        };
        [
            (Metric::Response.as_str(), self.values(Metric::Response)),
            (Metric::Rtt.as_str(), self.values(Metric::Rtt)),
            (Metric::Ttfb.as_str(), self.values(Metric::Ttfb)),
            ("cycle_duration", durations),
        ]
        .into_iter()
        .map(|(metric, v)| SummaryRow {
            metric,
            count: v.len(),
            mean_ms: mean_ms(&v),
            p50_ms: percentile(&v, 50.0) as f64 / 1000.0,
            p95_ms: percentile(&v, 95.0) as f64 / 1000.0,
            p99_ms: percentile(&v, 99.0) as f64 / 1000.0,
        })
        .collect()
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("kind,node,cycle,at_ms,value\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.metric.as_str(),
                s.node,
                s.cycle,
                ms(s.at_us),
                ms(s.value_us)
            );
        }
        for c in &self.cycles {
            if let Some(d) = c.duration_us {
                let _ = writeln!(
                    out,
                    "cycle_duration,{},{},{},{}",
                    c.leader,
                    c.cycle,
                    ms(d),
                    ms(d)
                );
            }
            if let Some(m) = c.mapreduce_us {
                let _ = writeln!(
                    out,
                    "mapreduce_duration,{},{},{},{}",
                    c.leader,
                    c.cycle,
                    ms(c.duration_us.unwrap_or(0)),
                    ms(m)
                );
            }
            let _ = writeln!(out, "messages_sent,0,{},0.000,{}", c.cycle, c.sent);
            let _ = writeln!(out, "messages_received,0,{},0.000,{}", c.cycle, c.received);
            let _ = writeln!(
                out,
                "readings_committed,{},{},0.000,{}",
                c.leader, c.cycle, c.readings_committed
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,count,mean_ms,p50_ms,p95_ms,p99_ms\n");
        for r in self.summary() {
            let _ = writeln!(
                out,
                "{},{},{:.3},{:.3},{:.3},{:.3}",
                r.metric, r.count, r.mean_ms, r.p50_ms, r.p95_ms, r.p99_ms
            );
        }
        out
    }

    pub fn events_log(&self) -> String {
        let mut out = format!("# {REQUEST_DEFINITION}\n");
        for l in &self.event_lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }
}

fn mean_ms(sorted: &[u64]) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    sorted.iter().sum::<u64>() as f64 / sorted.len() as f64 / 1000.0
}

/// Writes metrics.csv, summary.csv and events.log into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let files = [
        ("metrics.csv", report.metrics_csv()),
        ("summary.csv", report.summary_csv()),
        ("events.log", report.events_log()),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 95.0), 95);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&[7], 99.0), 7);
        assert_eq!(percentile(&[], 50.0), 0);
        assert_eq!(mean_ms(&[1000, 3000]), 2.0);
    }
}
