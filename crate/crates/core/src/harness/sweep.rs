//! Load sweeps: one single-cycle scenario per request count.

use std::fmt::Write as _;

use crate::runtime::Metric;
use crate::simgen::VisitorModel;

use super::scenario::{ScenarioConfig, Traffic};
use super::{run_scenario, HarnessError};

pub const SWEEP_HEADER: &str = "requests,mean_response_ms,rtt_ms,ttfb_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub requests: u64,
    pub mean_response_ms: f64,
    pub rtt_ms: f64,
    pub ttfb_ms: f64,
}

fn single_cycle(base: &ScenarioConfig) -> ScenarioConfig {
    let mut cfg = base.clone();
    cfg.cycles_to_run = 1;
    cfg.drain_cycles = 0;
    cfg.faults.clear();
    cfg
}

/// Runs `base` once per count with that many readings, each sent as its
/// own DATA_SUBMIT, spread over every node but the leader.
pub fn sweep_load(base: &ScenarioConfig, counts: &[u64]) -> Result<Vec<SweepRow>, HarnessError> {
    if counts.windows(2).any(|w| w[0] > w[1]) {
        return Err(HarnessError::Config(
            "request counts must be ascending".into(),
        ));
    }
    counts
        .iter()
        .map(|&n| {
            let mut cfg = single_cycle(base);
            cfg.traffic = Traffic::Load(n);
            cfg.cycle.max_pairs_per_datagram = Some(1);
            let out = run_scenario(&cfg)?;
            Ok(SweepRow {
                requests: n,
                mean_response_ms: out.report.mean_ms(Metric::Response),
                rtt_ms: out.report.mean_ms(Metric::Rtt),
                ttfb_ms: out.report.mean_ms(Metric::Ttfb),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.3},{:.3},{:.3}",
            r.requests, r.mean_response_ms, r.rtt_ms, r.ttfb_ms
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleTimeRow {
    pub visitors: u32,
    pub readings: u64,
    pub mapreduce_ms: f64,
    pub cycle_ms: f64,
}

/// Per-cycle execution time against visitor count. Visitors all arrive
/// before the first submission so one cycle commits them.
pub fn cycle_time_sweep(
    base: &ScenarioConfig,
    visitors: &[u32],
) -> Result<Vec<CycleTimeRow>, HarnessError> {
    visitors
        .iter()
        .map(|&v| {
            let mut cfg = single_cycle(base);
            let model = match &base.traffic {
                Traffic::Visitors(m) => m.clone(),
                _ => VisitorModel::default(),
            };
            cfg.traffic = Traffic::Visitors(VisitorModel {
                visitor_count: v,
                ..model
            });
            cfg.readings_until_ms =
                Some(cfg.cycle.cycle_duration_ms - 2 * cfg.cycle.mapreduce_window_ms);
            let out = run_scenario(&cfg)?;
            let row = out.report.cycles.iter().find(|c| c.duration_us.is_some());
            Ok(CycleTimeRow {
                visitors: v,
                readings: row.map_or(0, |c| c.readings_committed),
                mapreduce_ms: row.and_then(|c| c.mapreduce_us).unwrap_or(0) as f64 / 1000.0,
                cycle_ms: row.and_then(|c| c.duration_us).unwrap_or(0) as f64 / 1000.0,
            })
        })
        .collect()
}

pub fn cycle_time_csv(rows: &[CycleTimeRow]) -> String {
    let mut out = String::from("visitors,readings,mapreduce_ms,cycle_ms\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.3},{:.3}",
            r.visitors, r.readings, r.mapreduce_ms, r.cycle_ms
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sweep_is_header_only() {
        let rows = sweep_load(&ScenarioConfig::default(), &[]).unwrap();
        assert_eq!(
            sweep_csv(&rows),
            "requests,mean_response_ms,rtt_ms,ttfb_ms\n"
        );
    }

    #[test]
    fn descending_counts_are_rejected() {
        assert!(sweep_load(&ScenarioConfig::default(), &[10, 5]).is_err());
    }
}
