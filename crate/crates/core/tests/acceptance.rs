//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdmr::domain::{CountMode, ModeSet, NodeId, RoomId, SensorReading, TagCategory};
use crowdmr::harness::{
    emit_report, run_scenario, sweep_csv, sweep_load, FaultKind, FaultSpec, ScenarioConfig,
    Simulation, Traffic,
};
use crowdmr::mapreduce::{
    map_reading, run_distributed, sequential_oracle, sort_pairs, CycleResult,
};
use crowdmr::runtime::{
    leader_cycle, reduce_locally, CycleConfig, EventKind, NodePhase, Submission,
};
use crowdmr::simgen::VisitorModel;
use crowdmr::transport::{decode_message, encode_message, Message, MessageKind, HEADER_LEN};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn counts(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn id(n: u32) -> NodeId {
    NodeId::new(n).unwrap()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn table1(modes: ModeSet) -> ScenarioConfig {
    ScenarioConfig {
        node_count: 3,
        cycles_to_run: 1,
        traffic: Traffic::Fixture("table1".into()),
        modes,
        ..Default::default()
    }
}

fn c1_visitor_counts() -> Outcome {
    let out =
        run_scenario(&table1(ModeSet::only(CountMode::Visitor))).map_err(|e| e.to_string())?;
    let got = out.store.totals(CountMode::Visitor);
    let want = counts(&[("man", 10), ("woman", 21), ("other", 12)]);
    ensure(got == want, || {
        format!("committed {got:?}, expected {want:?}")
    })?;
    ensure(out.store.totals(CountMode::Room).is_empty(), || {
        "room rows written in visitor mode".into()
    })?;
    Ok(format!("{got:?}"))
}

fn c2_room_counts() -> Outcome {
    let out = run_scenario(&table1(ModeSet::only(CountMode::Room))).map_err(|e| e.to_string())?;
    let got = out.store.totals(CountMode::Room);
    let readings = crowdmr::simgen::replay_fixture("table1").map_err(|e| e.to_string())?;
    let oracle = sequential_oracle(&readings, CountMode::Room);
    ensure(got == oracle, || {
        format!("committed {got:?}, oracle {oracle:?}")
    })?;
    let want = counts(&[("Room1", 2), ("Room2", 5), ("Room3", 5), ("Room4", 4)]);
    ensure(oracle == want, || {
        format!("oracle {oracle:?} differs from hand count {want:?}")
    })?;
    let total: u64 = got.values().sum();
    ensure(total == 16, || format!("total {total}"))?;
    Ok(format!("{got:?} total={total}"))
}

fn random_reading(rng: &mut ChaCha8Rng, ts: u64) -> SensorReading {
    let room = rng.gen_range(1..=4);
    SensorReading {
        tag: TagCategory::ALL[rng.gen_range(0..3)],
        room: RoomId::new(room, 4).unwrap(),
        timestamp: ts,
        reader_id: 2 * room,
    }
}

fn keyed(result: &CycleResult, mode: CountMode) -> BTreeMap<String, u64> {
    match mode {
        CountMode::Visitor => result
            .visitor_aggregates
            .iter()
            .map(|(t, n)| (t.as_str().to_string(), *n))
            .collect(),
        CountMode::Room => result
            .room_aggregates
            .iter()
            .map(|(r, n)| (r.key(), *n))
            .collect(),
    }
}

fn c3_distribution_equivalence() -> Outcome {
    let cfg = CycleConfig::default();
    let mut through_leader = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(10..=2000u64);
        let clients = rng.gen_range(1..=8u32);
        let readings: Vec<SensorReading> = (0..n).map(|t| random_reading(&mut rng, t)).collect();
        let ids: Vec<NodeId> = (1..=clients).map(id).collect();
        for mode in [CountMode::Visitor, CountMode::Room] {
            let oracle = sequential_oracle(&readings, mode);
            let dist = run_distributed(&readings, &ids, mode).map_err(|e| e.to_string())?;
            ensure(dist.aggregates == oracle, || {
                format!("seed {seed} {mode}: {:?} vs {oracle:?}", dist.aggregates)
            })?;
        }
        if clients >= 2 {
            // The same stream as real submissions, split unevenly over the clients.
            let mut cuts: Vec<usize> = (1..clients)
                .map(|_| rng.gen_range(0..=readings.len()))
                .collect();
            cuts.push(0);
            cuts.push(readings.len());
            cuts.sort_unstable();
            let subs: Vec<Submission> = cuts
                .windows(2)
                .zip(&ids)
                .map(|(w, origin)| Submission {
                    origin: *origin,
                    from: 0,
                    to: (w[1] - w[0]) as u64,
                    pairs: sort_pairs(
                        readings[w[0]..w[1]]
                            .iter()
                            .map(|r| map_reading(r, CountMode::Visitor))
                            .collect(),
                    ),
                })
                .collect();
            let result = leader_cycle(0, &subs, &cfg, |s| reduce_locally(s).ok())
                .map_err(|e| e.to_string())?;
            for mode in [CountMode::Visitor, CountMode::Room] {
                let oracle = sequential_oracle(&readings, mode);
                let got = keyed(&result, mode);
                ensure(got == oracle, || {
                    format!("seed {seed} leader {mode}: {got:?} vs {oracle:?}")
                })?;
            }
            through_leader += 1;
        }
    }
    Ok(format!(
        "200 streams, {through_leader} also through the leader cycle"
    ))
}

fn c4_election_safety() -> Outcome {
    let mut with_override = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let nodes = rng.gen_range(3..=8u32);
        let override_leader = rng.gen_bool(0.3).then(|| id(rng.gen_range(1..=nodes)));
        let base = ScenarioConfig::default();
        let d = base.cycle.cycle_duration_ms;
        let kill_at = d + d / 2 + rng.gen_range(0..d / 2);
        let cfg = ScenarioConfig {
            node_count: nodes,
            cycles_to_run: 3,
            seed,
            override_leader,
            faults: vec![FaultSpec {
                at_ms: kill_at,
                kind: FaultKind::KillLeader,
            }],
            ..base
        };
        let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
        sim.run_until((kill_at + d) * 1000)
            .map_err(|e| e.to_string())?;
        let views = sim.views();
        let dead: Vec<NodeId> = views.iter().filter(|v| !v.alive).map(|v| v.id).collect();
        ensure(dead.len() == 1, || {
            format!("seed {seed}: dead nodes {dead:?}")
        })?;
        let survivors: Vec<NodeId> = views.iter().filter(|v| v.alive).map(|v| v.id).collect();
        let expected = match override_leader {
            Some(o) if survivors.contains(&o) => o,
            _ => *survivors.iter().max().unwrap(),
        };
        let leaders = sim.leaders();
        ensure(leaders == vec![expected], || {
            format!("seed {seed}: {nodes} nodes, override {override_leader:?}, killed {dead:?}, leaders {leaders:?}, expected {expected}")
        })?;
        let beliefs: Vec<Option<NodeId>> =
            views.iter().filter(|v| v.alive).map(|v| v.leader).collect();
        ensure(beliefs.iter().all(|b| *b == Some(expected)), || {
            format!("seed {seed}: beliefs {beliefs:?}")
        })?;
        with_override += usize::from(override_leader.is_some());
    }
    Ok(format!(
        "100 scenarios ({with_override} with override), checked one cycle after the kill"
    ))
}

fn c5_no_loss() -> Outcome {
    let mut total_committed = 0;
    let mut retried = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let loss = rng.gen_range(0.0..=0.3);
        let d = 2000;
        let kill_at = rng.gen_range(d..3 * d);
        let heal_at = 4 * d;
        // Restarting a running node is a no-op, so this revives whichever
        // node was leader at the kill.
        let mut faults = vec![
            FaultSpec {
                at_ms: 0,
                kind: FaultKind::SetLoss(loss),
            },
            FaultSpec {
                at_ms: kill_at,
                kind: FaultKind::KillLeader,
            },
            FaultSpec {
                at_ms: heal_at,
                kind: FaultKind::SetLoss(0.0),
            },
        ];
        faults.extend((1..=4).map(|n| FaultSpec {
            at_ms: heal_at,
            kind: FaultKind::RestartNode(id(n)),
        }));
        let cfg = ScenarioConfig {
            node_count: 4,
            cycles_to_run: 5,
            drain_cycles: 6,
            seed,
            readings_until_ms: Some(heal_at),
            traffic: Traffic::Visitors(VisitorModel {
                visitor_count: 60,
                ..Default::default()
            }),
            faults,
            ..Default::default()
        };
        let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
        let r = out.reconcile();
        ensure(r.exact && r.pending == 0 && r.undeliverable == 0, || {
            format!("seed {seed} loss {loss:.2}: {r:?}")
        })?;
        // Independent check: store totals against the generator's own ledger.
        let genuine: Vec<SensorReading> = out
            .ledger
            .genuine()
            .map(|l| SensorReading {
                tag: l.tag,
                room: l.room,
                timestamp: l.timestamp,
                reader_id: l.reader_id,
            })
            .collect();
        for mode in [CountMode::Visitor, CountMode::Room] {
            let want = sequential_oracle(&genuine, mode);
            let got = out.store.totals(mode);
            ensure(got == want, || {
                format!("seed {seed} {mode}: store {got:?}, ledger {want:?}")
            })?;
        }
        total_committed += r.committed;
        retried += out
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Aborted { .. }))
            .count();
    }
    Ok(format!(
        "50 seeds, {total_committed} readings committed once, {retried} aborted rounds retried"
    ))
}

fn c6_minimum_participation() -> Outcome {
    let lossy = ScenarioConfig {
        node_count: 2,
        cycles_to_run: 6,
        traffic: Traffic::Fixture("table1".into()),
        faults: vec![FaultSpec {
            at_ms: 0,
            kind: FaultKind::SetLoss(1.0),
        }],
        ..Default::default()
    };
    let lone = ScenarioConfig {
        node_count: 1,
        faults: vec![],
        ..lossy.clone()
    };
    let mut aborts = 0;
    for cfg in [lossy, lone] {
        let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
        ensure(out.store.committed_cycles().is_empty(), || {
            format!("{} nodes committed", cfg.node_count)
        })?;
        ensure(
            !out.events
                .iter()
                .any(|e| matches!(e.kind, EventKind::Committed { .. })),
            || "commit event".into(),
        )?;
        let cycle_aborts: Vec<u32> = out
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Aborted { .. }))
            .map(|e| e.cycle)
            .collect();
        ensure(!cycle_aborts.is_empty(), || {
            format!("{} nodes: no CYCLE_ABORT", cfg.node_count)
        })?;
        let reelect = out.events.iter().any(|e| {
            matches!(
                e.kind,
                EventKind::Phase {
                    to: NodePhase::Electing,
                    ..
                }
            ) && cycle_aborts.contains(&e.cycle)
        });
        ensure(reelect, || {
            format!("{} nodes: no re-election after abort", cfg.node_count)
        })?;
        aborts += cycle_aborts.len();
    }
    Ok(format!("{aborts} aborts, no commits"))
}

fn c7_wire_format() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..10_000 {
        let len = rng.gen_range(0..=200);
        let m = Message::new(
            MessageKind::ALL[rng.gen_range(0..MessageKind::ALL.len())],
            rng.gen(),
            rng.gen(),
            (0..len).map(|_| rng.gen::<u8>()).collect::<Vec<u8>>(),
        );
        let frame = encode_message(&m).map_err(|e| e.to_string())?;
        ensure(frame.len() == HEADER_LEN + len, || {
            format!("message {i}: frame length {}", frame.len())
        })?;
        let back = decode_message(&frame).map_err(|e| format!("message {i}: {e}"))?;
        ensure(back == m, || format!("message {i} changed in roundtrip"))?;
    }
    let hand: Vec<u8> = vec![
        1, // version
        4, // DATA_SUBMIT
        0x00, 0x00, 0x01, 0x02, // sender 258
        0x00, 0x00, 0x00, 0x09, // cycle 9
        0x00, 0x03, // payload length
        b'a', b'b', b'c',
    ];
    let m = Message::new(MessageKind::DataSubmit, 258, 9, b"abc".to_vec());
    ensure(
        encode_message(&m).map_err(|e| e.to_string())? == hand,
        || "encoded header differs".into(),
    )?;
    ensure(
        decode_message(&hand).map_err(|e| e.to_string())? == m,
        || "hand frame decodes differently".into(),
    )?;
    let mut bad = hand.clone();
    bad[0] = 2;
    ensure(decode_message(&bad).is_err(), || {
        "wrong version accepted".into()
    })?;
    ensure(decode_message(&hand[..HEADER_LEN + 2]).is_err(), || {
        "short payload accepted".into()
    })?;
    Ok("10000 roundtrips, header bytes match".into())
}

fn c8_determinism() -> Outcome {
    let cfg = ScenarioConfig {
        node_count: 5,
        cycles_to_run: 4,
        drain_cycles: 2,
        seed: 88,
        faults: vec![
            FaultSpec {
                at_ms: 0,
                kind: FaultKind::SetLoss(0.1),
            },
            FaultSpec {
                at_ms: 2900,
                kind: FaultKind::KillLeader,
            },
        ],
        ..Default::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in 0..2 {
        let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
        let d = dir.path().join(format!("run{run}"));
        emit_report(&out.report, &d).map_err(|e| e.to_string())?;
        let bytes: Vec<Vec<u8>> = ["metrics.csv", "summary.csv", "events.log"]
            .iter()
            .map(|f| std::fs::read(d.join(f)).unwrap())
            .collect();
        files.push((bytes, out.store.dump(), out.events.len()));
    }
    ensure(files[0].0 == files[1].0, || "report files differ".into())?;
    ensure(files[0].1 == files[1].1, || "store contents differ".into())?;
    Ok(format!(
        "{} events, reports and store byte-identical",
        files[0].2
    ))
}

fn c9_metrics_shape() -> Outcome {
    let rows =
        sweep_load(&ScenarioConfig::default(), &[0, 500, 1000, 1500]).map_err(|e| e.to_string())?;
    let csv = sweep_csv(&rows);
    ensure(
        csv.starts_with("requests,mean_response_ms,rtt_ms,ttfb_ms\n"),
        || "header".into(),
    )?;
    ensure(csv.lines().count() == 5, || "row count".into())?;
    for w in rows.windows(2) {
        ensure(
            w[1].mean_response_ms >= w[0].mean_response_ms * 0.95,
            || {
                format!(
                    "{} -> {} requests: {:.3} -> {:.3} ms",
                    w[0].requests, w[1].requests, w[0].mean_response_ms, w[1].mean_response_ms
                )
            },
        )?;
    }
    let means: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.1}", r.mean_response_ms))
        .collect();
    Ok(format!("mean response ms [{}]", means.join(", ")))
}

fn main() {
    let criteria: [Criterion; 9] = [
        (
            1,
            "table1 fixture visitor counts",
            Duration::from_secs(5),
            c1_visitor_counts,
        ),
        (
            2,
            "room counts match oracle",
            Duration::from_secs(5),
            c2_room_counts,
        ),
        (
            3,
            "distributed equals sequential",
            Duration::from_secs(60),
            c3_distribution_equivalence,
        ),
        (
            4,
            "election safety",
            Duration::from_secs(60),
            c4_election_safety,
        ),
        (
            5,
            "no loss under faults",
            Duration::from_secs(90),
            c5_no_loss,
        ),
        (
            6,
            "minimum participation",
            Duration::from_secs(10),
            c6_minimum_participation,
        ),
        (7, "wire format", Duration::from_secs(60), c7_wire_format),
        (8, "determinism", Duration::from_secs(60), c8_determinism),
        (
            9,
            "metrics shape",
            Duration::from_secs(120),
            c9_metrics_shape,
        ),
    ];
    let mut failed = 0;
    for (n, name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = check().and_then(|detail| {
            let took = start.elapsed();
            if took > budget {
                Err(format!(
                    "took {:.1}s, budget {}s",
                    took.as_secs_f64(),
                    budget.as_secs()
                ))
            } else {
                Ok(detail)
            }
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({secs:.2}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({secs:.2}s) {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
