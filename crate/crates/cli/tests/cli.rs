use std::process::Command;

fn crowdmr() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_crowdmr"));
    c.env_remove("CROWDMR_SEED").env_remove("CROWDMR_BACKEND");
    c
}

fn stdout(c: &mut Command) -> String {
    let out = c.output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn fixtures_list_and_replay() {
    assert_eq!(
        stdout(crowdmr().args(["fixtures", "list"])),
        "empty\ntable1\n"
    );
    let replay = stdout(crowdmr().args(["fixtures", "replay", "table1"]));
    assert!(
        replay.contains(r#"visitor: {"man": 10, "other": 12, "woman": 21}"#),
        "{replay}"
    );
}

#[test]
fn run_writes_three_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(
        crowdmr()
            .args(["run", "--nodes", "3", "--cycles", "2", "--out"])
            .arg(dir.path()),
    );
    assert!(out.contains("exact=true"), "{out}");
    for f in ["metrics.csv", "summary.csv", "events.log"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("metric,count,mean_ms,p50_ms,p95_ms,p99_ms\n"));
}

/// Runs with a scenario file that sets seed=5 and returns events.log.
fn events_with(file_seed: u64, env_seed: Option<&str>, flag_seed: Option<&str>) -> String {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.txt");
    std::fs::write(
        &scenario,
        format!("nodes=3\ncycles=1\nseed={file_seed}\nloss=0.2\n"),
    )
    .unwrap();
    let mut c = crowdmr();
    c.arg("--scenario")
        .arg(&scenario)
        .arg("--out")
        .arg(dir.path());
    if let Some(s) = env_seed {
        c.env("CROWDMR_SEED", s);
    }
    if let Some(s) = flag_seed {
        c.args(["--seed", s]);
    }
    stdout(c.arg("run"));
    std::fs::read_to_string(dir.path().join("events.log")).unwrap()
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let file5 = events_with(5, None, None);
    let file9 = events_with(9, None, None);
    assert_ne!(file5, file9);
    assert_eq!(events_with(5, Some("9"), None), file9);
    assert_eq!(events_with(9, Some("9"), Some("5")), file5);
}

#[test]
fn env_backend_is_validated() {
    let out = crowdmr()
        .args(["run"])
        .env("CROWDMR_BACKEND", "carrier-pigeon")
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn sweep_emits_the_load_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(
        crowdmr()
            .args(["sweep", "--requests", "0,50", "--visitors", "20", "--out"])
            .arg(dir.path()),
    );
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(
        csv.starts_with("requests,mean_response_ms,rtt_ms,ttfb_ms\n0,"),
        "{csv}"
    );
    assert_eq!(csv.lines().count(), 3);
    assert!(out.contains("visitors,readings,mapreduce_ms,cycle_ms"));
}

#[test]
fn election_demo_prints_succession() {
    let out = stdout(crowdmr().args(["election-demo", "--nodes", "4"]));
    let leaders: Vec<&str> = out
        .lines()
        .map(|l| l.rsplit("leader=").next().unwrap())
        .collect();
    assert_eq!(leaders, ["[4]", "[4]", "[3]", "[2]"]);
}
