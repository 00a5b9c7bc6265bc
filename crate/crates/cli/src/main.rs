use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use crowdmr::domain::{CountMode, ModeSet};
use crowdmr::harness::{
    cycle_time_csv, cycle_time_sweep, emit_report, run_scenario, sweep_csv, sweep_load, FaultKind,
    FaultSpec, ScenarioConfig, Simulation, Traffic, REQUEST_DEFINITION,
};
use crowdmr::mapreduce::sequential_oracle;
use crowdmr::simgen::{fixture_stream, list_fixtures, replay_fixture};
use crowdmr::transport::Backend;

#[derive(Parser)]
#[command(name = "crowdmr", version)]
#[command(about = "Crowd-monitoring MapReduce cluster runner")]
struct Cli {
    /// Scenario file (key=value lines)
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,

    /// Master seed
    #[arg(long, global = true, env = "CROWDMR_SEED")]
    seed: Option<u64>,

    /// Network backend: sim or udp
    #[arg(long, global = true, env = "CROWDMR_BACKEND")]
    backend: Option<Backend>,

    /// Output directory for reports
    #[arg(long, global = true, default_value = "crowdmr-out")]
    out: PathBuf,

    /// Cycles to run
    #[arg(long, global = true)]
    cycles: Option<u32>,

    /// Node count
    #[arg(long, global = true)]
    nodes: Option<u32>,

    /// Result modes to commit: visitor, room or both
    #[arg(long, global = true)]
    mode: Option<ModeSet>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics.csv, summary.csv and events.log
    Run,
    /// Load sweep and per-cycle execution time sweep
    Sweep {
        /// Request counts, ascending
        #[arg(long, value_delimiter = ',', default_value = "0,500,1000,1500")]
        requests: Vec<u64>,
        /// Visitor counts for the cycle-time table
        #[arg(long, value_delimiter = ',', default_value = "50,100,300,500,1000")]
        visitors: Vec<u32>,
    },
    /// Bundled reading fixtures
    Fixtures {
        #[command(subcommand)]
        action: FixtureAction,
    },
    /// Kill the leader once per cycle and print who takes over
    ElectionDemo,
}

#[derive(Subcommand)]
enum FixtureAction {
    List,
    /// Print a fixture's readings and its sequential counts
    Replay {
        name: String,
    },
}

impl Cli {
    /// File settings, then flags and environment on top. Clap already
    /// prefers a flag over its environment variable.
    fn scenario(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.scenario {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                ScenarioConfig::parse(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => ScenarioConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(backend) = self.backend {
            cfg.net.mode = backend;
        }
        if let Some(cycles) = self.cycles {
            cfg.cycles_to_run = cycles;
        }
        if let Some(nodes) = self.nodes {
            cfg.node_count = nodes;
        }
        if let Some(mode) = self.mode {
            cfg.modes = mode;
        }
        Ok(cfg)
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.scenario()?;
    let out = run_scenario(&cfg)?;
    for path in emit_report(&out.report, &cli.out)? {
        println!("wrote {}", path.display());
    }
    println!("{REQUEST_DEFINITION}; requests={}", out.report.requests);
    println!("committed cycles: {:?}", out.store.committed_cycles());
    for mode in [CountMode::Visitor, CountMode::Room] {
        if cfg.modes.contains(mode) {
            println!("{mode}: {:?}", out.store.totals(mode));
        }
    }
    let r = out.reconcile();
    println!(
        "generated={} duplicates_dropped={} committed={} pending={} undeliverable={} exact={}",
        r.generated, r.duplicates_dropped, r.committed, r.pending, r.undeliverable, r.exact
    );
    if !r.exact {
        bail!("ledger and store disagree");
    }
    Ok(())
}

fn sweep(cli: &Cli, requests: &[u64], visitors: &[u32]) -> Result<()> {
    let cfg = cli.scenario()?;
    std::fs::create_dir_all(&cli.out)?;
    let load = sweep_csv(&sweep_load(&cfg, requests)?);
    write(&cli.out.join("sweep.csv"), &load)?;
    print!("{load}");
    let cycle = cycle_time_csv(&cycle_time_sweep(&cfg, visitors)?);
    write(&cli.out.join("cycle_time.csv"), &cycle)?;
    print!("{cycle}");
    Ok(())
}

fn fixtures(action: &FixtureAction) -> Result<()> {
    match action {
        FixtureAction::List => {
            for name in list_fixtures() {
                println!("{name}");
            }
        }
        FixtureAction::Replay { name } => {
            let readings = replay_fixture(name)?;
            println!("{}", fixture_stream(&readings));
            for mode in [CountMode::Visitor, CountMode::Room] {
                println!("{mode}: {:?}", sequential_oracle(&readings, mode));
            }
        }
    }
    Ok(())
}

fn election_demo(cli: &Cli) -> Result<()> {
    let mut cfg = cli.scenario()?;
    if cli.nodes.is_none() && cli.scenario.is_none() {
        cfg.node_count = 5;
    }
    if cfg.net.mode == Backend::Udp {
        bail!("election-demo runs on the simulated backend only");
    }
    let d = cfg.cycle.cycle_duration_ms;
    let kills = cfg.node_count.saturating_sub(1);
    cfg.cycles_to_run = kills + 1;
    cfg.faults = (1..=kills)
        .map(|k| FaultSpec {
            at_ms: u64::from(k) * d + d / 2,
            kind: FaultKind::KillLeader,
        })
        .collect();
    cfg.traffic = Traffic::Load(0);
    let mut sim = Simulation::new(cfg)?;
    for k in 0..=kills {
        let probe_ms = u64::from(k) * d + d / 2 - 1;
        sim.run_until(probe_ms * 1000)?;
        let live: Vec<String> = sim
            .views()
            .iter()
            .filter(|v| v.alive)
            .map(|v| v.id.to_string())
            .collect();
        let leaders: Vec<String> = sim.leaders().iter().map(|id| id.to_string()).collect();
        println!(
            "t={probe_ms}ms live=[{}] leader=[{}]",
            live.join(","),
            leaders.join(",")
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run => run(&cli),
        Command::Sweep { requests, visitors } => sweep(&cli, requests, visitors),
        Command::Fixtures { action } => fixtures(action),
        Command::ElectionDemo => election_demo(&cli),
    }
}
