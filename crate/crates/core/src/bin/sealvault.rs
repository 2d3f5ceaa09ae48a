use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sealvault::adversary::{canned_scenario, AttackScenario, ScenarioId};
use sealvault::harness::{read_arg_file, Harness, HarnessError};
use sealvault::sim::WorldConfig;

/// Simulated write protection for a self-encrypting drive, driven by a
/// measured updater session.
#[derive(Parser)]
#[command(name = "sealvault", version)]
struct Cli {
    /// Directory holding the simulator state.
    #[arg(long, global = true, default_value = "sealvault-state")]
    state: PathBuf,
    /// Seed for a newly created machine.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Move the simulated clock to this time (seconds) before the command.
    #[arg(long, global = true)]
    now: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create the machine, copy FILES onto the original partition and take
    /// ownership of the drive.
    Provision {
        /// key=value policy file; `-` reads stdin.
        #[arg(long)]
        policy: PathBuf,
        files: Vec<PathBuf>,
        #[arg(long, default_value_t = WorldConfig::default().original_clusters)]
        original_clusters: u32,
        #[arg(long, default_value_t = WorldConfig::default().protected_clusters)]
        protected_clusters: u32,
        #[arg(long, default_value_t = WorldConfig::default().cluster_size)]
        cluster_size: u32,
        #[arg(long, default_value_t = WorldConfig::default().dir_slots)]
        dir_slots: u32,
        /// Seconds a session suspends the host (2 to 4).
        #[arg(long, default_value_t = WorldConfig::default().transition_cost)]
        transition_cost: u64,
    },
    /// Run one commit session now.
    Commit {
        /// Advance the clock by this many seconds first.
        #[arg(long)]
        advance: Option<u64>,
        /// Do not attach a signed time; aging deletions are then skipped.
        #[arg(long)]
        no_token: bool,
    },
    /// Interactive deletion browser; keys are read from stdin.
    BrowseDelete,
    /// Run an attack scenario; exits 0 iff the outcome matches.
    Attack {
        /// Scenario JSON file.
        #[arg(required_unless_present = "canned")]
        scenario: Option<PathBuf>,
        /// Use a built-in scenario instead of a file.
        #[arg(long, value_parser = parse_scenario_id, conflicts_with = "scenario")]
        canned: Option<ScenarioId>,
    },
    /// Export the protected partition, history included, without any
    /// credential.
    Recover { out_dir: PathBuf },
    /// Print the latest report from the transcript.
    Report {
        #[arg(long)]
        all: bool,
    },
    /// Advance the clock; scheduled commits fire on the way.
    AdvanceTime { secs: u64 },
    /// Replay a host workload file (`-` reads stdin).
    RunWorkload { file: PathBuf },
}

fn parse_scenario_id(s: &str) -> Result<ScenarioId, String> {
    ScenarioId::ALL
        .into_iter()
        .find(|id| id.as_str() == s)
        .ok_or_else(|| format!("unknown scenario `{s}`"))
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), HarnessError> {
    let h = Harness::new(cli.state, cli.seed, cli.now);
    match cli.cmd {
        Cmd::Provision {
            policy,
            files,
            original_clusters,
            protected_clusters,
            cluster_size,
            dir_slots,
            transition_cost,
        } => {
            let text = read_arg_file(&policy).map_err(|e| HarnessError::Usage(format!("{}: {e}", policy.display())))?;
            let config = WorldConfig {
                original_clusters,
                protected_clusters,
                cluster_size,
                dir_slots,
                transition_cost,
            };
            h.provision(&files, &text, config, out)
        }
        Cmd::Commit { advance, no_token } => h.commit(advance, no_token, out),
        Cmd::BrowseDelete => h.browse_delete(&mut io::stdin().lock(), out),
        Cmd::Attack { scenario, canned } => {
            let scenario: AttackScenario = match (scenario, canned) {
                (_, Some(id)) => canned_scenario(id),
                (Some(path), None) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
                    serde_json::from_str(&text)
                        .map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            h.attack(&scenario, out)
        }
        Cmd::Recover { out_dir } => h.recover(&out_dir, out).map(drop),
        Cmd::Report { all } => h.report(all, out),
        Cmd::AdvanceTime { secs } => h.advance_time(secs, out),
        Cmd::RunWorkload { file } => {
            let text = read_arg_file(&file).map_err(|e| HarnessError::Usage(format!("{}: {e}", file.display())))?;
            let base = file.parent().map(PathBuf::from).unwrap_or_default();
            h.run_workload(&text, &base, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("sealvault: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
