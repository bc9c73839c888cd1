use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use flhub_core::registry::Registry;
use flhub_hub::{Hub, HubClient, HubConfig, HubError, KeyStore};
use flhub_sim::harness::{seeded_task, LocalPlan};
use flhub_sim::participant::{participate, ParticipantOptions};
use flhub_sim::report::{read_rows, render_summary, summarize, write_report, ClientRow, CurveRow};
use flhub_sim::{run_experiment, ExperimentConfig, SimError};

#[derive(Parser)]
#[command(
    name = "flhub",
    version,
    about = "Federated model hub and simulation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a hub server.
    Serve {
        /// TOML file with `listen`, `data_dir` and `key_file`.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an experiment config and write `<name>_curves.csv` and `<name>_clients.csv`.
    Run {
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Summarize a curves CSV: rounds to target and accuracies per arm.
    Report {
        curves: PathBuf,
        /// The matching clients CSV, for train accuracy.
        #[arg(long)]
        clients: Option<PathBuf>,
        #[arg(long, default_value_t = 0.85)]
        target: f64,
        #[arg(long, default_value_t = 10)]
        round: u32,
    },
    /// Act as one participant of an experiment against a running hub.
    Participate {
        /// Experiment config supplying the model name, task and training settings.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        hub: String,
        #[arg(long)]
        key: String,
        /// 1-based client index.
        #[arg(long)]
        client: usize,
        /// Defaults to the config's first seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to the config's round count.
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        log_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        poll_ms: u64,
        #[arg(long, default_value_t = 120)]
        timeout_s: u64,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Hub(HubError::Config(_)) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<HubError> for Failure {
    fn from(e: HubError) -> Self {
        SimError::from(e).into()
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Serve { config } => {
            let config = HubConfig::load(&config)?;
            let keys = KeyStore::load(&config.key_file)?;
            let registry = Registry::open(&config.data_dir).map_err(HubError::from)?;
            let hub = Hub::spawn_with(registry, keys, config.listen, true)?;
            println!("flhub listening on {}", hub.url());
            let _ = std::io::stdout().flush();
            hub.wait()?;
        }
        Command::Run { config, out } => {
            let config = ExperimentConfig::load(&config).map_err(SimError::from)?;
            let report = run_experiment(&config)?;
            let (curves, clients) = write_report(&report, &out)?;
            let curve_rows: Vec<CurveRow> =
                read_rows(std::fs::File::open(&curves).map_err(SimError::from)?)?;
            let client_rows: Vec<ClientRow> =
                read_rows(std::fs::File::open(&clients).map_err(SimError::from)?)?;
            let round = 10.min(config.rounds);
            let summary = summarize(
                &curve_rows,
                Some(&client_rows),
                config.target_accuracy,
                round,
            );
            print!(
                "{}",
                render_summary(&summary, config.target_accuracy, round)
            );
            println!("wrote {} and {}", curves.display(), clients.display());
        }
        Command::Report {
            curves,
            clients,
            target,
            round,
        } => {
            let open = |p: &PathBuf| {
                std::fs::File::open(p)
                    .map_err(|e| Failure::Usage(format!("cannot open {}: {e}", p.display())))
            };
            let curve_rows: Vec<CurveRow> = read_rows(open(&curves)?)?;
            let client_rows: Option<Vec<ClientRow>> = match &clients {
                Some(p) => Some(read_rows(open(p)?)?),
                None => None,
            };
            let summary = summarize(&curve_rows, client_rows.as_deref(), target, round);
            print!("{}", render_summary(&summary, target, round));
        }
        Command::Participate {
            config,
            hub,
            key,
            client,
            seed,
            rounds,
            log_dir,
            poll_ms,
            timeout_s,
        } => {
            let config = ExperimentConfig::load(&config).map_err(SimError::from)?;
            if client == 0 {
                return Err(Failure::Usage("--client is 1-based".into()));
            }
            let seed = seed.unwrap_or(config.seeds[0]);
            let opts = ParticipantOptions {
                model: config.model.clone(),
                task: seeded_task(&config.task, seed),
                plan: LocalPlan::from_config(&config),
                seed,
                client,
                rounds: rounds.unwrap_or(config.rounds),
                log_dir,
                poll: Duration::from_millis(poll_ms),
                timeout: Duration::from_secs(timeout_s),
            };
            participate(&HubClient::new(&hub, Some(&key)), &opts)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
