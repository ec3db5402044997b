use std::fs::File;
use std::io::{self, BufReader, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use advloop_core::anonymize::Pseudonymizer;
use advloop_core::api::{self, AppState};
use advloop_core::config::ServiceConfig;
use advloop_core::export::{export_round, import_round, ExportMode};
use advloop_core::metrics::{dataset_stats, DatasetStats};
use advloop_core::storage::Store;
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advloop", version, about = "Adversarial data collection service")]
struct Cli {
    /// TOML config file; ADVLOOP_* variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API (reference models are mounted under /models).
    Serve,
    /// Write one round as JSON lines to stdout.
    Export {
        #[arg(long)]
        task: String,
        /// Round index within the task, starting at 1.
        #[arg(long)]
        round: u32,
        /// Keep raw annotator ids and rejected examples. Internal use only.
        #[arg(long)]
        raw: bool,
        /// Pseudonym salt; falls back to the configured one.
        #[arg(long)]
        salt: Option<String>,
    },
    /// Load an exported round file as a new closed round.
    Import { file: PathBuf },
    /// Print the dataset statistics row for a task.
    Stats {
        #[arg(long)]
        task: String,
    },
}

fn open_store(config: &ServiceConfig) -> Result<Store> {
    let path = config
        .storage_path
        .as_ref()
        .ok_or_else(|| anyhow!("no storage_path configured (set it in the config file or ADVLOOP_STORAGE_PATH)"))?;
    Store::open(path).with_context(|| format!("opening store at {}", path.display()))
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let config = ServiceConfig::load(cli.config.as_deref())?;

    match cli.command {
        Command::Serve => {
            let addr: SocketAddr = format!("{}:{}", config.bind, config.port)
                .parse()
                .with_context(|| format!("bad bind address {}:{}", config.bind, config.port))?;
            let state = Arc::new(AppState::from_config(config)?);
            api::serve(state, addr, |bound| eprintln!("listening on http://{bound}")).await?;
        }
        Command::Export { task, round, raw, salt } => {
            let store = open_store(&config)?;
            let task = store
                .task_by_name(&task)
                .ok_or_else(|| anyhow!("no task named {task:?}"))?;
            let round = store
                .rounds_for_task(task.task_id)
                .into_iter()
                .find(|r| r.index == round)
                .ok_or_else(|| anyhow!("task {:?} has no round {round}", task.name))?;
            let mode = if raw {
                ExportMode::Raw
            } else {
                let salt = salt
                    .or(config.salt)
                    .ok_or_else(|| anyhow!("anonymized export needs a salt (--salt or ADVLOOP_SALT)"))?;
                ExportMode::Anonymized(Pseudonymizer::new(salt.into_bytes()))
            };
            let stdout = io::stdout();
            let mut out = stdout.lock();
            let n = export_round(&store, round.round_id, &mode, &mut out)?;
            out.flush()?;
            eprintln!("exported {n} examples");
        }
        Command::Import { file } => {
            let store = open_store(&config)?;
            let reader = BufReader::new(File::open(&file).with_context(|| format!("reading {}", file.display()))?);
            let summary = import_round(&store, reader, chrono::Utc::now())?;
            eprintln!(
                "imported {} examples as round {} ({})",
                summary.example_ids.len(),
                summary.round.index,
                summary.round.round_id
            );
        }
        Command::Stats { task } => {
            let store = open_store(&config)?;
            let Some(task) = store.task_by_name(&task) else {
                bail!("no task named {task:?}");
            };
            let stats = dataset_stats(&store, task.task_id)?;
            println!("{}", DatasetStats::header());
            println!("{}", stats.row());
        }
    }
    Ok(())
}
