use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use fogrep::client::GuaranteeMode;
use fogrep::harness::{emit_csv, run_forum, run_scenario, ForumConfig, Script};
use fogrep::naming::Naming;
use fogrep::node::Node;
use fogrep::storage::{DiskStore, MemoryStore, StorageAdapter};
use fogrep::transport::{NamingServer, NodeServer, SimNetConfig, TriggerSinkServer};
use fogrep::NodeId;

#[derive(Parser)]
#[command(name = "fogrep", version, about = "Keygroup replication with client-side session guarantees")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the forum workload in the simulator and write a CSV row per client count.
    Forum(ForumArgs),
    /// Run a scenario script in the simulator.
    Scenario {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve one replica node over TCP.
    Node {
        #[arg(long, env = "FOGREP_NODE_ID")]
        id: String,
        #[arg(long, env = "FOGREP_NAMING_ADDR")]
        naming: String,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        /// `memory` or `disk:<path>`.
        #[arg(long, default_value = "memory")]
        storage: String,
    },
    /// Serve the naming registry over TCP.
    Naming {
        #[arg(long, default_value = "127.0.0.1:7000")]
        listen: String,
        /// Update log replayed at startup.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Accept trigger events over TCP and log them.
    TriggerSink {
        #[arg(long, default_value = "127.0.0.1:7100")]
        listen: String,
    },
}

#[derive(Args)]
struct ForumArgs {
    /// Client counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    clients: Vec<usize>,
    /// Posts per client.
    #[arg(long, default_value_t = 200)]
    ops: usize,
    #[arg(long, conflicts_with = "direct")]
    library: bool,
    #[arg(long)]
    direct: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    rtt_ms: Option<u64>,
    /// SimNetConfig JSON.
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
}

fn forum(args: ForumArgs) -> anyhow::Result<()> {
    anyhow::ensure!(args.library || args.direct, "pass --library or --direct");
    let mode = if args.direct { GuaranteeMode::Direct } else { GuaranteeMode::Guarded };
    let mut net = match &args.net {
        Some(p) => SimNetConfig::load(p)?,
        None => SimNetConfig::default(),
    };
    if let Some(rtt) = args.rtt_ms {
        net.default_rtt_ms = rtt;
    }
    let mut reports = Vec::new();
    for &clients in &args.clients {
        let cfg = ForumConfig {
            clients,
            ops: args.ops,
            mode,
            seed: args.seed,
            net: net.clone(),
            ..ForumConfig::default()
        };
        let r = run_forum(&cfg)?;
        eprintln!(
            "clients={} mode={} mrc={:.4} rywc={:.4} reads={} lost={} converged={} virtual_ms={}",
            r.clients,
            r.mode,
            r.mrc_violation_rate,
            r.rywc_violation_rate,
            r.reads_ok,
            r.lost_posts,
            r.converged,
            r.virtual_ms
        );
        reports.push(r);
    }
    std::fs::write(&args.out, emit_csv(&reports)).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Forum(args) => forum(args),
        Cmd::Scenario { script, seed } => {
            let s = Script::load(&script)?;
            let log = run_scenario(&s, seed)?;
            for line in &log.lines {
                println!("{line}");
            }
            println!("ok {} ({} ms virtual)", s.name, log.virtual_ms);
            Ok(())
        }
        Cmd::Node { id, naming, listen, storage } => {
            let id = NodeId::new(id)?;
            let store: Box<dyn StorageAdapter> = match storage.as_str() {
                "memory" => Box::new(MemoryStore::new()),
                other => match other.strip_prefix("disk:") {
                    Some(dir) => Box::new(DiskStore::open(dir)?),
                    None => anyhow::bail!("storage must be memory or disk:<path>, got {other}"),
                },
            };
            let server = NodeServer::start(Node::new(id, store), &listen, &naming)?;
            println!("listening on {}", server.addr());
            server.join();
            Ok(())
        }
        Cmd::Naming { listen, log } => {
            let naming = match log {
                Some(p) => Naming::open(p)?,
                None => Naming::new(),
            };
            let server = NamingServer::start(Arc::new(naming), &listen)?;
            println!("listening on {}", server.addr());
            server.join();
            Ok(())
        }
        Cmd::TriggerSink { listen } => {
            let sink = TriggerSinkServer::start(&listen)?;
            println!("listening on {}", sink.handle.addr());
            sink.handle.join();
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
