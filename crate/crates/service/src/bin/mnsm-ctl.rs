//! Controller stand-in: sends commands and watches the aggregate.

use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use mnsm_core::wire::{Body, ServiceKind};
use mnsm_service::registry::RegistryClient;
use mnsm_service::session::{self, Incoming};
use mnsm_service::cli;

#[derive(Parser)]
#[command(version, about = "Controller command-line client")]
struct Args {
    /// Registry `host:port`; falls back to MNSM_REGISTRY, then 127.0.0.1:7900.
    #[arg(long, global = true)]
    registry: Option<String>,
    #[arg(long, global = true, default_value = "manager")]
    manager: String,
    #[arg(long, global = true, default_value = "ctl")]
    name: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Send a command (START, RESET or any other) to the manager.
    Send {
        command: String,
        /// Deliver to this node only.
        #[arg(long)]
        target: Option<String>,
    },
    /// Print every aggregate the manager publishes, one per line.
    Watch {
        /// Stop after this many lines.
        #[arg(long)]
        count: Option<usize>,
    },
    /// List registered services.
    List {
        #[arg(long)]
        kind: Option<ServiceKind>,
    },
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let registry = RegistryClient::new(cli::registry_address(args.registry), args.name.clone());
    if let Cmd::List { kind } = args.cmd {
        for r in registry.list(kind).await? {
            println!("{}\t{}\t{}\tgen={}", r.name, r.kind, r.address, r.generation);
        }
        return Ok(());
    }
    let record = registry
        .lookup(&args.manager)
        .await?
        .with_context(|| format!("no service named {}", args.manager))?;
    let (outbox, mut inbox) = session::connect(record.address.as_str(), &args.name, Duration::from_secs(1)).await?;
    outbox.send(Body::Register {
        name: args.name.clone(),
        kind: ServiceKind::Controller,
        address: "host:0".into(),
    });
    match args.cmd {
        Cmd::Send { command, target } => {
            // The first report is the current aggregate; it confirms the session.
            session::next_message(&mut inbox).await.context("manager closed the session")?;
            outbox.send(Body::Command { name: command, target });
            drop(outbox);
            while let Some(item) = inbox.recv().await {
                if let Incoming::Closed(_) = item {
                    break;
                }
            }
        }
        Cmd::Watch { count } => {
            let mut seen = 0;
            while let Some(item) = inbox.recv().await {
                match item {
                    Incoming::Message(msg) => {
                        if let Body::StateReport { state, .. } = msg.body {
                            println!("{state}");
                            seen += 1;
                            if count.is_some_and(|c| seen >= c) {
                                return Ok(());
                            }
                        }
                    }
                    Incoming::Closed(reason) => bail!("manager session closed: {reason:?}"),
                }
            }
        }
        Cmd::List { .. } => unreachable!(),
    }
    Ok(())
}
