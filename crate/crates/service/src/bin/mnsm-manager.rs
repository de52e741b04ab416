//! The manager: aggregates daemon states and serves the operator API.

use std::net::SocketAddr;
use std::time::Duration;

use clap::Parser;
use mnsm_core::ManagerConfig;
use mnsm_service::cli;
use mnsm_service::manager::{self, ManagerOptions};

#[derive(Parser)]
#[command(version, about = "Multi-node state manager")]
struct Args {
    /// Registry `host:port`; falls back to MNSM_REGISTRY, then 127.0.0.1:7900.
    #[arg(long)]
    registry: Option<String>,
    /// Name registered for daemons and controllers to find.
    #[arg(long, default_value = "manager")]
    name: String,
    /// Address for daemon and controller sessions.
    #[arg(long, default_value = "0.0.0.0:0")]
    listen: SocketAddr,
    /// Host advertised in the registry.
    #[arg(long, default_value = "127.0.0.1")]
    advertise_host: String,
    #[arg(long, default_value_t = 1)]
    min: u32,
    #[arg(long, default_value_t = 64)]
    max: u32,
    #[arg(long, default_value_t = 0)]
    max_errors: u32,
    /// Bound on commands and transitions, e.g. `30s` or `500ms`.
    #[arg(long, default_value = "30s", value_parser = humantime::parse_duration)]
    timeout: Duration,
    #[arg(long, default_value_t = 7901)]
    operator_port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    operator_bind: String,
    #[arg(long, default_value_t = 1000)]
    heartbeat_ms: u64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    cli::init_tracing();
    let args = Args::parse();
    let operator: SocketAddr = format!("{}:{}", args.operator_bind, args.operator_port).parse()?;
    let running = manager::start(ManagerOptions {
        name: args.name,
        registry: cli::registry_address(args.registry),
        config: ManagerConfig {
            min_nodes: args.min,
            max_nodes: args.max,
            max_errors: args.max_errors,
            timeout_ms: args.timeout.as_millis() as u64,
        },
        listen: args.listen,
        advertise_host: args.advertise_host,
        operator,
        heartbeat: Duration::from_millis(args.heartbeat_ms),
        log_timeout: Duration::from_secs(5),
    })
    .await?;
    println!("manager peers={} operator={}", running.peers, running.operator);
    running.wait().await;
    Ok(())
}
