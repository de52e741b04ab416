//! Name registry. Services register by name; clients look them up.

use std::time::Duration;

use clap::Parser;
use mnsm_core::wire::DEFAULT_REGISTRY_PORT;
use mnsm_service::{cli, registry};
use tokio::net::TcpListener;

#[derive(Parser)]
#[command(version, about = "Name registry for managers, daemons and controllers")]
struct Args {
    /// TCP port to listen on (0 picks a free one).
    #[arg(long, default_value_t = DEFAULT_REGISTRY_PORT)]
    port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    bind: String,
    /// Heartbeat interval; a peer silent for three intervals is dropped.
    #[arg(long, default_value_t = 1000)]
    heartbeat_ms: u64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    cli::init_tracing();
    let args = Args::parse();
    let listener = TcpListener::bind((args.bind.as_str(), args.port)).await?;
    let addr = listener.local_addr()?;
    println!("registry listening on {addr}");
    registry::serve(listener, Duration::from_millis(args.heartbeat_ms)).await;
    Ok(())
}
