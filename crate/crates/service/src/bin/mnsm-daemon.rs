//! Per-node daemon driving one managed process through a state machine.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use mnsm_core::MachineSpec;
use mnsm_service::cli;
use mnsm_service::daemon::{self, DaemonConfig};

#[derive(Parser)]
#[command(version, about = "Node daemon: runs a state machine spec around one child process")]
struct Args {
    /// State machine spec file.
    #[arg(long)]
    spec: PathBuf,
    /// Node name; defaults to the host name.
    #[arg(long)]
    name: Option<String>,
    /// Registry name of the manager.
    #[arg(long, default_value = "manager")]
    manager: String,
    #[arg(long, default_value = ".")]
    log_dir: PathBuf,
    /// Child command line (run with `sh -c`).
    #[arg(long)]
    exec: String,
    /// Registry `host:port`; falls back to MNSM_REGISTRY, then 127.0.0.1:7900.
    #[arg(long)]
    registry: Option<String>,
    #[arg(long, default_value_t = 1000)]
    heartbeat_ms: u64,
    /// Wait between SIGTERM and SIGKILL when killing the child.
    #[arg(long, default_value_t = 5000)]
    kill_grace_ms: u64,
}

fn host_name() -> String {
    let mut buf = [0u8; 256];
    // SAFETY: the buffer is valid for its whole length.
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
    let end = buf.iter().position(|b| *b == 0).unwrap_or(buf.len());
    if rc == 0 && end > 0 {
        String::from_utf8_lossy(&buf[..end]).into_owned()
    } else {
        "node".into()
    }
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    cli::init_tracing();
    let args = Args::parse();
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let spec = MachineSpec::parse(&text).with_context(|| format!("parsing {}", args.spec.display()))?;
    daemon::run(DaemonConfig {
        spec: Arc::new(spec),
        name: args.name.unwrap_or_else(host_name),
        manager: args.manager,
        log_dir: args.log_dir,
        exec: args.exec,
        registry: cli::registry_address(args.registry),
        heartbeat: Duration::from_millis(args.heartbeat_ms),
        kill_grace: Duration::from_millis(args.kill_grace_ms),
    })
    .await
}
