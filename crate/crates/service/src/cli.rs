//! Bits shared by the binaries.

use mnsm_core::wire::{DEFAULT_REGISTRY_PORT, REGISTRY_ENV};

/// Registry address: the flag, else the environment, else the local default.
pub fn registry_address(flag: Option<String>) -> String {
    flag.or_else(|| std::env::var(REGISTRY_ENV).ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| format!("127.0.0.1:{DEFAULT_REGISTRY_PORT}"))
}

/// Logs to stderr, filtered by `RUST_LOG` (default `info`).
pub fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}
