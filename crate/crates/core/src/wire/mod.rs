//! Name service and session messaging.
//!
//! Frames are single-line JSON objects with a mandatory `type` field. The
//! registry table and the heartbeat logic are pure; the TCP transport lives
//! in the service crate.

mod liveness;
mod message;
mod registry;

pub use liveness::{Liveness, LivenessVerdict, DEFAULT_GRACE};
pub use message::{Body, WireError, WireMessage};
pub use registry::{valid_service_name, Registry, RegistryError, ServiceKind, ServiceRecord};

/// Default registry TCP port.
pub const DEFAULT_REGISTRY_PORT: u16 = 7900;
/// Environment variable overriding `host:port` of the registry.
pub const REGISTRY_ENV: &str = "MNSM_REGISTRY";
