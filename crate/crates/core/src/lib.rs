//! Core of the multi-node state manager.
//!
//! * [`machine`] parses and runs the daemons' configurable state machines.
//! * [`aggregator`] is the manager's pure event-to-effects core.
//! * [`wire`] holds the message codec, the registry table and heartbeat logic.
//! * [`sim`] drives the core under virtual time and checks it against an
//!   independent oracle.

pub mod aggregator;
pub mod config;
pub mod machine;
pub mod sim;
pub mod wire;

pub use aggregator::{Effect, Manager, ManagerEvent};
pub use config::ManagerConfig;
pub use machine::{MachineInstance, MachineSpec, StateClass, Trigger, READY};
