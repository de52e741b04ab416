//! Networked services around the core: registry, node daemon and manager.

pub mod cli;
pub mod daemon;
pub mod manager;
pub mod registry;
pub mod session;
