//! Deterministic simulation of the manager.
//!
//! [`Stimulus`] is the abstract input vocabulary shared by the core driver
//! ([`CoreDriver`]) and the [`Oracle`]. Scenarios add virtual time and
//! scripted nodes on top ([`scenario`]); [`enumerate`] checks every
//! interleaving of small per-node scripts against the oracle.

use serde::{Deserialize, Serialize};

use crate::aggregator::{Effect, Manager, ManagerEvent, OperatorAction};
use crate::config::ManagerConfig;
use crate::machine::StateClass;

pub mod enumerate;
mod oracle;
pub mod scenario;
pub mod trace;

pub use enumerate::{
    enumerate, interleaving_count, EnumerationError, EnumerationReport, EnumerationScript, Lane,
};
pub use oracle::Oracle;
pub use scenario::{run_scenario, ScenarioError, ScenarioScript};
pub use trace::{replay, ReplayMismatch, Trace, TraceRecord};

/// Input to the manager with timers abstracted to "the timeout elapsed now".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stimulus", rename_all = "snake_case")]
pub enum Stimulus {
    Connect { node: String },
    Disconnect { node: String },
    Report { node: String, state: String, class: StateClass },
    Command { name: String },
    Operator { action: OperatorAction, node: String },
    Timeout,
    Config { config: ManagerConfig },
}

impl Stimulus {
    pub fn connect(node: &str) -> Self {
        Stimulus::Connect { node: node.into() }
    }

    pub fn disconnect(node: &str) -> Self {
        Stimulus::Disconnect { node: node.into() }
    }

    pub fn major(node: &str, state: &str) -> Self {
        Stimulus::Report {
            node: node.into(),
            state: state.into(),
            class: StateClass::Major,
        }
    }

    pub fn error(node: &str, state: &str) -> Self {
        Stimulus::Report {
            node: node.into(),
            state: state.into(),
            class: StateClass::Error,
        }
    }

    pub fn command(name: &str) -> Self {
        Stimulus::Command { name: name.into() }
    }
}

/// Feeds stimuli to a [`Manager`], recording everything it emits.
pub struct CoreDriver {
    manager: Manager,
    events: Vec<(ManagerEvent, Vec<Effect>)>,
}

impl CoreDriver {
    pub fn new(config: ManagerConfig) -> Self {
        CoreDriver {
            manager: Manager::new(config),
            events: Vec::new(),
        }
    }

    pub fn manager(&self) -> &Manager {
        &self.manager
    }

    /// Translates and ingests. A timeout with no armed timer is dropped.
    pub fn apply(&mut self, stimulus: &Stimulus) -> Option<&[Effect]> {
        let event = match stimulus {
            Stimulus::Connect { node } => ManagerEvent::NodeConnected { node: node.clone() },
            Stimulus::Disconnect { node } => ManagerEvent::NodeDisconnected { node: node.clone() },
            Stimulus::Report { node, state, class } => ManagerEvent::report(node, state, *class),
            Stimulus::Command { name } => ManagerEvent::command(name),
            Stimulus::Operator { action, node } => ManagerEvent::OperatorAction {
                action: *action,
                node: node.clone(),
            },
            Stimulus::Timeout => {
                let timer = self.manager.timer()?;
                ManagerEvent::TimerFired {
                    kind: timer.kind,
                    generation: timer.generation,
                }
            }
            Stimulus::Config { config } => ManagerEvent::ConfigChange { config: *config },
        };
        let effects = self.manager.ingest(event.clone());
        self.events.push((event, effects));
        self.events.last().map(|(_, fx)| fx.as_slice())
    }

    pub fn events(&self) -> &[(ManagerEvent, Vec<Effect>)] {
        &self.events
    }

    pub fn published(&self) -> Vec<String> {
        self.events
            .iter()
            .flat_map(|(_, fx)| crate::aggregator::published(fx))
            .collect()
    }
}
