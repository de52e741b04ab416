//! The manager's aggregation core.
//!
//! [`Manager::ingest`] consumes one [`ManagerEvent`] and returns the ordered
//! list of [`Effect`]s the surrounding service must carry out. There is no
//! I/O and no clock in here; timers are requested with [`Effect::SetTimer`]
//! and come back as [`ManagerEvent::TimerFired`] carrying the generation they
//! were armed with, so a firing that raced a cancel is recognised and dropped.
//!
//! The core knows exactly two state names of its own, `READY` and `ERROR`.
//! Every other aggregate it publishes was first reported by the daemons.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::ManagerConfig;
use crate::machine::{StateClass, READY};

pub const ERROR: &str = "ERROR";
pub const START: &str = "START";
pub const RESET: &str = "RESET";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimerKind {
    Transition,
    Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorAction {
    Kill,
    Restart,
    ClearUnavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ManagerEvent {
    NodeConnected {
        node: String,
    },
    NodeDisconnected {
        node: String,
    },
    Report {
        node: String,
        state: String,
        class: StateClass,
        color: String,
        #[serde(default)]
        detail: String,
    },
    ControllerCommand {
        name: String,
    },
    OperatorAction {
        action: OperatorAction,
        node: String,
    },
    TimerFired {
        kind: TimerKind,
        generation: u64,
    },
    ConfigChange {
        config: ManagerConfig,
    },
}

impl ManagerEvent {
    pub fn report(node: &str, state: &str, class: StateClass) -> Self {
        ManagerEvent::Report {
            node: node.into(),
            state: state.into(),
            class,
            color: String::new(),
            detail: String::new(),
        }
    }

    pub fn major(node: &str, state: &str) -> Self {
        Self::report(node, state, StateClass::Major)
    }

    pub fn command(name: &str) -> Self {
        ManagerEvent::ControllerCommand { name: name.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Connected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    SendToNode {
        node: String,
        command: String,
    },
    SendToAll {
        selector: Selector,
        command: String,
    },
    SetTimer {
        kind: TimerKind,
        generation: u64,
        after_ms: u64,
    },
    CancelTimer {
        kind: TimerKind,
        generation: u64,
    },
    PublishAggregate {
        state: String,
    },
    Display {
        update: DisplayUpdate,
    },
    Log {
        line: String,
    },
}

/// One element of the operator display; snapshots are lists of these.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisplayUpdate {
    Node(NodeView),
    Manager(ManagerView),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeView {
    pub node: String,
    pub state: Option<String>,
    pub class: Option<StateClass>,
    pub color: Option<String>,
    pub detail: String,
    pub connected: bool,
    pub active: bool,
    pub available: bool,
    pub dead: bool,
    pub unavailable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerView {
    pub aggregate: String,
    pub phase: String,
    pub last_action: String,
    pub error_count: u32,
    pub config: ManagerConfig,
    pub pending_config: Option<ManagerConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub manager: ManagerView,
    pub nodes: Vec<NodeView>,
}

impl Snapshot {
    /// Snapshot as the list of display records a fresh console starts from.
    pub fn into_updates(self) -> Vec<DisplayUpdate> {
        let mut out: Vec<DisplayUpdate> = self.nodes.into_iter().map(DisplayUpdate::Node).collect();
        out.push(DisplayUpdate::Manager(self.manager));
        out
    }
}

/// What the manager remembers about one daemon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub name: String,
    pub connected: bool,
    pub available: bool,
    pub active: bool,
    pub dead: bool,
    pub unavailable: bool,
    /// Most recently consumed major report.
    pub last_major: Option<String>,
    pub display: Option<(String, StateClass, String)>,
    pub detail: String,
    /// Major reports received but not yet consumed by the coherence check.
    pub pending: VecDeque<String>,
}

impl NodeRecord {
    fn fresh(name: &str) -> Self {
        NodeRecord {
            name: name.to_string(),
            connected: true,
            available: false,
            active: false,
            dead: false,
            unavailable: false,
            last_major: None,
            display: None,
            detail: String::new(),
            pending: VecDeque::new(),
        }
    }

    fn view(&self) -> NodeView {
        NodeView {
            node: self.name.clone(),
            state: self.display.as_ref().map(|d| d.0.clone()),
            class: self.display.as_ref().map(|d| d.1),
            color: self.display.as_ref().map(|d| d.2.clone()),
            detail: self.detail.clone(),
            connected: self.connected,
            active: self.active,
            available: self.available,
            dead: self.dead,
            unavailable: self.unavailable,
        }
    }

    fn eligible_after_ready(&self) -> bool {
        self.connected && !self.unavailable && !self.active && self.last_major.as_deref() == Some(READY)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Phase {
    Coherent,
    InTransition {
        target: String,
        done: BTreeSet<String>,
    },
    Resetting {
        awaiting: BTreeSet<String>,
    },
    Errored,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Coherent => "coherent",
            Phase::InTransition { .. } => "in_transition",
            Phase::Resetting { .. } => "resetting",
            Phase::Errored => "errored",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTimer {
    pub kind: TimerKind,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantViolation(pub String);

impl fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The aggregation state machine.
#[derive(Debug, Clone)]
pub struct Manager {
    config: ManagerConfig,
    pending_config: Option<ManagerConfig>,
    aggregate: String,
    phase: Phase,
    nodes: BTreeMap<String, NodeRecord>,
    error_count: u32,
    timer: Option<ActiveTimer>,
    next_generation: u64,
    last_action: String,
}

impl Manager {
    pub fn new(config: ManagerConfig) -> Self {
        Manager {
            config,
            pending_config: None,
            aggregate: READY.to_string(),
            phase: Phase::Coherent,
            nodes: BTreeMap::new(),
            error_count: 0,
            timer: None,
            next_generation: 1,
            last_action: "manager started".into(),
        }
    }

    pub fn aggregate(&self) -> &str {
        &self.aggregate
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    /// The configuration that will apply from the next START or RESET.
    pub fn requested_config(&self) -> &ManagerConfig {
        self.pending_config.as_ref().unwrap_or(&self.config)
    }

    pub fn error_count(&self) -> u32 {
        self.error_count
    }

    pub fn timer(&self) -> Option<ActiveTimer> {
        self.timer
    }

    pub fn last_action(&self) -> &str {
        &self.last_action
    }

    pub fn node(&self, name: &str) -> Option<&NodeRecord> {
        self.nodes.get(name)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn active_nodes(&self) -> Vec<String> {
        self.nodes
            .values()
            .filter(|n| n.active)
            .map(|n| n.name.clone())
            .collect()
    }

    pub fn connected_nodes(&self) -> Vec<String> {
        self.nodes
            .values()
            .filter(|n| n.connected)
            .map(|n| n.name.clone())
            .collect()
    }

    pub fn manager_view(&self) -> ManagerView {
        ManagerView {
            aggregate: self.aggregate.clone(),
            phase: self.phase.name().to_string(),
            last_action: self.last_action.clone(),
            error_count: self.error_count,
            config: self.config,
            pending_config: self.pending_config,
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            manager: self.manager_view(),
            nodes: self.nodes.values().map(NodeRecord::view).collect(),
        }
    }

    /// Consumes one event. Effects are in the order they must be executed.
    pub fn ingest(&mut self, event: ManagerEvent) -> Vec<Effect> {
        let before_nodes: BTreeMap<String, NodeView> = self
            .nodes
            .iter()
            .map(|(k, v)| (k.clone(), v.view()))
            .collect();
        let before_manager = self.manager_view();
        let mut step = Step {
            effects: Vec::new(),
            touched: BTreeSet::new(),
        };

        match event {
            ManagerEvent::NodeConnected { node } => self.on_connect(&mut step, &node),
            ManagerEvent::NodeDisconnected { node } => self.on_disconnect(&mut step, &node),
            ManagerEvent::Report {
                node,
                state,
                class,
                color,
                detail,
            } => self.record_report(&mut step, &node, state, class, color, detail),
            ManagerEvent::ControllerCommand { name } => match name.as_str() {
                START => self.handle_start(&mut step),
                RESET => self.handle_reset(&mut step),
                _ => self.handle_generic(&mut step, &name),
            },
            ManagerEvent::OperatorAction { action, node } => {
                self.operator_action(&mut step, action, &node)
            }
            ManagerEvent::TimerFired { kind, generation } => {
                self.on_timer(&mut step, kind, generation)
            }
            ManagerEvent::ConfigChange { config } => self.change_config(&mut step, config),
        }

        let Step {
            mut effects,
            touched,
        } = step;
        for record in self.nodes.values() {
            let view = record.view();
            if touched.contains(&record.name) || before_nodes.get(&record.name) != Some(&view) {
                effects.push(Effect::Display {
                    update: DisplayUpdate::Node(view),
                });
            }
        }
        let manager = self.manager_view();
        if manager != before_manager {
            effects.push(Effect::Display {
                update: DisplayUpdate::Manager(manager),
            });
        }
        effects
    }

    fn on_connect(&mut self, step: &mut Step, name: &str) {
        if self.nodes.get(name).is_some_and(|n| n.connected) {
            step.log(format!("{name} connected again without a disconnect; dropping old session"));
            self.on_disconnect(step, name);
        }
        let unavailable = self.nodes.get(name).is_some_and(|n| n.unavailable);
        let mut record = NodeRecord::fresh(name);
        record.unavailable = unavailable;
        self.nodes.insert(name.to_string(), record);
        self.set_action(format!("node {name} connected"));
    }

    fn on_disconnect(&mut self, step: &mut Step, name: &str) {
        let Some(record) = self.nodes.get_mut(name) else {
            step.log(format!("disconnect from unknown node {name}"));
            return;
        };
        if !record.connected {
            step.log(format!("duplicate disconnect from {name}"));
            return;
        }
        let was_active = record.active;
        record.connected = false;
        record.dead = true;
        record.available = false;
        record.unavailable = true;
        self.retire(name);
        self.set_action(format!("node {name} disconnected"));

        if self.phase == Phase::Errored {
            return;
        }
        if was_active && self.count_error(step, &format!("active node {name} disconnected")) {
            return;
        }
        self.advance(step);
    }

    fn record_report(
        &mut self,
        step: &mut Step,
        name: &str,
        state: String,
        class: StateClass,
        color: String,
        detail: String,
    ) {
        let Some(record) = self.nodes.get_mut(name) else {
            step.log(format!("report {state} from unknown node {name} ignored"));
            return;
        };
        if !record.connected {
            step.log(format!("report {state} from disconnected node {name} ignored"));
            return;
        }
        step.touched.insert(name.to_string());
        record.display = Some((state.clone(), class, color));
        record.detail = detail;

        if self.phase == Phase::Errored {
            if class == StateClass::Major && state == READY {
                self.mark_ready(name);
                self.set_action(format!("{name} returned to READY while in ERROR"));
            }
            return;
        }

        match class {
            StateClass::Minor | StateClass::Micro => {}
            StateClass::Error => {
                record.available = false;
                record.last_major = Some(state.clone());
                self.retire(name);
                let reason = format!("{name} reported error state {state}");
                self.set_action(reason.clone());
                if !self.count_error(step, &reason) {
                    self.advance(step);
                }
            }
            StateClass::Major => {
                let awaited = matches!(&self.phase, Phase::Resetting { awaiting } if awaiting.contains(name));
                let record = self.nodes.get_mut(name).expect("checked above");
                if awaited || record.active {
                    record.pending.push_back(state);
                    self.advance(step);
                } else if state == READY {
                    self.mark_ready(name);
                } else if matches!(self.phase, Phase::Resetting { .. }) {
                    record.last_major = Some(state.clone());
                    record.available = false;
                    step.log(format!("{name} reported {state} during RESET without being awaited"));
                } else {
                    record.last_major = Some(state.clone());
                    record.unavailable = true;
                    record.available = false;
                    step.effects.push(Effect::SendToNode {
                        node: name.to_string(),
                        command: RESET.to_string(),
                    });
                    self.set_action(format!(
                        "inactive node {name} reported {state}; marked unavailable and sent RESET"
                    ));
                }
            }
        }
    }

    fn handle_start(&mut self, step: &mut Step) {
        let idle = self.aggregate == READY
            && self.phase == Phase::Coherent
            && self.timer.is_none()
            && self.nodes.values().all(|n| !n.active);
        if !idle {
            step.log(format!(
                "START refused: manager is {} ({})",
                self.aggregate,
                self.phase.name()
            ));
            return;
        }
        self.adopt_pending_config();
        let available: Vec<String> = self
            .nodes
            .values()
            .filter(|n| n.connected && n.available && !n.unavailable)
            .map(|n| n.name.clone())
            .collect();
        let min = self.config.min_nodes as usize;
        if available.len() < min {
            self.enter_error(
                step,
                format!("START: only {} node(s) available, {min} required", available.len()),
            );
            return;
        }
        let take = available.len().min(self.config.max_nodes as usize);
        self.error_count = 0;
        for name in &available[..take] {
            let record = self.nodes.get_mut(name).expect("selected from table");
            record.active = true;
            step.effects.push(Effect::SendToNode {
                node: name.clone(),
                command: START.to_string(),
            });
        }
        self.set_timer(step, TimerKind::Command);
        self.set_action(format!("START sent to {take} of {} available node(s)", available.len()));
    }

    fn handle_reset(&mut self, step: &mut Step) {
        self.adopt_pending_config();
        self.cancel_timer(step);
        self.error_count = 0;
        for record in self.nodes.values_mut() {
            record.pending.clear();
        }
        let awaiting: BTreeSet<String> = self.connected_nodes().into_iter().collect();
        let count = awaiting.len();
        self.phase = Phase::Resetting { awaiting };
        if count > 0 {
            step.effects.push(Effect::SendToAll {
                selector: Selector::Connected,
                command: RESET.to_string(),
            });
            self.set_timer(step, TimerKind::Command);
        }
        self.set_action(format!("RESET sent to {count} connected node(s)"));
        self.advance(step);
    }

    fn handle_generic(&mut self, step: &mut Step, command: &str) {
        let active = self.active_nodes();
        if self.phase != Phase::Coherent || self.aggregate == READY || active.is_empty() {
            step.log(format!(
                "{command} refused: manager is {} ({})",
                self.aggregate,
                self.phase.name()
            ));
            return;
        }
        for name in &active {
            step.effects.push(Effect::SendToNode {
                node: name.clone(),
                command: command.to_string(),
            });
        }
        self.set_timer(step, TimerKind::Command);
        self.set_action(format!("{command} sent to {} active node(s)", active.len()));
    }

    fn operator_action(&mut self, step: &mut Step, action: OperatorAction, name: &str) {
        let errored = self.phase == Phase::Errored;
        let Some(record) = self.nodes.get_mut(name) else {
            step.log(format!("operator {action:?} on unknown node {name}"));
            return;
        };
        match action {
            OperatorAction::Kill => {
                if !record.connected {
                    step.log(format!("kill {name}: node not connected"));
                } else if errored {
                    step.log(format!("kill {name}: refused while in ERROR, issue RESET"));
                } else {
                    step.effects.push(Effect::SendToNode {
                        node: name.to_string(),
                        command: RESET.to_string(),
                    });
                    self.set_action(format!("operator killed {name}"));
                }
            }
            OperatorAction::Restart | OperatorAction::ClearUnavailable => {
                record.unavailable = false;
                record.available = record.active || record.eligible_after_ready();
                if action == OperatorAction::Restart && record.connected && !errored {
                    step.effects.push(Effect::SendToNode {
                        node: name.to_string(),
                        command: RESET.to_string(),
                    });
                    self.set_action(format!("operator restarted {name}"));
                } else {
                    self.set_action(format!("operator cleared unavailable flag of {name}"));
                }
            }
        }
    }

    fn on_timer(&mut self, step: &mut Step, kind: TimerKind, generation: u64) {
        if self.timer != Some(ActiveTimer { kind, generation }) {
            step.log(format!("stale {kind:?} timer #{generation} ignored"));
            return;
        }
        self.timer = None;
        match std::mem::replace(&mut self.phase, Phase::Coherent) {
            Phase::Resetting { awaiting } => {
                for name in &awaiting {
                    if let Some(record) = self.nodes.get_mut(name) {
                        record.unavailable = true;
                        record.available = false;
                    }
                    self.retire(name);
                }
                let names: Vec<&str> = awaiting.iter().map(String::as_str).collect();
                self.set_action(format!(
                    "RESET timed out; marked unavailable: {}",
                    names.join(", ")
                ));
                self.publish(step, READY);
            }
            phase => {
                self.phase = phase;
                let what = match kind {
                    TimerKind::Command => "command",
                    TimerKind::Transition => "state transition",
                };
                self.enter_error(step, format!("{what} timed out"));
            }
        }
    }

    fn change_config(&mut self, step: &mut Step, config: ManagerConfig) {
        match config.validate() {
            Ok(()) => {
                self.pending_config = Some(config);
                self.set_action("configuration updated; applies from next START/RESET".to_string());
            }
            Err(e) => step.log(format!("configuration rejected: {e}")),
        }
    }

    /// Consumes pending reports until nothing more can happen.
    fn advance(&mut self, step: &mut Step) {
        loop {
            if matches!(self.phase, Phase::Coherent | Phase::InTransition { .. })
                && self.nodes.values().all(|n| !n.active)
            {
                self.phase = Phase::Coherent;
                self.cancel_timer(step);
                if self.aggregate != READY {
                    self.set_action("all active nodes returned to READY".to_string());
                    self.publish(step, READY);
                }
                return;
            }
            let progressed = match self.phase.clone() {
                Phase::Errored => return,
                Phase::Coherent => self.advance_coherent(step),
                Phase::InTransition { target, done } => {
                    match self.advance_transition(step, target, done) {
                        Some(p) => p,
                        None => return,
                    }
                }
                Phase::Resetting { awaiting } => self.advance_reset(step, awaiting),
            };
            if !progressed {
                return;
            }
        }
    }

    fn advance_coherent(&mut self, step: &mut Step) -> bool {
        let Some(name) = self
            .nodes
            .values()
            .find(|n| n.active && !n.pending.is_empty())
            .map(|n| n.name.clone())
        else {
            return false;
        };
        let record = self.nodes.get_mut(&name).expect("found above");
        let report = record.pending.pop_front().expect("non-empty");
        if report == READY {
            self.mark_ready(&name);
        } else if record.last_major.as_deref() == Some(report.as_str()) {
            step.log(format!("{name} repeated {report}"));
        } else {
            record.last_major = Some(report.clone());
            self.set_action(format!("{name} reported {report}; transition started"));
            self.phase = Phase::InTransition {
                target: report,
                done: BTreeSet::from([name]),
            };
            if self.timer.is_none() {
                self.set_timer(step, TimerKind::Transition);
            }
        }
        true
    }

    /// Returns `None` once ERROR has been entered.
    fn advance_transition(
        &mut self,
        step: &mut Step,
        target: String,
        mut done: BTreeSet<String>,
    ) -> Option<bool> {
        done.retain(|n| self.nodes.get(n).is_some_and(|r| r.active));
        if done.is_empty() {
            // whoever led the transition has left; nobody else has moved yet
            self.phase = Phase::Coherent;
            if self.timer.is_some_and(|t| t.kind == TimerKind::Transition) {
                self.cancel_timer(step);
            }
            return Some(true);
        }

        let mut progressed = false;
        let movers: Vec<String> = self
            .nodes
            .values()
            .filter(|n| n.active && !done.contains(&n.name) && !n.pending.is_empty())
            .map(|n| n.name.clone())
            .collect();
        for name in movers {
            let record = self.nodes.get_mut(&name).expect("collected above");
            let report = record.pending.pop_front().expect("non-empty");
            progressed = true;
            if report == target {
                record.last_major = Some(report);
                done.insert(name);
            } else if report == READY {
                self.mark_ready(&name);
            } else if record.last_major.as_deref() == Some(report.as_str()) {
                step.log(format!("{name} repeated {report}"));
            } else {
                self.enter_error(
                    step,
                    format!("{name} reported {report} while others moved to {target}"),
                );
                return None;
            }
        }

        let active: BTreeSet<String> = self.active_nodes().into_iter().collect();
        done.retain(|n| active.contains(n));
        if !active.is_empty() && active.is_subset(&done) {
            self.phase = Phase::Coherent;
            self.cancel_timer(step);
            self.set_action(format!("all {} active node(s) reached {target}", active.len()));
            self.publish(step, &target);
            return Some(true);
        }
        self.phase = Phase::InTransition { target, done };
        Some(progressed)
    }

    fn advance_reset(&mut self, step: &mut Step, mut awaiting: BTreeSet<String>) -> bool {
        awaiting.retain(|n| self.nodes.get(n).is_some_and(|r| r.connected));
        let mut progressed = false;
        for name in awaiting.clone() {
            let record = self.nodes.get_mut(&name).expect("retained above");
            let Some(report) = record.pending.pop_front() else {
                continue;
            };
            progressed = true;
            awaiting.remove(&name);
            if report == READY {
                self.mark_ready(&name);
            } else {
                record.last_major = Some(report.clone());
                record.unavailable = true;
                record.available = false;
                self.retire(&name);
                step.log(format!("{name} answered RESET with {report}; marked unavailable"));
            }
        }
        if awaiting.is_empty() {
            self.phase = Phase::Coherent;
            self.cancel_timer(step);
            self.set_action("RESET complete".to_string());
            self.publish(step, READY);
            return false;
        }
        self.phase = Phase::Resetting { awaiting };
        progressed
    }

    /// Consumed READY: the node leaves the operation and may be selected again.
    fn mark_ready(&mut self, name: &str) {
        self.retire(name);
        if let Some(record) = self.nodes.get_mut(name) {
            record.last_major = Some(READY.to_string());
            record.available = record.connected && !record.unavailable;
        }
    }

    /// Drops a node from the active set and from any set the phase waits on.
    fn retire(&mut self, name: &str) {
        if let Some(record) = self.nodes.get_mut(name) {
            record.active = false;
            record.pending.clear();
        }
        match &mut self.phase {
            Phase::InTransition { done, .. } => {
                done.remove(name);
            }
            Phase::Resetting { awaiting } => {
                awaiting.remove(name);
            }
            _ => {}
        }
    }

    /// Returns true when the error pushed the manager into ERROR.
    fn count_error(&mut self, step: &mut Step, reason: &str) -> bool {
        self.error_count += 1;
        if self.error_count > self.config.max_errors {
            self.enter_error(
                step,
                format!(
                    "{reason}; error count {} exceeds {}",
                    self.error_count, self.config.max_errors
                ),
            );
            true
        } else {
            step.log(format!(
                "{reason}; error {} of {} tolerated",
                self.error_count, self.config.max_errors
            ));
            false
        }
    }

    fn enter_error(&mut self, step: &mut Step, reason: String) {
        self.phase = Phase::Errored;
        self.cancel_timer(step);
        step.log(format!("ERROR: {reason}"));
        self.set_action(reason);
        self.publish(step, ERROR);
    }

    fn publish(&mut self, step: &mut Step, state: &str) {
        self.aggregate = state.to_string();
        step.effects.push(Effect::PublishAggregate {
            state: state.to_string(),
        });
    }

    fn set_timer(&mut self, step: &mut Step, kind: TimerKind) {
        self.cancel_timer(step);
        let generation = self.next_generation;
        self.next_generation += 1;
        self.timer = Some(ActiveTimer { kind, generation });
        step.effects.push(Effect::SetTimer {
            kind,
            generation,
            after_ms: self.config.timeout_ms,
        });
    }

    fn cancel_timer(&mut self, step: &mut Step) {
        if let Some(t) = self.timer.take() {
            step.effects.push(Effect::CancelTimer {
                kind: t.kind,
                generation: t.generation,
            });
        }
    }

    fn adopt_pending_config(&mut self) {
        if let Some(cfg) = self.pending_config.take() {
            self.config = cfg;
        }
    }

    fn set_action(&mut self, line: String) {
        self.last_action = line;
    }

    /// Structural invariants that must hold between events.
    pub fn check_invariants(&self) -> Result<(), InvariantViolation> {
        let fail = |m: String| Err(InvariantViolation(m));
        for n in self.nodes.values() {
            if n.unavailable && n.active {
                return fail(format!("{} unavailable but active", n.name));
            }
            if n.dead && n.connected {
                return fail(format!("{} dead but connected", n.name));
            }
            if n.active && !(n.available && n.connected) {
                return fail(format!("{} active but not available+connected", n.name));
            }
        }
        if (self.phase == Phase::Errored) != (self.aggregate == ERROR)
            && !matches!(self.phase, Phase::Resetting { .. })
        {
            return fail(format!(
                "phase {} with aggregate {}",
                self.phase.name(),
                self.aggregate
            ));
        }
        match &self.phase {
            Phase::Coherent => {
                for n in self.nodes.values().filter(|n| n.active) {
                    if n.last_major.as_deref() != Some(self.aggregate.as_str()) {
                        return fail(format!(
                            "coherent {} but active {} last consumed {:?}",
                            self.aggregate, n.name, n.last_major
                        ));
                    }
                }
            }
            Phase::InTransition { target, done } => {
                if done.is_empty() {
                    return fail("transition with nobody done".into());
                }
                for d in done {
                    let rec = &self.nodes[d];
                    if !rec.active || rec.last_major.as_deref() != Some(target.as_str()) {
                        return fail(format!("{d} in done set but not at {target}"));
                    }
                }
            }
            Phase::Resetting { awaiting } => {
                if awaiting.is_empty() {
                    return fail("resetting with nobody awaited".into());
                }
            }
            Phase::Errored => {
                if self.timer.is_some() {
                    return fail("timer armed while in ERROR".into());
                }
            }
        }
        Ok(())
    }
}

struct Step {
    effects: Vec<Effect>,
    touched: BTreeSet<String>,
}

impl Step {
    fn log(&mut self, line: String) {
        self.effects.push(Effect::Log { line });
    }
}

/// Aggregate names published by an effect list, in order.
pub fn published(effects: &[Effect]) -> Vec<String> {
    effects
        .iter()
        .filter_map(|e| match e {
            Effect::PublishAggregate { state } => Some(state.clone()),
            _ => None,
        })
        .collect()
}
