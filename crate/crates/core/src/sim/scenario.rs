//! Scripted scenarios under a virtual clock.
//!
//! One tick is one millisecond of manager time. Every message between a node
//! and the manager crosses a FIFO link with a fixed delay plus optional seeded
//! jitter. Simultaneous queue entries are ordered by lane, then by name, then
//! by the order in which they were scheduled.
//!
//! Nodes come in two flavours. Without a `machine` every node only does what
//! its `steps` say. With a `machine` every node also runs that state machine:
//! commands fire rules, `start_process` launches the scripted `child`, and
//! the node reports exactly as a daemon would.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{Effect, Manager, ManagerEvent, OperatorAction, TimerKind};
use crate::config::ManagerConfig;
use crate::machine::{
    Action, MachineInstance, MachineSpec, ReportDecision, StateClass, Trigger, READY,
};

use super::trace::{Trace, TraceRecord};

/// Exit status a killed child reports (SIGTERM).
const KILLED_STATUS: i32 = 128 + 15;
const RUNAWAY_LIMIT: usize = 5_000_000;

fn default_link_delay() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default)]
    pub config: ManagerConfig,
    #[serde(default)]
    pub seed: u64,
    /// Upper bound on extra ticks added to each link crossing.
    #[serde(default)]
    pub jitter: u64,
    #[serde(default = "default_link_delay")]
    pub link_delay: u64,
    /// Machine spec text run by every node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machine: Option<String>,
    /// Path of a machine spec, relative to the scenario file. [`ScenarioScript::load`]
    /// reads it into `machine`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machine_file: Option<String>,
    #[serde(default)]
    pub nodes: Vec<NodeScript>,
    #[serde(default)]
    pub controller: Vec<ControllerStep>,
    /// Stop once virtual time passes this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeScript {
    pub name: String,
    /// Expands into `count` nodes named `name01`, `name02`, ...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
    #[serde(default)]
    pub connect_at: u64,
    #[serde(default)]
    pub steps: Vec<NodeStep>,
    #[serde(default)]
    pub child: Vec<ChildStep>,
    /// Commands this node silently drops.
    #[serde(default)]
    pub ignore: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStep {
    #[serde(default)]
    pub after: u64,
    #[serde(flatten)]
    pub action: NodeAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case")]
pub enum NodeAction {
    Report {
        state: String,
        #[serde(default = "major")]
        class: StateClass,
        #[serde(default)]
        color: String,
    },
    Disconnect,
    Reconnect,
    /// Blocks the remaining steps until this command arrives.
    Await { command: String },
    /// Starts dropping a command from here on.
    Ignore { command: String },
}

fn major() -> StateClass {
    StateClass::Major
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChildStep {
    #[serde(default)]
    pub after: u64,
    #[serde(flatten)]
    pub action: ChildAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case")]
pub enum ChildAction {
    Event { name: String },
    Exit { code: i32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerStep {
    #[serde(default)]
    pub after: u64,
    #[serde(flatten)]
    pub action: ControllerAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case")]
pub enum ControllerAction {
    Command { name: String },
    /// Blocks until the published aggregate equals `state`.
    AwaitAggregate { state: String },
    Operator { action: OperatorAction, node: String },
    Config { config: ManagerConfig },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario still busy after {0} events")]
    Runaway(usize),
}

impl ScenarioScript {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    /// Reads a scenario file and inlines its `machine_file`.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Invalid(format!("{}: {e}", path.display())))?;
        let mut script = Self::from_json(&text)?;
        if let Some(file) = script.machine_file.take() {
            if script.machine.is_some() {
                return Err(ScenarioError::Invalid("both machine and machine_file given".into()));
            }
            let spec_path = path.parent().unwrap_or(Path::new(".")).join(&file);
            let spec = std::fs::read_to_string(&spec_path)
                .map_err(|e| ScenarioError::Invalid(format!("{}: {e}", spec_path.display())))?;
            script.machine = Some(spec);
        }
        Ok(script)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Node names after `count` expansion, in declaration order.
    pub fn node_names(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (idx, n) in self.nodes.iter().enumerate() {
            match n.count {
                None => out.push((n.name.clone(), idx)),
                Some(count) => {
                    let width = count.to_string().len();
                    for i in 1..=count {
                        out.push((format!("{}{:0width$}", n.name, i), idx));
                    }
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<Option<Arc<MachineSpec>>, ScenarioError> {
        self.config
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.machine_file.is_some() {
            return Err(ScenarioError::Invalid("machine_file must be loaded first".into()));
        }
        let mut seen = BTreeSet::new();
        for (name, _) in self.node_names() {
            if name.is_empty() || name == CONTROLLER {
                return Err(ScenarioError::Invalid(format!("bad node name {name:?}")));
            }
            if !seen.insert(name.clone()) {
                return Err(ScenarioError::Invalid(format!("duplicate node {name}")));
            }
        }
        for step in &self.controller {
            if let ControllerAction::Operator { node, .. } = &step.action {
                if !seen.contains(node) {
                    return Err(ScenarioError::Invalid(format!("operator names unknown node {node}")));
                }
            }
        }
        match &self.machine {
            None => {
                if self.nodes.iter().any(|n| !n.child.is_empty()) {
                    return Err(ScenarioError::Invalid("child steps need a machine".into()));
                }
                Ok(None)
            }
            Some(text) => MachineSpec::parse(text)
                .map(|s| Some(Arc::new(s)))
                .map_err(|e| ScenarioError::Invalid(format!("machine: {e}"))),
        }
    }
}

const CONTROLLER: &str = "controller";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Lane {
    Delivery,
    Node,
    Controller,
    Timer,
}

#[derive(Debug, Clone)]
enum Entry {
    ToManager(ManagerEvent),
    ToNode { node: String, epoch: u64, command: String },
    Connect { node: String },
    Step { node: String },
    Child { node: String, process: u64, action: ChildAction },
    Controller,
    Timer { kind: TimerKind, generation: u64 },
}

type Key = (u64, Lane, String, u64);

/// Ordered by key alone; the sequence number makes keys unique.
struct Queued(Key, Entry);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.cmp(&other.0)
    }
}

struct SimNode {
    name: String,
    script: usize,
    next_step: usize,
    awaiting: Option<String>,
    ignored: BTreeSet<String>,
    linked: bool,
    epoch: u64,
    gone: bool,
    machine: Option<MachineInstance>,
    process: u64,
    running: bool,
    last_report: (String, StateClass, String),
    to_manager_at: u64,
    to_node_at: u64,
}

struct Sim<'a> {
    script: &'a ScenarioScript,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    rng: ChaCha8Rng,
    manager: Manager,
    nodes: BTreeMap<String, SimNode>,
    armed: BTreeSet<(TimerKind, u64)>,
    aggregate: String,
    controller_next: usize,
    controller_waiting: Option<String>,
    records: Vec<TraceRecord>,
}

/// Runs a scenario to quiescence (or `until`) and returns its trace.
pub fn run_scenario(script: &ScenarioScript) -> Result<Trace, ScenarioError> {
    let machine = script.validate()?;
    let mut sim = Sim {
        script,
        now: 0,
        seq: 0,
        queue: BinaryHeap::new(),
        rng: ChaCha8Rng::seed_from_u64(script.seed),
        manager: Manager::new(script.config),
        nodes: BTreeMap::new(),
        armed: BTreeSet::new(),
        aggregate: READY.to_string(),
        controller_next: 0,
        controller_waiting: None,
        records: Vec::new(),
    };
    for (name, idx) in script.node_names() {
        let ns = &script.nodes[idx];
        let m = machine.as_ref().map(|s| MachineInstance::new(s.clone()));
        let initial = m
            .as_ref()
            .map(|m| {
                let d = m.current_state();
                (d.name.clone(), d.class, d.color.clone())
            })
            .unwrap_or((READY.to_string(), StateClass::Major, String::new()));
        sim.nodes.insert(
            name.clone(),
            SimNode {
                name: name.clone(),
                script: idx,
                next_step: 0,
                awaiting: None,
                ignored: ns.ignore.iter().cloned().collect(),
                linked: false,
                epoch: 0,
                gone: false,
                machine: m,
                process: 0,
                running: false,
                last_report: initial,
                to_manager_at: 0,
                to_node_at: 0,
            },
        );
        sim.push(ns.connect_at, Lane::Node, &name, Entry::Connect { node: name.clone() });
    }
    if let Some(first) = script.controller.first() {
        sim.push(first.after, Lane::Controller, CONTROLLER, Entry::Controller);
    }

    let mut handled = 0usize;
    while let Some(Reverse(Queued((time, ..), entry))) = sim.queue.pop() {
        if script.until.is_some_and(|u| time > u) {
            break;
        }
        handled += 1;
        if handled > RUNAWAY_LIMIT {
            return Err(ScenarioError::Runaway(RUNAWAY_LIMIT));
        }
        sim.now = time;
        sim.handle(entry);
    }
    Ok(Trace {
        scenario: script.name.clone(),
        config: script.config,
        records: sim.records,
    })
}

impl Sim<'_> {
    fn push(&mut self, at: u64, lane: Lane, name: &str, entry: Entry) {
        self.seq += 1;
        self.queue
            .push(Reverse(Queued((at, lane, name.to_string(), self.seq), entry)));
    }

    fn crossing(&mut self) -> u64 {
        let jitter = if self.script.jitter > 0 {
            self.rng.gen_range(0..=self.script.jitter)
        } else {
            0
        };
        self.now + self.script.link_delay + jitter
    }

    fn send_to_manager(&mut self, node: &str, event: ManagerEvent) {
        let at = self.crossing();
        let n = self.nodes.get_mut(node).expect("known node");
        let at = at.max(n.to_manager_at);
        n.to_manager_at = at;
        self.push(at, Lane::Delivery, node, Entry::ToManager(event));
    }

    fn send_to_node(&mut self, node: &str, command: &str) {
        let at = self.crossing();
        let Some(n) = self.nodes.get_mut(node) else {
            return;
        };
        if !n.linked {
            return;
        }
        let at = at.max(n.to_node_at);
        n.to_node_at = at;
        let epoch = n.epoch;
        self.push(
            at,
            Lane::Delivery,
            node,
            Entry::ToNode {
                node: node.to_string(),
                epoch,
                command: command.to_string(),
            },
        );
    }

    fn handle(&mut self, entry: Entry) {
        match entry {
            Entry::ToManager(event) => self.deliver(event),
            Entry::ToNode {
                node,
                epoch,
                command,
            } => {
                let n = &self.nodes[&node];
                if n.linked && n.epoch == epoch && !n.gone {
                    self.node_command(&node, &command);
                }
            }
            Entry::Connect { node } => {
                self.link_up(&node);
                self.schedule_step(&node);
            }
            Entry::Step { node } => self.node_step(&node),
            Entry::Child {
                node,
                process,
                action,
            } => self.child(&node, process, action),
            Entry::Controller => self.controller_step(),
            Entry::Timer { kind, generation } => {
                if self.armed.remove(&(kind, generation)) {
                    self.deliver(ManagerEvent::TimerFired { kind, generation });
                }
            }
        }
    }

    fn deliver(&mut self, event: ManagerEvent) {
        let effects = self.manager.ingest(event.clone());
        for effect in &effects {
            match effect {
                Effect::SendToNode { node, command } => self.send_to_node(node, command),
                Effect::SendToAll { command, .. } => {
                    let linked: Vec<String> = self
                        .nodes
                        .values()
                        .filter(|n| n.linked)
                        .map(|n| n.name.clone())
                        .collect();
                    for node in linked {
                        self.send_to_node(&node, command);
                    }
                }
                Effect::SetTimer {
                    kind,
                    generation,
                    after_ms,
                } => {
                    self.armed.insert((*kind, *generation));
                    self.push(
                        self.now + after_ms,
                        Lane::Timer,
                        "",
                        Entry::Timer {
                            kind: *kind,
                            generation: *generation,
                        },
                    );
                }
                Effect::CancelTimer { kind, generation } => {
                    self.armed.remove(&(*kind, *generation));
                }
                Effect::PublishAggregate { state } => self.aggregate = state.clone(),
                Effect::Display { .. } | Effect::Log { .. } => {}
            }
        }
        self.records.push(TraceRecord {
            t: self.now,
            event,
            effects,
        });
        if let Some(want) = &self.controller_waiting {
            if *want == self.aggregate {
                self.controller_waiting = None;
                self.schedule_controller();
            }
        }
    }

    fn link_up(&mut self, node: &str) {
        let n = self.nodes.get_mut(node).expect("known node");
        if n.linked || n.gone {
            return;
        }
        n.linked = true;
        n.epoch += 1;
        let (state, class, color) = n.last_report.clone();
        self.send_to_manager(node, ManagerEvent::NodeConnected { node: node.into() });
        self.report(node, &state, class, &color);
    }

    fn link_down(&mut self, node: &str) {
        let n = self.nodes.get_mut(node).expect("known node");
        if !n.linked {
            return;
        }
        n.linked = false;
        n.epoch += 1;
        self.send_to_manager(node, ManagerEvent::NodeDisconnected { node: node.into() });
        if self.nodes[node].machine.is_some() {
            self.fire(node, &Trigger::Disconnect);
        }
    }

    fn report(&mut self, node: &str, state: &str, class: StateClass, color: &str) {
        let n = self.nodes.get_mut(node).expect("known node");
        if matches!(class, StateClass::Major | StateClass::Error) {
            n.last_report = (state.into(), class, color.into());
        }
        if !n.linked {
            return;
        }
        self.send_to_manager(
            node,
            ManagerEvent::Report {
                node: node.into(),
                state: state.into(),
                class,
                color: color.into(),
                detail: String::new(),
            },
        );
    }

    fn schedule_step(&mut self, node: &str) {
        let n = &self.nodes[node];
        if n.gone {
            return;
        }
        if let Some(step) = self.script.nodes[n.script].steps.get(n.next_step) {
            let at = self.now + step.after;
            self.push(at, Lane::Node, node, Entry::Step { node: node.into() });
        }
    }

    fn node_step(&mut self, node: &str) {
        let n = self.nodes.get_mut(node).expect("known node");
        if n.gone {
            return;
        }
        let step = self.script.nodes[n.script].steps[n.next_step].clone();
        n.next_step += 1;
        match step.action {
            NodeAction::Report {
                state,
                class,
                color,
            } => self.report(node, &state, class, &color),
            NodeAction::Disconnect => self.link_down(node),
            NodeAction::Reconnect => self.link_up(node),
            NodeAction::Await { command } => {
                self.nodes.get_mut(node).expect("known node").awaiting = Some(command);
                return;
            }
            NodeAction::Ignore { command } => {
                self.nodes
                    .get_mut(node)
                    .expect("known node")
                    .ignored
                    .insert(command);
            }
        }
        self.schedule_step(node);
    }

    fn node_command(&mut self, node: &str, command: &str) {
        let n = self.nodes.get_mut(node).expect("known node");
        if n.ignored.contains(command) {
            return;
        }
        if n.awaiting.as_deref() == Some(command) {
            n.awaiting = None;
            self.schedule_step(node);
        }
        if self.nodes[node].machine.is_some() {
            self.fire(node, &Trigger::Command(command.into()));
        }
    }

    /// Fires a trigger on a machine node, runs the actions and reports.
    fn fire(&mut self, node: &str, trigger: &Trigger) {
        let n = self.nodes.get_mut(node).expect("known node");
        let machine = n.machine.as_mut().expect("machine node");
        let Some(outcome) = machine.fire(trigger) else {
            if let Trigger::Exit(_) = trigger {
                if let Some(err) = machine.spec().first_error_state().map(|s| s.name.clone()) {
                    machine.force(&err);
                    self.report_current(node);
                }
            }
            return;
        };
        for action in &outcome.actions {
            match action {
                Action::StartProcess => self.start_child(node),
                Action::KillProcess => {
                    let n = self.nodes.get_mut(node).expect("known node");
                    if n.running {
                        n.running = false;
                        n.process += 1;
                        let process = n.process;
                        self.push(
                            self.now + 1,
                            Lane::Node,
                            node,
                            Entry::Child {
                                node: node.into(),
                                process,
                                action: ChildAction::Exit {
                                    code: KILLED_STATUS,
                                },
                            },
                        );
                    }
                }
                // Child events are delivered the instant they happen, so there
                // is never a backlog to drain.
                Action::Cleanup => {}
                Action::Shutdown => {}
            }
        }
        self.report_current(node);
        if outcome.actions.contains(&Action::Shutdown) {
            self.link_down(node);
            self.nodes.get_mut(node).expect("known node").gone = true;
        }
    }

    fn report_current(&mut self, node: &str) {
        let machine = self.nodes[node].machine.as_ref().expect("machine node");
        let d = machine.current_state().clone();
        match machine.spec().report_decision(&d.name) {
            ReportDecision::Suppress => {}
            ReportDecision::ReportMajor | ReportDecision::ReportMinor => {
                self.report(node, &d.name, d.class, &d.color)
            }
        }
    }

    fn start_child(&mut self, node: &str) {
        let n = self.nodes.get_mut(node).expect("known node");
        n.process += 1;
        n.running = true;
        let process = n.process;
        let steps = self.script.nodes[n.script].child.clone();
        let mut at = self.now;
        for step in steps {
            at += step.after;
            self.push(
                at,
                Lane::Node,
                node,
                Entry::Child {
                    node: node.into(),
                    process,
                    action: step.action,
                },
            );
        }
    }

    fn child(&mut self, node: &str, process: u64, action: ChildAction) {
        let n = self.nodes.get_mut(node).expect("known node");
        if n.process != process || n.gone {
            return;
        }
        match action {
            ChildAction::Event { name } => {
                if n.running {
                    self.fire(node, &Trigger::Event(name));
                }
            }
            ChildAction::Exit { code } => {
                n.running = false;
                n.process += 1;
                self.fire(node, &Trigger::Exit(code));
            }
        }
    }

    fn schedule_controller(&mut self) {
        if let Some(step) = self.script.controller.get(self.controller_next) {
            let at = self.now + step.after;
            self.push(at, Lane::Controller, CONTROLLER, Entry::Controller);
        }
    }

    fn controller_step(&mut self) {
        let Some(step) = self.script.controller.get(self.controller_next).cloned() else {
            return;
        };
        self.controller_next += 1;
        let event = match step.action {
            ControllerAction::Command { name } => ManagerEvent::ControllerCommand { name },
            ControllerAction::Operator { action, node } => {
                ManagerEvent::OperatorAction { action, node }
            }
            ControllerAction::Config { config } => ManagerEvent::ConfigChange { config },
            ControllerAction::AwaitAggregate { state } => {
                if state == self.aggregate {
                    self.schedule_controller();
                } else {
                    self.controller_waiting = Some(state);
                }
                return;
            }
        };
        let at = self.crossing();
        self.push(at, Lane::Delivery, CONTROLLER, Entry::ToManager(event));
        self.schedule_controller();
    }
}
