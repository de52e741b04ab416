//! A second, deliberately naive statement of the manager's rules.
//!
//! Instead of pending queues and phase objects it keeps, per operation,
//! each active node's full list of reported major states and recomputes the
//! agreed trajectory from those lists after every stimulus. It shares no code
//! with [`crate::aggregator`] beyond the vocabulary types.

use std::collections::{BTreeMap, BTreeSet};

use crate::aggregator::{OperatorAction, ERROR, RESET, START};
use crate::config::ManagerConfig;
use crate::machine::{StateClass, READY};

use super::Stimulus;

#[derive(Debug, Clone, Default)]
struct NodeFacts {
    connected: bool,
    unavailable: bool,
    /// Last major or error state consumed from this node was READY.
    ready: bool,
}

/// One START-to-READY operation.
#[derive(Debug, Clone)]
struct Operation {
    members: BTreeSet<String>,
    histories: BTreeMap<String, Vec<String>>,
    /// Trajectory position from which a member no longer takes part.
    left_at: BTreeMap<String, usize>,
    agreed: usize,
    command_pending: bool,
}

impl Operation {
    fn required_at(&self, pos: usize) -> BTreeSet<String> {
        self.members
            .iter()
            .filter(|n| self.left_at.get(*n).map_or(true, |l| *l > pos))
            .cloned()
            .collect()
    }

    /// A member stays in until the agreed trajectory reaches the point where
    /// it said READY.
    fn still_in(&self, node: &str) -> bool {
        self.members.contains(node) && self.left_at.get(node).map_or(true, |l| *l > self.agreed)
    }

    fn leave(&mut self, node: &str, at: usize) {
        self.left_at.insert(node.to_string(), at);
        if let Some(h) = self.histories.get_mut(node) {
            h.truncate(at);
        }
    }

    fn someone_moved(&self) -> bool {
        self.required_at(self.agreed)
            .iter()
            .any(|n| self.histories[n].len() > self.agreed)
    }
}

#[derive(Debug, Clone)]
pub struct Oracle {
    config: ManagerConfig,
    requested: Option<ManagerConfig>,
    nodes: BTreeMap<String, NodeFacts>,
    operation: Option<Operation>,
    /// Nodes still owing READY after RESET, and which of them were active.
    resetting: Option<(BTreeSet<String>, BTreeSet<String>)>,
    errored: bool,
    errors: u32,
    aggregate: String,
    published: Vec<String>,
}

impl Oracle {
    pub fn new(config: ManagerConfig) -> Self {
        Oracle {
            config,
            requested: None,
            nodes: BTreeMap::new(),
            operation: None,
            resetting: None,
            errored: false,
            errors: 0,
            aggregate: READY.to_string(),
            published: Vec::new(),
        }
    }

    pub fn published(&self) -> &[String] {
        &self.published
    }

    pub fn aggregate(&self) -> &str {
        &self.aggregate
    }

    /// Whether a timeout would be running right now.
    pub fn timer_armed(&self) -> bool {
        if self.errored {
            return false;
        }
        if let Some((awaiting, _)) = &self.resetting {
            return !awaiting.is_empty();
        }
        self.operation
            .as_ref()
            .is_some_and(|op| op.command_pending || op.someone_moved())
    }

    /// Expected aggregate sequence for a totally ordered stimulus list.
    pub fn expected(config: ManagerConfig, stimuli: &[Stimulus]) -> Vec<String> {
        let mut oracle = Oracle::new(config);
        for s in stimuli {
            oracle.apply(s);
        }
        oracle.published
    }

    fn publish(&mut self, state: &str) {
        self.aggregate = state.to_string();
        self.published.push(state.to_string());
    }

    fn fail(&mut self) {
        self.errored = true;
        self.publish(ERROR);
    }

    fn is_active(&self, node: &str) -> bool {
        if let Some((_, active)) = &self.resetting {
            return active.contains(node);
        }
        self.operation.as_ref().is_some_and(|op| op.still_in(node))
    }

    fn deactivate(&mut self, node: &str) {
        if let Some((awaiting, active)) = &mut self.resetting {
            awaiting.remove(node);
            active.remove(node);
        }
        if let Some(op) = &mut self.operation {
            if op.still_in(node) {
                let at = op.agreed;
                op.leave(node, at);
            }
        }
    }

    /// Returns true if this error tipped the manager into ERROR.
    fn count_error(&mut self) -> bool {
        self.errors += 1;
        if self.errors > self.config.max_errors {
            self.fail();
            true
        } else {
            false
        }
    }

    pub fn apply(&mut self, stimulus: &Stimulus) {
        match stimulus {
            Stimulus::Connect { node } => {
                if self.nodes.get(node).is_some_and(|f| f.connected) {
                    self.apply(&Stimulus::Disconnect { node: node.clone() });
                }
                let unavailable = self.nodes.get(node).is_some_and(|f| f.unavailable);
                self.nodes.insert(
                    node.clone(),
                    NodeFacts {
                        connected: true,
                        unavailable,
                        ready: false,
                    },
                );
            }
            Stimulus::Disconnect { node } => {
                let Some(facts) = self.nodes.get_mut(node) else { return };
                if !facts.connected {
                    return;
                }
                facts.connected = false;
                facts.unavailable = true;
                facts.ready = false;
                let was_active = self.is_active(node);
                self.deactivate(node);
                if self.errored {
                    return;
                }
                if was_active && self.count_error() {
                    return;
                }
            }
            Stimulus::Report { node, state, class } => {
                if !self.nodes.get(node).is_some_and(|f| f.connected) {
                    return;
                }
                self.report(node, state, *class);
            }
            Stimulus::Command { name } => self.command(name),
            Stimulus::Operator { action, node } => {
                if let Some(facts) = self.nodes.get_mut(node) {
                    if *action != OperatorAction::Kill {
                        facts.unavailable = false;
                    }
                }
            }
            Stimulus::Timeout => {
                if !self.timer_armed() {
                    return;
                }
                if let Some((awaiting, _)) = self.resetting.take() {
                    for n in awaiting {
                        if let Some(f) = self.nodes.get_mut(&n) {
                            f.unavailable = true;
                        }
                    }
                    self.operation = None;
                    self.publish(READY);
                } else {
                    self.fail();
                }
            }
            Stimulus::Config { config } => {
                if config.validate().is_ok() {
                    self.requested = Some(*config);
                }
            }
        }
        self.settle();
    }

    fn report(&mut self, node: &str, state: &str, class: StateClass) {
        if self.errored {
            if class == StateClass::Major && state == READY {
                self.deactivate(node);
                self.nodes.get_mut(node).expect("connected").ready = true;
            }
            return;
        }
        match class {
            StateClass::Minor | StateClass::Micro => {}
            StateClass::Error => {
                self.nodes.get_mut(node).expect("connected").ready = false;
                self.deactivate(node);
                self.count_error();
            }
            StateClass::Major => {
                if let Some((awaiting, _)) = &self.resetting {
                    if awaiting.contains(node) {
                        let ok = state == READY;
                        self.deactivate(node);
                        let f = self.nodes.get_mut(node).expect("connected");
                        f.ready = ok;
                        if !ok {
                            f.unavailable = true;
                        }
                    } else {
                        self.nodes.get_mut(node).expect("connected").ready = state == READY;
                    }
                    return;
                }
                if self.is_active(node) {
                    let op = self.operation.as_mut().expect("active implies operation");
                    if op.left_at.contains_key(node) {
                        // already said READY; anything after it is moot
                        return;
                    }
                    let history = op.histories.get_mut(node).expect("member");
                    if state == READY {
                        let at = history.len();
                        op.leave(node, at);
                        // a READY held behind the others only counts once reached
                        if at <= op.agreed {
                            self.nodes.get_mut(node).expect("connected").ready = true;
                        }
                    } else {
                        let last = history.last().map(String::as_str).unwrap_or(READY);
                        if last != state {
                            history.push(state.to_string());
                        }
                        self.nodes.get_mut(node).expect("connected").ready = false;
                    }
                } else if state == READY {
                    self.nodes.get_mut(node).expect("connected").ready = true;
                } else {
                    let f = self.nodes.get_mut(node).expect("connected");
                    f.unavailable = true;
                    f.ready = false;
                }
            }
        }
    }

    fn command(&mut self, name: &str) {
        match name {
            START => {
                if self.errored
                    || self.resetting.is_some()
                    || self.operation.is_some()
                    || self.aggregate != READY
                {
                    return;
                }
                if let Some(c) = self.requested.take() {
                    self.config = c;
                }
                let candidates: Vec<String> = self
                    .nodes
                    .iter()
                    .filter(|(n, f)| f.connected && f.ready && !f.unavailable && !self.is_active(n))
                    .map(|(n, _)| n.clone())
                    .collect();
                if candidates.len() < self.config.min_nodes as usize {
                    self.fail();
                    return;
                }
                self.errors = 0;
                let members: BTreeSet<String> = candidates
                    .into_iter()
                    .take(self.config.max_nodes as usize)
                    .collect();
                self.operation = Some(Operation {
                    histories: members.iter().map(|n| (n.clone(), Vec::new())).collect(),
                    members,
                    left_at: BTreeMap::new(),
                    agreed: 0,
                    command_pending: true,
                });
            }
            RESET => {
                if let Some(c) = self.requested.take() {
                    self.config = c;
                }
                self.errors = 0;
                self.errored = false;
                let awaiting: BTreeSet<String> = self
                    .nodes
                    .iter()
                    .filter(|(_, f)| f.connected)
                    .map(|(n, _)| n.clone())
                    .collect();
                let active: BTreeSet<String> = awaiting
                    .iter()
                    .filter(|n| self.is_active(n))
                    .cloned()
                    .collect();
                self.operation = None;
                self.resetting = Some((awaiting, active));
            }
            _ => {
                if self.errored || self.resetting.is_some() || self.aggregate == READY {
                    return;
                }
                if let Some(op) = &mut self.operation {
                    if !op.someone_moved() {
                        op.command_pending = true;
                    }
                }
            }
        }
    }

    /// Recomputes the agreed trajectory from the histories.
    fn settle(&mut self) {
        if self.errored {
            return;
        }
        if let Some((awaiting, _)) = &self.resetting {
            if awaiting.is_empty() {
                self.resetting = None;
                self.publish(READY);
            }
            return;
        }
        loop {
            let Some(op) = &mut self.operation else { return };
            let required = op.required_at(op.agreed);
            if required.is_empty() {
                self.operation = None;
                if self.aggregate != READY {
                    self.publish(READY);
                }
                return;
            }
            let at = op.agreed;
            let entries: BTreeSet<&String> = required
                .iter()
                .filter_map(|n| op.histories[n].get(at))
                .collect();
            if entries.len() > 1 {
                self.fail();
                return;
            }
            let everyone_there = required.iter().all(|n| op.histories[n].len() > at);
            if entries.len() == 1 && everyone_there {
                let state = (*entries.iter().next().expect("one entry")).clone();
                op.agreed += 1;
                op.command_pending = false;
                let reached: Vec<String> = op
                    .left_at
                    .iter()
                    .filter(|(_, at)| **at == op.agreed)
                    .map(|(n, _)| n.clone())
                    .collect();
                for n in reached {
                    if let Some(f) = self.nodes.get_mut(&n) {
                        f.ready = true;
                    }
                }
                self.publish(&state);
                continue;
            }
            return;
        }
    }
}
