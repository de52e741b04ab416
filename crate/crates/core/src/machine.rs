//! Configurable daemon state machines.
//!
//! A machine is loaded from a small line-oriented text format:
//!
//! ```text
//! # comment
//! machine <NAME>
//! state <NAME> class=<major|minor|micro|error> color=<word> [initial]
//! trans <FROM|*> on <trigger> [do <action>[,<action>]*] -> <TO>
//!
//! trigger := command <NAME> | exit <0..255|nonzero|any> | event <NAME> | disconnect
//! action  := start_process | kill_process | cleanup | shutdown
//! ```
//!
//! Every machine starts in `READY`, which must be declared `initial` with
//! class `major`.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of the initial state every machine must declare.
pub const READY: &str = "READY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateClass {
    Major,
    Minor,
    Micro,
    Error,
}

impl StateClass {
    pub fn as_str(self) -> &'static str {
        match self {
            StateClass::Major => "major",
            StateClass::Minor => "minor",
            StateClass::Micro => "micro",
            StateClass::Error => "error",
        }
    }
}

impl fmt::Display for StateClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StateClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "major" => Ok(StateClass::Major),
            "minor" => Ok(StateClass::Minor),
            "micro" => Ok(StateClass::Micro),
            "error" => Ok(StateClass::Error),
            other => Err(format!("unknown state class `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateDescriptor {
    pub name: String,
    pub class: StateClass,
    pub color: String,
    pub is_initial: bool,
}

/// Exit-code pattern on the left-hand side of a rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitPattern {
    Code(u8),
    Nonzero,
    Any,
}

impl ExitPattern {
    fn matches(self, code: i32) -> bool {
        match self {
            ExitPattern::Code(c) => i32::from(c) == code,
            ExitPattern::Nonzero => code != 0,
            ExitPattern::Any => true,
        }
    }
}

/// Trigger pattern used in rules.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TriggerPattern {
    Command(String),
    Exit(ExitPattern),
    Event(String),
    Disconnect,
}

/// A concrete trigger delivered to a running machine.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Trigger {
    Command(String),
    Exit(i32),
    Event(String),
    Disconnect,
}

impl TriggerPattern {
    pub fn matches(&self, trigger: &Trigger) -> bool {
        match (self, trigger) {
            (TriggerPattern::Command(a), Trigger::Command(b)) => a == b,
            (TriggerPattern::Event(a), Trigger::Event(b)) => a == b,
            (TriggerPattern::Exit(p), Trigger::Exit(code)) => p.matches(*code),
            (TriggerPattern::Disconnect, Trigger::Disconnect) => true,
            _ => false,
        }
    }
}

impl fmt::Display for TriggerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TriggerPattern::Command(n) => write!(f, "command {n}"),
            TriggerPattern::Event(n) => write!(f, "event {n}"),
            TriggerPattern::Exit(ExitPattern::Code(c)) => write!(f, "exit {c}"),
            TriggerPattern::Exit(ExitPattern::Nonzero) => f.write_str("exit nonzero"),
            TriggerPattern::Exit(ExitPattern::Any) => f.write_str("exit any"),
            TriggerPattern::Disconnect => f.write_str("disconnect"),
        }
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trigger::Command(n) => write!(f, "command {n}"),
            Trigger::Event(n) => write!(f, "event {n}"),
            Trigger::Exit(c) => write!(f, "exit {c}"),
            Trigger::Disconnect => f.write_str("disconnect"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    StartProcess,
    KillProcess,
    Cleanup,
    Shutdown,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::StartProcess => "start_process",
            Action::KillProcess => "kill_process",
            Action::Cleanup => "cleanup",
            Action::Shutdown => "shutdown",
        }
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "start_process" => Ok(Action::StartProcess),
            "kill_process" => Ok(Action::KillProcess),
            "cleanup" => Ok(Action::Cleanup),
            "shutdown" => Ok(Action::Shutdown),
            other => Err(format!("unknown action `{other}`")),
        }
    }
}

/// `None` in `from` is the `*` wildcard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionRule {
    pub from: Option<String>,
    pub trigger: TriggerPattern,
    pub actions: Vec<Action>,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineSpec {
    pub name: Option<String>,
    pub states: Vec<StateDescriptor>,
    pub rules: Vec<TransitionRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: state `{name}` declared twice")]
    DuplicateState { line: usize, name: String },
    #[error("no initial READY state of class major")]
    NoInitialReady,
    #[error("line {line}: state `{name}` is not declared")]
    UndeclaredState { line: usize, name: String },
    #[error("line {line}: rule `{from} on {trigger}` declared twice")]
    DuplicateRule {
        line: usize,
        from: String,
        trigger: String,
    },
}

fn syntax(line: usize, message: impl Into<String>) -> SpecError {
    SpecError::Syntax {
        line,
        message: message.into(),
    }
}

fn is_state_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

fn is_word(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl MachineSpec {
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut name = None;
        let mut states: Vec<StateDescriptor> = Vec::new();
        let mut rules: Vec<(usize, TransitionRule)> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens[0] {
                "machine" => {
                    if tokens.len() != 2 || !is_word(tokens[1]) {
                        return Err(syntax(line_no, "expected `machine <NAME>`"));
                    }
                    if name.is_some() {
                        return Err(syntax(line_no, "machine name declared twice"));
                    }
                    name = Some(tokens[1].to_string());
                }
                "state" => {
                    let state = parse_state(line_no, &tokens)?;
                    if states.iter().any(|s| s.name == state.name) {
                        return Err(SpecError::DuplicateState {
                            line: line_no,
                            name: state.name,
                        });
                    }
                    states.push(state);
                }
                "trans" => rules.push((line_no, parse_rule(line_no, &tokens)?)),
                other => return Err(syntax(line_no, format!("unknown directive `{other}`"))),
            }
        }

        let initial: Vec<&StateDescriptor> = states.iter().filter(|s| s.is_initial).collect();
        match initial.as_slice() {
            [only] if only.name == READY && only.class == StateClass::Major => {}
            _ => return Err(SpecError::NoInitialReady),
        }

        let declared: HashSet<&str> = states.iter().map(|s| s.name.as_str()).collect();
        let mut seen: HashSet<(Option<&str>, &TriggerPattern)> = HashSet::new();
        for (line, rule) in &rules {
            for target in rule.from.iter().chain(std::iter::once(&rule.to)) {
                if !declared.contains(target.as_str()) {
                    return Err(SpecError::UndeclaredState {
                        line: *line,
                        name: target.clone(),
                    });
                }
            }
            if !seen.insert((rule.from.as_deref(), &rule.trigger)) {
                return Err(SpecError::DuplicateRule {
                    line: *line,
                    from: rule.from.clone().unwrap_or_else(|| "*".into()),
                    trigger: rule.trigger.to_string(),
                });
            }
        }

        Ok(MachineSpec {
            name,
            states,
            rules: rules.into_iter().map(|(_, r)| r).collect(),
        })
    }

    pub fn state(&self, name: &str) -> Option<&StateDescriptor> {
        self.states.iter().find(|s| s.name == name)
    }

    /// First declared error-class state, used when a child exit has no rule.
    pub fn first_error_state(&self) -> Option<&StateDescriptor> {
        self.states.iter().find(|s| s.class == StateClass::Error)
    }

    /// Picks the rule for `trigger` in `current`: exact-from rules beat
    /// wildcard rules, then declaration order.
    pub fn select_rule(&self, current: &str, trigger: &Trigger) -> Option<&TransitionRule> {
        let exact = self
            .rules
            .iter()
            .find(|r| r.from.as_deref() == Some(current) && r.trigger.matches(trigger));
        exact.or_else(|| {
            self.rules
                .iter()
                .find(|r| r.from.is_none() && r.trigger.matches(trigger))
        })
    }

    /// States that cannot be reached from READY. Not an error, but worth a warning.
    pub fn unreachable_states(&self) -> Vec<String> {
        let mut reached: BTreeSet<&str> = BTreeSet::new();
        let mut queue: VecDeque<&str> = VecDeque::from([READY]);
        reached.insert(READY);
        while let Some(state) = queue.pop_front() {
            for rule in &self.rules {
                let applies = rule.from.as_deref().map_or(true, |f| f == state);
                if applies && reached.insert(rule.to.as_str()) {
                    queue.push_back(rule.to.as_str());
                }
            }
        }
        self.states
            .iter()
            .filter(|s| !reached.contains(s.name.as_str()))
            .map(|s| s.name.clone())
            .collect()
    }

    pub fn report_decision(&self, state: &str) -> ReportDecision {
        match self.state(state).map(|s| s.class) {
            Some(StateClass::Major) | Some(StateClass::Error) => ReportDecision::ReportMajor,
            Some(StateClass::Minor) => ReportDecision::ReportMinor,
            Some(StateClass::Micro) | None => ReportDecision::Suppress,
        }
    }
}

fn parse_state(line: usize, tokens: &[&str]) -> Result<StateDescriptor, SpecError> {
    let name = tokens
        .get(1)
        .filter(|n| is_state_name(n))
        .ok_or_else(|| syntax(line, "expected an uppercase state name after `state`"))?;
    let mut class = None;
    let mut color = None;
    let mut is_initial = false;
    for tok in &tokens[2..] {
        if *tok == "initial" {
            if is_initial {
                return Err(syntax(line, "`initial` given twice"));
            }
            is_initial = true;
        } else if let Some(v) = tok.strip_prefix("class=") {
            if class.is_some() {
                return Err(syntax(line, "`class=` given twice"));
            }
            class = Some(v.parse::<StateClass>().map_err(|e| syntax(line, e))?);
        } else if let Some(v) = tok.strip_prefix("color=") {
            if v.is_empty() || color.is_some() {
                return Err(syntax(line, "`color=` must be given once and be non-empty"));
            }
            color = Some(v.to_string());
        } else {
            return Err(syntax(line, format!("unexpected token `{tok}`")));
        }
    }
    Ok(StateDescriptor {
        name: name.to_string(),
        class: class.ok_or_else(|| syntax(line, "missing `class=`"))?,
        color: color.ok_or_else(|| syntax(line, "missing `color=`"))?,
        is_initial,
    })
}

fn parse_rule(line: usize, tokens: &[&str]) -> Result<TransitionRule, SpecError> {
    let arrow = tokens
        .iter()
        .position(|t| *t == "->")
        .ok_or_else(|| syntax(line, "missing `->`"))?;
    if arrow + 2 != tokens.len() {
        return Err(syntax(line, "expected exactly one target state after `->`"));
    }
    let to = tokens[arrow + 1];
    if !is_state_name(to) {
        return Err(syntax(line, format!("bad target state `{to}`")));
    }
    let from = match tokens.get(1) {
        Some(&"*") => None,
        Some(f) if is_state_name(f) => Some(f.to_string()),
        _ => return Err(syntax(line, "expected a source state or `*` after `trans`")),
    };
    if tokens.get(2) != Some(&"on") {
        return Err(syntax(line, "expected `on` after the source state"));
    }
    let body = &tokens[3..arrow];
    let do_at = body.iter().position(|t| *t == "do");
    let (trigger_tokens, action_tokens) = match do_at {
        Some(i) => (&body[..i], &body[i + 1..]),
        None => (body, &[][..]),
    };
    let trigger = parse_trigger(line, trigger_tokens)?;
    let actions = if do_at.is_some() {
        let joined = action_tokens.join("");
        if joined.is_empty() {
            return Err(syntax(line, "`do` needs at least one action"));
        }
        joined
            .split(',')
            .map(|a| a.parse::<Action>().map_err(|e| syntax(line, e)))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    Ok(TransitionRule {
        from,
        trigger,
        actions,
        to: to.to_string(),
    })
}

fn parse_trigger(line: usize, tokens: &[&str]) -> Result<TriggerPattern, SpecError> {
    match tokens {
        ["command", n] if is_word(n) => Ok(TriggerPattern::Command(n.to_string())),
        ["event", n] if is_word(n) => Ok(TriggerPattern::Event(n.to_string())),
        ["exit", "nonzero"] => Ok(TriggerPattern::Exit(ExitPattern::Nonzero)),
        ["exit", "any"] => Ok(TriggerPattern::Exit(ExitPattern::Any)),
        ["exit", code] => code
            .parse::<u8>()
            .map(|c| TriggerPattern::Exit(ExitPattern::Code(c)))
            .map_err(|_| syntax(line, format!("bad exit code `{code}`"))),
        ["disconnect"] => Ok(TriggerPattern::Disconnect),
        _ => Err(syntax(line, format!("bad trigger `{}`", tokens.join(" ")))),
    }
}

impl fmt::Display for MachineSpec {
    /// Canonical form; parsing it yields an equal spec.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(name) = &self.name {
            writeln!(f, "machine {name}")?;
        }
        for s in &self.states {
            write!(f, "state {} class={} color={}", s.name, s.class, s.color)?;
            if s.is_initial {
                f.write_str(" initial")?;
            }
            writeln!(f)?;
        }
        for r in &self.rules {
            write!(f, "trans {} on {}", r.from.as_deref().unwrap_or("*"), r.trigger)?;
            if !r.actions.is_empty() {
                let actions: Vec<&str> = r.actions.iter().map(|a| a.as_str()).collect();
                write!(f, " do {}", actions.join(","))?;
            }
            writeln!(f, " -> {}", r.to)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportDecision {
    ReportMajor,
    ReportMinor,
    Suppress,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionOutcome {
    pub from: String,
    pub actions: Vec<Action>,
    pub to: String,
}

/// A running machine. Starts in READY; `current` is always a declared state.
#[derive(Debug, Clone)]
pub struct MachineInstance {
    spec: Arc<MachineSpec>,
    current: String,
}

impl MachineInstance {
    pub fn new(spec: Arc<MachineSpec>) -> Self {
        MachineInstance {
            spec,
            current: READY.to_string(),
        }
    }

    pub fn spec(&self) -> &MachineSpec {
        &self.spec
    }

    pub fn current(&self) -> &str {
        &self.current
    }

    pub fn current_state(&self) -> &StateDescriptor {
        self.spec
            .state(&self.current)
            .expect("current state is always declared")
    }

    /// Applies the matching rule, if any. `None` leaves the state untouched.
    pub fn fire(&mut self, trigger: &Trigger) -> Option<TransitionOutcome> {
        let rule = self.spec.select_rule(&self.current, trigger)?;
        let outcome = TransitionOutcome {
            from: std::mem::replace(&mut self.current, rule.to.clone()),
            actions: rule.actions.clone(),
            to: rule.to.clone(),
        };
        Some(outcome)
    }

    /// Forces the machine into `state` without a rule. Returns false for undeclared states.
    pub fn force(&mut self, state: &str) -> bool {
        if self.spec.state(state).is_none() {
            return false;
        }
        self.current = state.to_string();
        true
    }
}
