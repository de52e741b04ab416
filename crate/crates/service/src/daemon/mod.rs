//! The per-node daemon.
//!
//! Manager session, child output and child exit all feed one queue of
//! [`Input`]s; the daemon loop is its only consumer and the only place the
//! machine changes state.

mod child;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use mnsm_core::machine::{Action, ReportDecision};
use mnsm_core::wire::{Body, ServiceKind};
use mnsm_core::{MachineInstance, MachineSpec, StateClass, Trigger};
use tokio::sync::mpsc;

pub use child::{exit_code, parse_event_line, tail, LogFile, LOG_ROTATE_BYTES, SPAWN_FAILED};

use crate::registry::RegistryClient;
use crate::session::{self, Incoming, Outbox};
use child::{Child, SharedLog};

#[derive(Debug, Clone)]
pub struct DaemonConfig {
    pub spec: Arc<MachineSpec>,
    pub name: String,
    /// Registry name of the manager to attach to.
    pub manager: String,
    pub log_dir: PathBuf,
    /// Child command line, run through `sh -c`.
    pub exec: String,
    pub registry: String,
    pub heartbeat: Duration,
    pub kill_grace: Duration,
}

#[derive(Debug)]
pub enum Input {
    ManagerUp(Outbox),
    ManagerDown,
    Command(String),
    LogRequest { request: u64, lines: u32 },
    ChildEvent { id: u64, name: String },
    ChildExit { id: u64, code: i32 },
}

struct Daemon {
    cfg: DaemonConfig,
    machine: MachineInstance,
    log: SharedLog,
    scratch: PathBuf,
    inputs: mpsc::UnboundedSender<Input>,
    manager: Option<Outbox>,
    child: Option<Child>,
    /// Child whose events are still accepted; cleared by cleanup.
    listening: Option<u64>,
    next_child: u64,
    /// Last state sent as a major or error report.
    last_major: Option<(String, StateClass, String, String)>,
    detail: String,
}

/// Runs the daemon until a `shutdown` action.
pub async fn run(cfg: DaemonConfig) -> anyhow::Result<()> {
    let log_path = cfg.log_dir.join(format!("{}.log", cfg.name));
    let log = LogFile::open(&log_path)
        .with_context(|| format!("opening log {}", log_path.display()))?;
    let (tx, mut rx) = mpsc::unbounded_channel();
    let registry = RegistryClient {
        heartbeat: cfg.heartbeat,
        ..RegistryClient::new(&cfg.registry, &cfg.name)
    };
    let registration = registry.keep_registered(&cfg.name, ServiceKind::Daemon, "host:0");
    let link = tokio::spawn(manager_link(cfg.clone(), registry, tx.clone()));

    let mut daemon = Daemon {
        scratch: cfg.log_dir.join(format!("{}.scratch", cfg.name)),
        machine: MachineInstance::new(cfg.spec.clone()),
        log: Arc::new(std::sync::Mutex::new(log)),
        inputs: tx,
        manager: None,
        child: None,
        listening: None,
        next_child: 0,
        last_major: None,
        detail: String::new(),
        cfg,
    };
    tracing::info!(node = %daemon.cfg.name, "daemon up in READY");
    while let Some(input) = rx.recv().await {
        if daemon.handle(input) {
            break;
        }
    }
    link.abort();
    drop(daemon.manager.take());
    drop(registration);
    // Let the BYEs go out before the runtime is torn down.
    tokio::time::sleep(Duration::from_millis(50)).await;
    tracing::info!("daemon shut down");
    Ok(())
}

async fn manager_link(cfg: DaemonConfig, registry: RegistryClient, inputs: mpsc::UnboundedSender<Input>) {
    let mut delay = Duration::from_millis(50);
    loop {
        let record = registry.resolve(&cfg.manager).await;
        match session::connect(record.address.as_str(), &cfg.name, cfg.heartbeat).await {
            Ok((outbox, mut inbox)) => {
                outbox.send(Body::Register {
                    name: cfg.name.clone(),
                    kind: ServiceKind::Daemon,
                    address: "host:0".into(),
                });
                tracing::info!(manager = %record.address, "manager session up");
                if inputs.send(Input::ManagerUp(outbox)).is_err() {
                    return;
                }
                delay = Duration::from_millis(50);
                let reason = loop {
                    let msg = match inbox.recv().await {
                        Some(Incoming::Message(msg)) => msg,
                        Some(Incoming::Closed(reason)) => break Some(reason),
                        None => break None,
                    };
                    let input = match msg.body {
                        Body::Command { name, .. } => Input::Command(name),
                        Body::LogRequest { request, lines } => Input::LogRequest { request, lines },
                        other => {
                            tracing::debug!(kind = other.type_name(), "ignored from manager");
                            continue;
                        }
                    };
                    if inputs.send(input).is_err() {
                        return;
                    }
                };
                tracing::warn!(?reason, "manager session lost");
                if inputs.send(Input::ManagerDown).is_err() {
                    return;
                }
            }
            Err(e) => tracing::debug!(error = %e, "manager unreachable"),
        }
        tokio::time::sleep(delay).await;
        delay = (delay * 2).min(Duration::from_secs(2));
    }
}

impl Daemon {
    /// Returns true once the daemon should exit.
    fn handle(&mut self, input: Input) -> bool {
        match input {
            Input::ManagerUp(outbox) => {
                self.manager = Some(outbox);
                self.resend_current();
                false
            }
            Input::ManagerDown => {
                self.manager = None;
                self.fire(Trigger::Disconnect)
            }
            Input::Command(name) => self.fire(Trigger::Command(name)),
            Input::LogRequest { request, lines } => {
                let text = {
                    let log = self.log.lock().expect("log lock");
                    tail(log.path(), lines as usize).unwrap_or_else(|e| format!("log unavailable: {e}\n"))
                };
                self.send(Body::LogReply { request, text });
                false
            }
            Input::ChildEvent { id, name } => {
                if self.listening != Some(id) {
                    tracing::debug!(%name, "event from a cleaned-up child dropped");
                    return false;
                }
                self.fire(Trigger::Event(name))
            }
            Input::ChildExit { id, code } => {
                if self.child.as_ref().is_some_and(|c| c.id == id) {
                    self.child = None;
                }
                if self.listening == Some(id) {
                    self.listening = None;
                }
                self.detail = format!("exit {code}");
                self.fire(Trigger::Exit(code))
            }
        }
    }

    fn fire(&mut self, trigger: Trigger) -> bool {
        let Some(outcome) = self.machine.fire(&trigger) else {
            if let Trigger::Exit(code) = trigger {
                let spec = self.machine.spec();
                if let Some(err) = spec.first_error_state().map(|s| s.name.clone()) {
                    tracing::warn!(code, state = %err, "unmatched child exit");
                    self.machine.force(&err);
                    self.report_current();
                }
            } else {
                tracing::info!(?trigger, state = self.machine.current(), "no rule, ignored");
            }
            return false;
        };
        tracing::info!(from = %outcome.from, to = %outcome.to, ?trigger, "transition");
        for action in &outcome.actions {
            self.execute(*action);
        }
        self.report_current();
        if !matches!(trigger, Trigger::Exit(_)) {
            self.detail.clear();
        }
        outcome.actions.contains(&Action::Shutdown)
    }

    fn execute(&mut self, action: Action) {
        match action {
            Action::StartProcess => {
                if self.child.is_some() {
                    tracing::warn!("start_process while a child is alive, ignored");
                    return;
                }
                self.next_child += 1;
                let id = self.next_child;
                let scratch = self.scratch.to_string_lossy().into_owned();
                if let Err(e) = std::fs::create_dir_all(&self.scratch) {
                    tracing::warn!(error = %e, "cannot create scratch dir");
                }
                let env = [("MNSM_NODE", self.cfg.name.as_str()), ("MNSM_SCRATCH", scratch.as_str())];
                match Child::spawn(id, &self.cfg.exec, &env, self.log.clone(), self.inputs.clone()) {
                    Ok(child) => {
                        tracing::info!(pid = child.pid, "child started");
                        self.child = Some(child);
                        self.listening = Some(id);
                    }
                    Err(e) => {
                        tracing::error!(error = %e, "spawn failed");
                        let _ = self.inputs.send(Input::ChildExit {
                            id,
                            code: SPAWN_FAILED,
                        });
                    }
                }
            }
            Action::KillProcess => {
                if let Some(child) = &self.child {
                    tracing::info!(pid = child.pid, "killing child");
                    child.kill(self.cfg.kill_grace);
                }
            }
            Action::Cleanup => {
                self.listening = None;
                if self.scratch.exists() {
                    if let Err(e) = std::fs::remove_dir_all(&self.scratch) {
                        tracing::warn!(error = %e, "cleanup failed");
                    }
                }
            }
            Action::Shutdown => tracing::info!("shutdown requested"),
        }
    }

    fn report_current(&mut self) {
        let d = self.machine.current_state().clone();
        let detail = if d.class == StateClass::Error {
            self.detail.clone()
        } else {
            String::new()
        };
        match self.machine.spec().report_decision(&d.name) {
            ReportDecision::Suppress => {}
            ReportDecision::ReportMinor => {
                self.send_report(&d.name, d.class, &d.color, &detail);
            }
            ReportDecision::ReportMajor => {
                self.last_major = Some((d.name.clone(), d.class, d.color.clone(), detail.clone()));
                self.send_report(&d.name, d.class, &d.color, &detail);
            }
        }
    }

    /// After (re)connecting: the current state if reportable, else the last major one.
    fn resend_current(&mut self) {
        let d = self.machine.current_state().clone();
        match self.machine.spec().report_decision(&d.name) {
            ReportDecision::Suppress => {
                let (state, class, color, detail) = self
                    .last_major
                    .clone()
                    .unwrap_or_else(|| (d.name.clone(), StateClass::Major, d.color.clone(), String::new()));
                self.send_report(&state, class, &color, &detail);
            }
            _ => self.report_current(),
        }
    }

    fn send_report(&self, state: &str, class: StateClass, color: &str, detail: &str) {
        self.send(Body::StateReport {
            state: state.into(),
            class,
            color: color.into(),
            detail: detail.into(),
        });
    }

    fn send(&self, body: Body) {
        match &self.manager {
            Some(outbox) => {
                if !outbox.send(body) {
                    tracing::debug!("manager session closed, message dropped");
                }
            }
            None => tracing::debug!(kind = body.type_name(), "no manager session, message dropped"),
        }
    }
}
