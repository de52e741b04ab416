//! The deployable manager.
//!
//! Every source of input (peer sessions, timers, operator requests) is turned
//! into an [`Input`] on one channel. [`run_loop`] is its only consumer: it
//! feeds the aggregation core and executes the returned effects in order.

pub mod api;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::time::Duration;

use mnsm_core::aggregator::{
    DisplayUpdate, Effect, ManagerView, NodeView, OperatorAction, Phase, TimerKind, ERROR,
};
use mnsm_core::config::ConfigError;
use mnsm_core::wire::{Body, ServiceKind};
use mnsm_core::{Manager, ManagerConfig, ManagerEvent, StateClass};
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::registry::{Registration, RegistryClient};
use crate::session::{self, Incoming, Outbox};

/// Display updates kept for slow consoles before they are dropped.
pub const DISPLAY_BACKLOG: usize = 1000;

#[derive(Debug, Clone)]
pub struct ManagerOptions {
    pub name: String,
    pub registry: String,
    pub config: ManagerConfig,
    pub listen: SocketAddr,
    /// Host part of the address advertised in the registry.
    pub advertise_host: String,
    pub operator: SocketAddr,
    pub heartbeat: Duration,
    pub log_timeout: Duration,
}

pub struct Running {
    pub peers: SocketAddr,
    pub operator: SocketAddr,
    pub handle: ManagerHandle,
    tasks: Vec<JoinHandle<()>>,
    _registration: Registration,
}

impl Running {
    /// Runs until the process is stopped.
    pub async fn wait(mut self) {
        for task in self.tasks.drain(..) {
            let _ = task.await;
        }
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        for task in &self.tasks {
            task.abort();
        }
    }
}

/// Binds both listeners, registers and starts serving.
pub async fn start(opts: ManagerOptions) -> anyhow::Result<Running> {
    opts.config
        .validate()
        .map_err(|e| anyhow::anyhow!("unusable configuration: {e}"))?;
    let peers = TcpListener::bind(opts.listen).await?;
    let peers_addr = peers.local_addr()?;
    let operator = TcpListener::bind(opts.operator).await?;
    let operator_addr = operator.local_addr()?;

    let (tx, rx) = mpsc::unbounded_channel();
    let (display, _) = broadcast::channel(DISPLAY_BACKLOG);
    let handle = ManagerHandle {
        inputs: tx.clone(),
        log_timeout: opts.log_timeout,
    };
    let state = Loop {
        core: Manager::new(opts.config),
        peers: HashMap::new(),
        daemons: BTreeMap::new(),
        timers: HashMap::new(),
        history: Vec::new(),
        display,
        inputs: tx.clone(),
        log_requests: HashMap::new(),
        next_request: 0,
    };
    let mut tasks = vec![
        tokio::spawn(run_loop(state, rx)),
        tokio::spawn(accept(peers, opts.heartbeat, opts.name.clone(), tx)),
    ];
    let app = api::router(handle.clone());
    tasks.push(tokio::spawn(async move {
        if let Err(e) = axum::serve(operator, app).await {
            tracing::error!(error = %e, "operator API stopped");
        }
    }));

    let registry = RegistryClient {
        heartbeat: opts.heartbeat,
        ..RegistryClient::new(&opts.registry, &opts.name)
    };
    let address = format!("{}:{}", opts.advertise_host, peers_addr.port());
    let registration = registry.keep_registered(&opts.name, ServiceKind::Manager, &address);
    tracing::info!(%address, operator = %operator_addr, "manager serving");
    Ok(Running {
        peers: peers_addr,
        operator: operator_addr,
        handle,
        tasks,
        _registration: registration,
    })
}

type SessionId = u64;

#[derive(Debug)]
pub enum Input {
    PeerJoined {
        session: SessionId,
        name: String,
        kind: ServiceKind,
        outbox: Outbox,
    },
    PeerMessage {
        session: SessionId,
        body: Body,
    },
    PeerClosed {
        session: SessionId,
    },
    Timer {
        kind: TimerKind,
        generation: u64,
    },
    Api(ApiRequest),
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateView {
    #[serde(flatten)]
    pub manager: ManagerView,
    /// Every aggregate published upstream, oldest first.
    pub history: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigView {
    pub active: ManagerConfig,
    /// Takes effect at the next START or RESET.
    pub requested: ManagerConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionError {
    UnknownNode,
    NotConnected,
    Refused(String),
}

pub type Reply<T> = oneshot::Sender<T>;

#[derive(Debug)]
pub enum ApiRequest {
    Nodes(Reply<Vec<NodeView>>),
    Aggregate(Reply<AggregateView>),
    Config(Reply<ConfigView>),
    SetConfig(ManagerConfig, Reply<Result<ConfigView, ConfigError>>),
    Command(String, Reply<ManagerView>),
    Operator(OperatorAction, String, Reply<Result<NodeView, ActionError>>),
    Log {
        node: String,
        lines: u32,
        reply: Reply<Result<oneshot::Receiver<String>, ActionError>>,
    },
    /// Snapshot and subscription taken in one step, so nothing falls between.
    Subscribe(Reply<(Vec<DisplayUpdate>, broadcast::Receiver<DisplayUpdate>)>),
}

/// Cheap handle used by the operator API and tests.
#[derive(Debug, Clone)]
pub struct ManagerHandle {
    inputs: mpsc::UnboundedSender<Input>,
    pub log_timeout: Duration,
}

impl ManagerHandle {
    pub async fn ask<T>(&self, make: impl FnOnce(Reply<T>) -> ApiRequest) -> Option<T> {
        let (tx, rx) = oneshot::channel();
        self.inputs.send(Input::Api(make(tx))).ok()?;
        rx.await.ok()
    }
}

struct Peer {
    name: String,
    kind: ServiceKind,
    outbox: Outbox,
}

struct Loop {
    core: Manager,
    peers: HashMap<SessionId, Peer>,
    /// Current session of each connected daemon.
    daemons: BTreeMap<String, SessionId>,
    timers: HashMap<(TimerKind, u64), JoinHandle<()>>,
    history: Vec<String>,
    display: broadcast::Sender<DisplayUpdate>,
    inputs: mpsc::UnboundedSender<Input>,
    log_requests: HashMap<u64, oneshot::Sender<String>>,
    next_request: u64,
}

async fn accept(listener: TcpListener, heartbeat: Duration, me: String, inputs: mpsc::UnboundedSender<Input>) {
    let mut next: SessionId = 0;
    loop {
        let Ok((stream, peer)) = listener.accept().await else {
            continue;
        };
        next += 1;
        let session = next;
        let (outbox, mut inbox) = session::start(stream, &me, heartbeat);
        let inputs = inputs.clone();
        tokio::spawn(async move {
            // A peer names itself with REGISTER before anything else counts.
            let (name, kind) = loop {
                match inbox.recv().await {
                    Some(Incoming::Message(msg)) => {
                        if let Body::Register { name, kind, .. } = msg.body {
                            break (name, kind);
                        }
                        tracing::warn!(%peer, kind = msg.body.type_name(), "message before REGISTER dropped");
                    }
                    _ => return,
                }
            };
            if inputs
                .send(Input::PeerJoined {
                    session,
                    name,
                    kind,
                    outbox,
                })
                .is_err()
            {
                return;
            }
            let reason = loop {
                match inbox.recv().await {
                    Some(Incoming::Message(msg)) => {
                        if inputs.send(Input::PeerMessage { session, body: msg.body }).is_err() {
                            return;
                        }
                    }
                    Some(Incoming::Closed(reason)) => break Some(reason),
                    None => break None,
                }
            };
            tracing::debug!(session, ?reason, "peer session closed");
            let _ = inputs.send(Input::PeerClosed { session });
        });
    }
}

async fn run_loop(mut state: Loop, mut rx: mpsc::UnboundedReceiver<Input>) {
    while let Some(input) = rx.recv().await {
        state.handle(input);
    }
}

impl Loop {
    fn handle(&mut self, input: Input) {
        match input {
            Input::PeerJoined {
                session,
                name,
                kind,
                outbox,
            } => self.joined(session, name, kind, outbox),
            Input::PeerMessage { session, body } => self.message(session, body),
            Input::PeerClosed { session } => {
                let Some(peer) = self.peers.remove(&session) else {
                    return;
                };
                tracing::info!(name = %peer.name, kind = %peer.kind, "peer left");
                if peer.kind == ServiceKind::Daemon && self.daemons.get(&peer.name) == Some(&session) {
                    self.daemons.remove(&peer.name);
                    self.ingest(ManagerEvent::NodeDisconnected { node: peer.name });
                }
            }
            Input::Timer { kind, generation } => {
                self.timers.remove(&(kind, generation));
                self.ingest(ManagerEvent::TimerFired { kind, generation });
            }
            Input::Api(req) => self.api(req),
        }
    }

    fn joined(&mut self, session: SessionId, name: String, kind: ServiceKind, outbox: Outbox) {
        tracing::info!(%name, %kind, session, "peer joined");
        match kind {
            ServiceKind::Daemon => {
                if let Some(old) = self.daemons.insert(name.clone(), session) {
                    // The old session is closed by dropping its outbox.
                    self.peers.remove(&old);
                    self.ingest(ManagerEvent::NodeDisconnected { node: name.clone() });
                }
                self.peers.insert(session, Peer { name: name.clone(), kind, outbox });
                self.ingest(ManagerEvent::NodeConnected { node: name });
            }
            ServiceKind::Controller => {
                outbox.send(aggregate_report(self.core.aggregate()));
                self.peers.insert(session, Peer { name, kind, outbox });
            }
            ServiceKind::Manager => {
                tracing::warn!(%name, "another manager connected, ignoring it");
            }
        }
    }

    fn message(&mut self, session: SessionId, body: Body) {
        let Some(peer) = self.peers.get(&session) else {
            return;
        };
        match (peer.kind, body) {
            (
                ServiceKind::Daemon,
                Body::StateReport {
                    state,
                    class,
                    color,
                    detail,
                },
            ) => {
                let node = peer.name.clone();
                self.ingest(ManagerEvent::Report {
                    node,
                    state,
                    class,
                    color,
                    detail,
                });
            }
            (ServiceKind::Daemon, Body::LogReply { request, text }) => {
                if let Some(reply) = self.log_requests.remove(&request) {
                    let _ = reply.send(text);
                }
            }
            (ServiceKind::Controller, Body::Command { name, target: None }) => {
                self.ingest(ManagerEvent::ControllerCommand { name });
            }
            (ServiceKind::Controller, Body::Command { name, target: Some(node) }) => {
                self.send_command(&node, &name);
            }
            (_, other) => {
                tracing::debug!(peer = %peer.name, kind = other.type_name(), "unexpected message dropped");
            }
        }
    }

    fn api(&mut self, req: ApiRequest) {
        match req {
            ApiRequest::Nodes(reply) => {
                let _ = reply.send(self.core.snapshot().nodes);
            }
            ApiRequest::Aggregate(reply) => {
                let _ = reply.send(AggregateView {
                    manager: self.core.manager_view(),
                    history: self.history.clone(),
                });
            }
            ApiRequest::Config(reply) => {
                let _ = reply.send(self.config_view());
            }
            ApiRequest::SetConfig(config, reply) => {
                let result = config.validate().map(|()| {
                    self.ingest(ManagerEvent::ConfigChange { config });
                    self.config_view()
                });
                let _ = reply.send(result);
            }
            ApiRequest::Command(name, reply) => {
                self.ingest(ManagerEvent::ControllerCommand { name });
                let _ = reply.send(self.core.manager_view());
            }
            ApiRequest::Operator(action, node, reply) => {
                let result = self.operator(action, &node);
                let _ = reply.send(result);
            }
            ApiRequest::Log { node, lines, reply } => {
                let result = match self.core.node(&node) {
                    None => Err(ActionError::UnknownNode),
                    Some(_) => match self.daemons.get(&node).and_then(|s| self.peers.get(s)) {
                        None => Err(ActionError::NotConnected),
                        Some(peer) => {
                            self.next_request += 1;
                            let request = self.next_request;
                            let (tx, rx) = oneshot::channel();
                            if peer.outbox.send(Body::LogRequest { request, lines }) {
                                self.log_requests.insert(request, tx);
                                Ok(rx)
                            } else {
                                Err(ActionError::NotConnected)
                            }
                        }
                    },
                };
                // Requests whose caller gave up are not kept around.
                self.log_requests.retain(|_, tx| !tx.is_closed());
                let _ = reply.send(result);
            }
            ApiRequest::Subscribe(reply) => {
                let rx = self.display.subscribe();
                let _ = reply.send((self.core.snapshot().into_updates(), rx));
            }
        }
    }

    fn operator(&mut self, action: OperatorAction, node: &str) -> Result<NodeView, ActionError> {
        let Some(record) = self.core.node(node) else {
            return Err(ActionError::UnknownNode);
        };
        if action == OperatorAction::Kill {
            if !record.connected {
                return Err(ActionError::NotConnected);
            }
            if *self.core.phase() == Phase::Errored {
                return Err(ActionError::Refused("manager is in ERROR; issue RESET".into()));
            }
        }
        self.ingest(ManagerEvent::OperatorAction {
            action,
            node: node.to_string(),
        });
        let view = self
            .core
            .snapshot()
            .nodes
            .into_iter()
            .find(|n| n.node == node)
            .expect("known node has a view");
        Ok(view)
    }

    fn config_view(&self) -> ConfigView {
        ConfigView {
            active: *self.core.config(),
            requested: *self.core.requested_config(),
        }
    }

    fn ingest(&mut self, event: ManagerEvent) {
        let effects = self.core.ingest(event);
        for effect in effects {
            self.execute(effect);
        }
    }

    fn execute(&mut self, effect: Effect) {
        match effect {
            Effect::SendToNode { node, command } => self.send_command(&node, &command),
            Effect::SendToAll { command, .. } => {
                for session in self.daemons.values() {
                    if let Some(peer) = self.peers.get(session) {
                        peer.outbox.send(Body::Command {
                            name: command.clone(),
                            target: None,
                        });
                    }
                }
            }
            Effect::SetTimer {
                kind,
                generation,
                after_ms,
            } => {
                let inputs = self.inputs.clone();
                let task = tokio::spawn(async move {
                    tokio::time::sleep(Duration::from_millis(after_ms)).await;
                    let _ = inputs.send(Input::Timer { kind, generation });
                });
                self.timers.insert((kind, generation), task);
            }
            Effect::CancelTimer { kind, generation } => {
                if let Some(task) = self.timers.remove(&(kind, generation)) {
                    task.abort();
                }
            }
            Effect::PublishAggregate { state } => {
                tracing::info!(%state, "aggregate");
                for peer in self.peers.values() {
                    if peer.kind == ServiceKind::Controller {
                        peer.outbox.send(aggregate_report(&state));
                    }
                }
                self.history.push(state);
            }
            Effect::Display { update } => {
                // No receivers is fine; lagging receivers notice on their own.
                let _ = self.display.send(update);
            }
            Effect::Log { line } => tracing::info!("{line}"),
        }
    }

    fn send_command(&self, node: &str, command: &str) {
        match self.daemons.get(node).and_then(|s| self.peers.get(s)) {
            Some(peer) => {
                peer.outbox.send(Body::Command {
                    name: command.to_string(),
                    target: None,
                });
            }
            None => tracing::debug!(%node, %command, "node not connected, command dropped"),
        }
    }
}

/// The aggregate as a controller sees it.
pub fn aggregate_report(state: &str) -> Body {
    Body::StateReport {
        state: state.to_string(),
        class: if state == ERROR {
            StateClass::Error
        } else {
            StateClass::Major
        },
        color: String::new(),
        detail: String::new(),
    }
}
