//! Registry server and client.
//!
//! A registration lives exactly as long as the registering session: when
//! that session ends (BYE, EOF or silence) the record is removed, unless a
//! newer registration of the same name has replaced it meanwhile.

use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use mnsm_core::wire::{Body, Registry, ServiceKind, ServiceRecord};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::session::{self, Incoming, Inbox, Outbox};

pub const REGISTRY_NAME: &str = "registry";

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Serves the name table on `listener` until the task is aborted.
pub async fn serve(listener: TcpListener, heartbeat: Duration) {
    let table = Arc::new(Mutex::new(Registry::new()));
    loop {
        let Ok((stream, peer)) = listener.accept().await else {
            continue;
        };
        let (outbox, inbox) = session::start(stream, REGISTRY_NAME, heartbeat);
        tracing::debug!(%peer, "registry session opened");
        tokio::spawn(handle(table.clone(), outbox, inbox));
    }
}

async fn handle(table: Arc<Mutex<Registry>>, outbox: Outbox, mut inbox: Inbox) {
    let mut owned: Vec<(String, u64)> = Vec::new();
    while let Some(Incoming::Message(msg)) = inbox.recv().await {
        let reply = match msg.body {
            Body::Register {
                name,
                kind,
                address,
            } => {
                let result = table
                    .lock()
                    .expect("registry lock")
                    .register(&name, kind, &address, now_ms());
                match result {
                    Ok(record) => {
                        tracing::info!(name = %record.name, generation = record.generation, %kind, "registered");
                        owned.push((record.name.clone(), record.generation));
                        Body::LookupReply {
                            name,
                            record: Some(record),
                        }
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, "registration refused");
                        Body::LookupReply { name, record: None }
                    }
                }
            }
            Body::Lookup { name } => {
                let record = table.lock().expect("registry lock").lookup(&name).cloned();
                Body::LookupReply { name, record }
            }
            Body::List { kind } => Body::ListReply {
                records: table.lock().expect("registry lock").list(kind),
            },
            other => {
                tracing::debug!(kind = other.type_name(), "ignored at registry");
                continue;
            }
        };
        if !outbox.send(reply) {
            break;
        }
    }
    let mut table = table.lock().expect("registry lock");
    for (name, generation) in owned {
        if table.remove(&name, generation) {
            tracing::info!(%name, generation, "deregistered");
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("registry at {addr} unreachable: {reason}")]
    Unreachable { addr: String, reason: String },
    #[error("registry did not answer in time")]
    Timeout,
    #[error("registry closed the session")]
    Closed,
    #[error("unexpected reply {0}")]
    Protocol(String),
    #[error("registration of `{0}` refused")]
    Refused(String),
}

#[derive(Debug, Clone)]
pub struct RegistryClient {
    pub addr: String,
    pub me: String,
    pub heartbeat: Duration,
    pub timeout: Duration,
}

impl RegistryClient {
    pub fn new(addr: impl Into<String>, me: impl Into<String>) -> Self {
        RegistryClient {
            addr: addr.into(),
            me: me.into(),
            heartbeat: Duration::from_secs(1),
            timeout: Duration::from_secs(3),
        }
    }

    async fn open(&self) -> Result<(Outbox, Inbox), ClientError> {
        match tokio::time::timeout(
            self.timeout,
            session::connect(self.addr.as_str(), &self.me, self.heartbeat),
        )
        .await
        {
            Ok(Ok(pair)) => Ok(pair),
            Ok(Err(e)) => Err(ClientError::Unreachable {
                addr: self.addr.clone(),
                reason: e.to_string(),
            }),
            Err(_) => Err(ClientError::Timeout),
        }
    }

    async fn ask(&self, outbox: &Outbox, inbox: &mut Inbox, body: Body) -> Result<Body, ClientError> {
        if !outbox.send(body) {
            return Err(ClientError::Closed);
        }
        match tokio::time::timeout(self.timeout, session::next_message(inbox)).await {
            Ok(Some(msg)) => Ok(msg.body),
            Ok(None) => Err(ClientError::Closed),
            Err(_) => Err(ClientError::Timeout),
        }
    }

    pub async fn lookup(&self, name: &str) -> Result<Option<ServiceRecord>, ClientError> {
        let (outbox, mut inbox) = self.open().await?;
        match self
            .ask(&outbox, &mut inbox, Body::Lookup { name: name.into() })
            .await?
        {
            Body::LookupReply { record, .. } => Ok(record),
            other => Err(ClientError::Protocol(other.type_name().into())),
        }
    }

    pub async fn list(&self, kind: Option<ServiceKind>) -> Result<Vec<ServiceRecord>, ClientError> {
        let (outbox, mut inbox) = self.open().await?;
        match self.ask(&outbox, &mut inbox, Body::List { kind }).await? {
            Body::ListReply { records } => Ok(records),
            other => Err(ClientError::Protocol(other.type_name().into())),
        }
    }

    /// Looks `name` up until it appears, backing off between attempts.
    pub async fn resolve(&self, name: &str) -> ServiceRecord {
        let mut delay = Duration::from_millis(50);
        loop {
            match self.lookup(name).await {
                Ok(Some(record)) => return record,
                Ok(None) => tracing::debug!(%name, "not registered yet"),
                Err(e) => tracing::debug!(error = %e, "lookup failed"),
            }
            tokio::time::sleep(delay).await;
            delay = (delay * 2).min(Duration::from_secs(2));
        }
    }

    /// Registers and keeps the registration alive until the returned handle
    /// is dropped, re-registering whenever the registry session is lost.
    pub fn keep_registered(&self, name: &str, kind: ServiceKind, address: &str) -> Registration {
        let (tx, rx) = watch::channel(None);
        let client = self.clone();
        let (name, address) = (name.to_string(), address.to_string());
        let task = tokio::spawn(async move {
            let mut delay = Duration::from_millis(50);
            loop {
                match client.hold(&name, kind, &address, &tx).await {
                    Ok(()) => delay = Duration::from_millis(50),
                    Err(e) => tracing::debug!(error = %e, %name, "registration lost"),
                }
                let _ = tx.send(None);
                tokio::time::sleep(delay).await;
                delay = (delay * 2).min(Duration::from_secs(2));
            }
        });
        Registration { current: rx, task }
    }

    async fn hold(
        &self,
        name: &str,
        kind: ServiceKind,
        address: &str,
        current: &watch::Sender<Option<ServiceRecord>>,
    ) -> Result<(), ClientError> {
        let (outbox, mut inbox) = self.open().await?;
        let body = Body::Register {
            name: name.into(),
            kind,
            address: address.into(),
        };
        match self.ask(&outbox, &mut inbox, body).await? {
            Body::LookupReply {
                record: Some(record),
                ..
            } => {
                tracing::info!(%name, generation = record.generation, "registered with registry");
                let _ = current.send(Some(record));
            }
            Body::LookupReply { record: None, .. } => return Err(ClientError::Refused(name.into())),
            other => return Err(ClientError::Protocol(other.type_name().into())),
        }
        while let Some(item) = inbox.recv().await {
            if let Incoming::Closed(reason) = item {
                tracing::warn!(?reason, "registry session closed");
                break;
            }
        }
        drop(outbox);
        Ok(())
    }
}

/// A live registration. Dropping it deregisters.
pub struct Registration {
    current: watch::Receiver<Option<ServiceRecord>>,
    task: JoinHandle<()>,
}

impl Registration {
    pub fn current(&self) -> Option<ServiceRecord> {
        self.current.borrow().clone()
    }

    /// Waits until registered (again) and returns the record.
    pub async fn registered(&mut self) -> ServiceRecord {
        loop {
            if let Some(r) = self.current.borrow_and_update().clone() {
                return r;
            }
            if self.current.changed().await.is_err() {
                std::future::pending::<()>().await;
            }
        }
    }
}

impl Drop for Registration {
    fn drop(&mut self) {
        self.task.abort();
    }
}
