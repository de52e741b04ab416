//! Process and network plumbing shared by the service tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use mnsm_core::wire::{Body, ServiceKind};
use mnsm_service::registry::RegistryClient;
use mnsm_service::session::{self, Inbox, Incoming, Outbox};
use serde_json::Value;

pub const TRIGGER_FARM: &str = include_str!("../../../../demo/trigger-farm.sm");
pub const FASTMON: &str = include_str!("../../../../demo/fastmon.sm");

pub const HEARTBEAT_MS: u64 = 200;

static HEARTBEAT: AtomicU64 = AtomicU64::new(HEARTBEAT_MS);

/// Heartbeat used for every service and controller started from now on.
/// Short by default so failure detection tests stay fast.
pub fn set_heartbeat_ms(ms: u64) {
    HEARTBEAT.store(ms, Ordering::SeqCst);
}

pub fn heartbeat_ms() -> u64 {
    HEARTBEAT.load(Ordering::SeqCst)
}

/// A child process killed when dropped.
pub struct Proc {
    pub child: Child,
    pub first_line: String,
}

impl Proc {
    pub fn pid(&self) -> i32 {
        self.child.id() as i32
    }

    pub fn signal(&self, sig: libc::c_int) {
        unsafe {
            libc::kill(self.pid(), sig);
        }
    }

    pub fn wait_exit(&mut self, within: Duration) -> Option<std::process::ExitStatus> {
        let deadline = Instant::now() + within;
        while Instant::now() < deadline {
            if let Some(status) = self.child.try_wait().unwrap() {
                return Some(status);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        None
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn spawn(bin: &str, args: &[String], read_first_line: bool) -> Proc {
    // MNSM_TEST_LOGS=<filter> shows the services' logs while debugging a test.
    let logs = std::env::var("MNSM_TEST_LOGS").ok();
    let mut child = Command::new(bin)
        .args(args)
        .env("RUST_LOG", logs.as_deref().unwrap_or("warn"))
        .env_remove(mnsm_core::wire::REGISTRY_ENV)
        .stdin(Stdio::null())
        .stdout(if read_first_line { Stdio::piped() } else { Stdio::null() })
        .stderr(if logs.is_some() { Stdio::inherit() } else { Stdio::null() })
        .spawn()
        .unwrap_or_else(|e| panic!("spawning {bin}: {e}"));
    let mut first_line = String::new();
    if read_first_line {
        let stdout = child.stdout.take().unwrap();
        let mut reader = BufReader::new(stdout);
        reader.read_line(&mut first_line).unwrap();
        // Keep draining so the child never blocks on a full pipe.
        std::thread::spawn(move || {
            let mut sink = String::new();
            while reader.read_line(&mut sink).map(|n| n > 0).unwrap_or(false) {
                sink.clear();
            }
        });
    }
    Proc { child, first_line }
}

pub fn registry(port: u16) -> (Proc, String) {
    let p = spawn(
        env!("CARGO_BIN_EXE_mnsm-registry"),
        &[
            "--bind".into(),
            "127.0.0.1".into(),
            "--port".into(),
            port.to_string(),
            "--heartbeat-ms".into(),
            heartbeat_ms().to_string(),
        ],
        true,
    );
    let addr = p
        .first_line
        .trim()
        .strip_prefix("registry listening on ")
        .unwrap_or_else(|| panic!("unexpected registry banner {:?}", p.first_line))
        .to_string();
    (p, addr)
}

pub struct ManagerArgs {
    pub min: u32,
    pub max: u32,
    pub max_errors: u32,
    pub timeout: &'static str,
}

impl Default for ManagerArgs {
    fn default() -> Self {
        ManagerArgs {
            min: 1,
            max: 64,
            max_errors: 0,
            timeout: "10s",
        }
    }
}

/// Starts a manager; returns it with the operator API base URL.
pub fn manager(registry: &str, args: ManagerArgs) -> (Proc, String) {
    let p = spawn(
        env!("CARGO_BIN_EXE_mnsm-manager"),
        &[
            "--registry".into(),
            registry.into(),
            "--listen".into(),
            "127.0.0.1:0".into(),
            "--operator-bind".into(),
            "127.0.0.1".into(),
            "--operator-port".into(),
            "0".into(),
            "--min".into(),
            args.min.to_string(),
            "--max".into(),
            args.max.to_string(),
            "--max-errors".into(),
            args.max_errors.to_string(),
            "--timeout".into(),
            args.timeout.into(),
            "--heartbeat-ms".into(),
            heartbeat_ms().to_string(),
        ],
        true,
    );
    let operator: SocketAddr = p
        .first_line
        .split_whitespace()
        .find_map(|w| w.strip_prefix("operator="))
        .unwrap_or_else(|| panic!("unexpected manager banner {:?}", p.first_line))
        .parse()
        .unwrap();
    (p, format!("http://{operator}"))
}

pub struct DaemonArgs<'a> {
    pub name: &'a str,
    pub spec: &'a Path,
    pub exec: &'a str,
    pub log_dir: &'a Path,
    pub registry: &'a str,
    pub kill_grace_ms: u64,
}

pub fn daemon(a: DaemonArgs<'_>) -> Proc {
    spawn(
        env!("CARGO_BIN_EXE_mnsm-daemon"),
        &[
            "--spec".into(),
            a.spec.display().to_string(),
            "--name".into(),
            a.name.into(),
            "--exec".into(),
            a.exec.into(),
            "--log-dir".into(),
            a.log_dir.display().to_string(),
            "--registry".into(),
            a.registry.into(),
            "--heartbeat-ms".into(),
            heartbeat_ms().to_string(),
            "--kill-grace-ms".into(),
            a.kill_grace_ms.to_string(),
        ],
        false,
    )
}

/// Writes `text` to `dir/name` and returns the path.
pub fn write_file(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

pub async fn wait_for<T, F, Fut>(what: &str, within: Duration, mut probe: F) -> T
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Option<T>>,
{
    let deadline = Instant::now() + within;
    loop {
        if let Some(v) = probe().await {
            return v;
        }
        if Instant::now() > deadline {
            panic!("timed out waiting for {what}");
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
}

pub struct Api {
    pub base: String,
    pub http: reqwest::Client,
}

impl Api {
    pub fn new(base: &str) -> Self {
        Api {
            base: base.to_string(),
            http: reqwest::Client::builder()
                .timeout(Duration::from_secs(15))
                .build()
                .unwrap(),
        }
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn text(&self, path: &str) -> (u16, String) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.text().await.unwrap())
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn put(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self
            .http
            .put(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn aggregate(&self) -> String {
        self.get("/aggregate").await.1["aggregate"].as_str().unwrap_or("").to_string()
    }

    pub async fn node(&self, name: &str) -> Option<Value> {
        let (_, nodes) = self.get("/nodes").await;
        nodes.as_array()?.iter().find(|n| n["node"] == name).cloned()
    }

    /// Waits until exactly `names` are connected and report READY.
    pub async fn await_ready_nodes(&self, names: &[&str], within: Duration) {
        wait_for("nodes READY", within, || async {
            let (_, nodes) = self.get("/nodes").await;
            let nodes = nodes.as_array()?.clone();
            let ready = names.iter().all(|n| {
                nodes.iter().any(|v| {
                    v["node"] == *n && v["connected"] == true && v["state"] == "READY"
                })
            });
            ready.then_some(())
        })
        .await
    }

    pub async fn await_aggregate(&self, state: &str, within: Duration) {
        wait_for(&format!("aggregate {state}"), within, || async {
            (self.aggregate().await == state).then_some(())
        })
        .await
    }
}

/// An upstream controller session.
pub struct Controller {
    pub outbox: Outbox,
    pub inbox: Inbox,
}

impl Controller {
    pub async fn connect(registry: &str, name: &str) -> Controller {
        let client = RegistryClient::new(registry, name);
        let record = tokio::time::timeout(Duration::from_secs(10), client.resolve("manager"))
            .await
            .expect("manager registered");
        let (outbox, inbox) = session::connect(record.address.as_str(), name, Duration::from_millis(heartbeat_ms()))
            .await
            .unwrap();
        outbox.send(Body::Register {
            name: name.into(),
            kind: ServiceKind::Controller,
            address: "host:0".into(),
        });
        Controller { outbox, inbox }
    }

    pub fn send(&self, command: &str) {
        assert!(self.outbox.send(Body::Command {
            name: command.into(),
            target: None,
        }));
    }

    /// Next aggregate report, or None on timeout or close.
    pub async fn next(&mut self, within: Duration) -> Option<String> {
        loop {
            match tokio::time::timeout(within, self.inbox.recv()).await {
                Ok(Some(Incoming::Message(m))) => {
                    if let Body::StateReport { state, .. } = m.body {
                        return Some(state);
                    }
                }
                _ => return None,
            }
        }
    }

    /// Collects aggregates until `last` arrives.
    pub async fn until(&mut self, last: &str, within: Duration) -> Vec<String> {
        let deadline = Instant::now() + within;
        let mut seen = Vec::new();
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.next(left).await {
                Some(s) => {
                    let done = s == last;
                    seen.push(s);
                    if done {
                        return seen;
                    }
                }
                None => panic!("aggregate {last} never arrived; saw {seen:?}"),
            }
        }
    }
}

/// Child for the trigger-farm spec: walks to ALLOCATED, then idles.
pub const FARM_CHILD: &str = r#"echo "child of $MNSM_NODE starting"
echo EVENT connecting
sleep 0.05
echo EVENT mapped
sleep 0.05
echo EVENT allocated
while :; do sleep 0.2; done
"#;

/// Child for the fastmon spec: samples until killed.
pub const FASTMON_CHILD: &str = r#"echo EVENT subscribing
sleep 0.05
echo EVENT sampling
while :; do sleep 0.2; done
"#;
