//! Real registry, manager and daemon processes with scripted children.

mod common;

use std::time::{Duration, Instant};

use common::*;
use futures::StreamExt;
use mnsm_core::aggregator::{OperatorAction, START};
use mnsm_core::{Manager, ManagerConfig, ManagerEvent, READY};
use serde_json::{json, Value};

const LONG: Duration = Duration::from_secs(20);

struct Farm {
    _registry: Proc,
    registry: String,
    _manager: Proc,
    api: Api,
    dir: tempfile::TempDir,
    daemons: Vec<(String, Proc)>,
}

impl Farm {
    fn start(args: ManagerArgs) -> Farm {
        let (registry_proc, registry) = registry(0);
        let (manager_proc, base) = manager(&registry, args);
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "farm.sm", TRIGGER_FARM);
        write_file(dir.path(), "child.sh", FARM_CHILD);
        Farm {
            _registry: registry_proc,
            registry,
            _manager: manager_proc,
            api: Api::new(&base),
            dir,
            daemons: Vec::new(),
        }
    }

    fn spawn_daemon(&self, name: &str) -> Proc {
        let spec = self.dir.path().join("farm.sm");
        let exec = format!("sh {}", self.dir.path().join("child.sh").display());
        daemon(DaemonArgs {
            name,
            spec: &spec,
            exec: &exec,
            log_dir: self.dir.path(),
            registry: &self.registry,
            kill_grace_ms: 1000,
        })
    }

    fn add(&mut self, name: &str) {
        let p = self.spawn_daemon(name);
        self.daemons.push((name.to_string(), p));
    }

    fn proc(&mut self, name: &str) -> &mut Proc {
        &mut self.daemons.iter_mut().find(|(n, _)| n == name).unwrap().1
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn two_daemons_walk_the_full_cycle() {
    let mut farm = Farm::start(ManagerArgs {
        min: 2,
        ..Default::default()
    });
    farm.add("node-a");
    farm.add("node-b");
    farm.api.await_ready_nodes(&["node-a", "node-b"], LONG).await;

    let mut ctl = Controller::connect(&farm.registry, "ctl").await;
    assert_eq!(ctl.next(LONG).await.as_deref(), Some(READY));
    let mut published = Vec::new();
    for (command, expect) in [
        ("START", "ALLOCATED"),
        ("CONFIGURE", "CONFIGURED"),
        ("RUN", "RUNNING"),
        ("RESET", "READY"),
    ] {
        ctl.send(command);
        published.extend(ctl.until(expect, LONG).await);
    }
    assert_eq!(published, ["ALLOCATED", "CONFIGURED", "RUNNING", "READY"]);

    let (_, agg) = farm.api.get("/aggregate").await;
    assert_eq!(agg["history"], json!(["ALLOCATED", "CONFIGURED", "RUNNING", "READY"]));
    assert_eq!(agg["error_count"], 0);

    // Minor states went to the display but never upstream.
    let (_, nodes) = farm.api.get("/nodes").await;
    for n in nodes.as_array().unwrap() {
        assert_eq!(n["kind"], "node");
        assert_eq!(n["state"], "READY");
        assert_eq!(n["color"], "green");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn forced_kill_of_an_active_daemon_is_an_error() {
    let mut farm = Farm::start(ManagerArgs::default());
    farm.add("a");
    farm.add("b");
    farm.api.await_ready_nodes(&["a", "b"], LONG).await;
    let mut ctl = Controller::connect(&farm.registry, "ctl").await;
    ctl.next(LONG).await;
    ctl.send("START");
    ctl.until("ALLOCATED", LONG).await;

    farm.proc("b").signal(libc::SIGKILL);
    let t0 = Instant::now();
    assert_eq!(ctl.next(LONG).await.as_deref(), Some("ERROR"));
    // A killed process closes its socket; no need to wait for heartbeats.
    assert!(t0.elapsed() < Duration::from_secs(2), "{:?}", t0.elapsed());
    let b = farm.api.node("b").await.unwrap();
    assert_eq!((b["connected"].clone(), b["dead"].clone()), (json!(false), json!(true)));

    // ERROR latches: commands other than RESET go nowhere.
    ctl.send("CONFIGURE");
    ctl.send("RESET");
    assert_eq!(ctl.next(LONG).await.as_deref(), Some(READY));
    let a = farm.api.node("a").await.unwrap();
    assert_eq!(a["state"], "READY");
}

#[tokio::test(flavor = "multi_thread")]
async fn silent_daemon_is_dropped_within_the_liveness_bound() {
    let mut farm = Farm::start(ManagerArgs {
        max_errors: 1,
        ..Default::default()
    });
    farm.add("a");
    farm.add("b");
    farm.api.await_ready_nodes(&["a", "b"], LONG).await;
    let mut ctl = Controller::connect(&farm.registry, "ctl").await;
    ctl.next(LONG).await;
    ctl.send("START");
    ctl.until("ALLOCATED", LONG).await;

    farm.proc("b").signal(libc::SIGSTOP);
    let t0 = Instant::now();
    wait_for("b marked dead", LONG, || async {
        let b = farm.api.node("b").await?;
        (b["dead"] == true).then_some(())
    })
    .await;
    let took = t0.elapsed();
    farm.proc("b").signal(libc::SIGCONT);
    // Last frame heard at most one interval before the stop; dead after
    // three to four silent intervals.
    let interval = Duration::from_millis(HEARTBEAT_MS);
    assert!(took >= interval * 2, "{took:?}");
    assert!(took < interval * 4 + Duration::from_millis(500), "{took:?}");
    // One counted error is within max_errors = 1.
    assert_eq!(farm.api.aggregate().await, "ALLOCATED");
    let (_, agg) = farm.api.get("/aggregate").await;
    assert_eq!(agg["error_count"], 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn controller_reconnect_gets_the_current_aggregate() {
    let mut farm = Farm::start(ManagerArgs::default());
    farm.add("a");
    farm.api.await_ready_nodes(&["a"], LONG).await;
    let mut first = Controller::connect(&farm.registry, "ctl").await;
    first.next(LONG).await;
    first.send("START");
    first.until("ALLOCATED", LONG).await;
    drop(first);

    // The manager carries on without a controller.
    tokio::time::sleep(Duration::from_millis(300)).await;
    assert_eq!(farm.api.aggregate().await, "ALLOCATED");
    let (status, _) = farm.api.post("/command", json!({"name": "CONFIGURE"})).await;
    assert_eq!(status, 200);
    farm.api.await_aggregate("CONFIGURED", LONG).await;

    let mut second = Controller::connect(&farm.registry, "ctl").await;
    assert_eq!(second.next(LONG).await.as_deref(), Some("CONFIGURED"));
}

#[tokio::test(flavor = "multi_thread")]
async fn view_log_returns_the_exact_file_tail() {
    let mut farm = Farm::start(ManagerArgs::default());
    let chatty = "i=0\nwhile [ $i -lt 300 ]; do echo \"chatter line $i: $(printf '%*s' $((i % 13)) '')x\"; i=$((i+1)); done\necho EVENT allocated\nwhile :; do sleep 0.2; done\n";
    write_file(farm.dir.path(), "child.sh", chatty);
    farm.add("talker");
    farm.api.await_ready_nodes(&["talker"], LONG).await;
    farm.api.post("/command", json!({"name": START})).await;
    farm.api.await_aggregate("ALLOCATED", LONG).await;

    let file = std::fs::read_to_string(farm.dir.path().join("talker.log")).unwrap();
    let lines: Vec<&str> = file.split_inclusive('\n').collect();
    assert!(lines.len() >= 301, "{}", lines.len());
    let want: String = lines[lines.len() - 200..].concat();
    let (status, got) = farm.api.text("/nodes/talker/log?lines=200").await;
    assert_eq!(status, 200);
    assert_eq!(got, want);

    let (status, _) = farm.api.text("/nodes/nobody/log?lines=5").await;
    assert_eq!(status, 404);
    farm.proc("talker").signal(libc::SIGKILL);
    wait_for("talker gone", LONG, || async {
        (farm.api.node("talker").await?["connected"] == false).then_some(())
    })
    .await;
    let (status, _) = farm.api.text("/nodes/talker/log?lines=5").await;
    assert_eq!(status, 409);
}

fn sse_records(buf: &mut String) -> Vec<Value> {
    let mut out = Vec::new();
    while let Some(end) = buf.find("\n\n") {
        let block: String = buf.drain(..end + 2).collect();
        for line in block.lines() {
            if let Some(data) = line.strip_prefix("data:") {
                out.push(serde_json::from_str(data.trim_start()).unwrap());
            }
        }
    }
    out
}

fn feed(records: &mut Vec<Value>, buf: &mut String, chunk: &[u8]) {
    buf.push_str(std::str::from_utf8(chunk).unwrap());
    records.extend(sse_records(buf));
}

#[tokio::test(flavor = "multi_thread")]
async fn event_stream_starts_with_a_full_snapshot() {
    let mut farm = Farm::start(ManagerArgs::default());
    for n in ["x1", "x2", "x3"] {
        farm.add(n);
    }
    farm.api.await_ready_nodes(&["x1", "x2", "x3"], LONG).await;

    let resp = farm
        .api
        .http
        .get(format!("{}/events", farm.api.base))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let mut body = resp.bytes_stream();
    let mut buf = String::new();
    let mut records = Vec::new();
    while records.len() < 4 {
        let chunk = tokio::time::timeout(LONG, body.next()).await.unwrap().unwrap().unwrap();
        feed(&mut records, &mut buf, &chunk);
    }
    // Snapshot: every node tile, then the manager line, matching GET /nodes.
    let (_, nodes) = farm.api.get("/nodes").await;
    assert_eq!(Value::Array(records[..3].to_vec()), nodes);
    assert_eq!(records[3]["kind"], "manager");
    assert_eq!(records[3]["aggregate"], READY);

    farm.api.post("/command", json!({"name": START})).await;
    let deadline = Instant::now() + LONG;
    loop {
        let done = records
            .iter()
            .any(|r| r["kind"] == "manager" && r["aggregate"] == "ALLOCATED");
        if done {
            break;
        }
        assert!(Instant::now() < deadline);
        let chunk = tokio::time::timeout(LONG, body.next()).await.unwrap().unwrap().unwrap();
        feed(&mut records, &mut buf, &chunk);
    }
    let tiles: Vec<&Value> = records[4..].iter().filter(|r| r["kind"] == "node").collect();
    for n in ["x1", "x2", "x3"] {
        assert!(tiles.iter().any(|t| t["node"] == n && t["state"] == "ALLOCATED"));
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn config_and_operator_errors() {
    let mut farm = Farm::start(ManagerArgs::default());
    farm.add("a");
    farm.api.await_ready_nodes(&["a"], LONG).await;

    let good = json!({"min_nodes": 5, "max_nodes": 10, "max_errors": 2, "timeout_ms": 30000});
    let (status, body) = farm.api.put("/config", good.clone()).await;
    assert_eq!(status, 200, "{body}");
    let (_, config) = farm.api.get("/config").await;
    assert_eq!(config["requested"], good);
    assert_eq!(config["active"]["min_nodes"], 1);

    let (status, body) = farm
        .api
        .put("/config", json!({"min_nodes": 10, "max_nodes": 5, "max_errors": 0, "timeout_ms": 0}))
        .await;
    assert_eq!(status, 422);
    let fields: Vec<&str> = body["fields"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["field"].as_str().unwrap())
        .collect();
    assert_eq!(fields, ["max_nodes", "timeout_ms"]);
    let (status, _) = farm.api.put("/config", json!({"min_nodes": 1})).await;
    assert_eq!(status, 422);
    let (_, config) = farm.api.get("/config").await;
    assert_eq!(config["requested"], good, "rejected edits leave the request alone");

    let (status, _) = farm.api.post("/command", json!({"name": ""})).await;
    assert_eq!(status, 422);
    for action in ["kill", "restart", "clear"] {
        let (status, _) = farm.api.post(&format!("/nodes/ghost/{action}"), json!({})).await;
        assert_eq!(status, 404, "{action}");
    }
    farm.proc("a").signal(libc::SIGKILL);
    wait_for("a gone", LONG, || async {
        (farm.api.node("a").await?["connected"] == false).then_some(())
    })
    .await;
    let (status, _) = farm.api.post("/nodes/a/kill", json!({})).await;
    assert_eq!(status, 409);
    let (status, body) = farm.api.post("/nodes/a/clear", json!({})).await;
    assert_eq!(status, 200);
    assert_eq!(body["unavailable"], false);

    let (status, page) = farm.api.text("/").await;
    assert_eq!(status, 200);
    assert!(page.contains("/events"));
}

/// Aggregate the core reaches for the same major reports and commands.
fn core_expectation(config: ManagerConfig, events: Vec<ManagerEvent>) -> String {
    let mut m = Manager::new(config);
    for e in events {
        m.ingest(e);
    }
    m.aggregate().to_string()
}

#[tokio::test(flavor = "multi_thread")]
async fn operator_kill_resets_one_node() {
    let mut farm = Farm::start(ManagerArgs::default());
    farm.add("a");
    farm.add("b");
    farm.api.await_ready_nodes(&["a", "b"], LONG).await;
    for (command, state) in [("START", "ALLOCATED"), ("CONFIGURE", "CONFIGURED"), ("RUN", "RUNNING")] {
        farm.api.post("/command", json!({ "name": command })).await;
        farm.api.await_aggregate(state, LONG).await;
    }
    let (status, _) = farm.api.post("/nodes/b/kill", json!({})).await;
    assert_eq!(status, 200);
    let b = wait_for("b back in READY", LONG, || async {
        let b = farm.api.node("b").await?;
        (b["state"] == READY).then_some(b)
    })
    .await;
    assert_eq!(b["active"], false);
    assert_eq!(b["connected"], true);

    let config = ManagerConfig {
        timeout_ms: 10_000,
        ..ManagerConfig::default()
    };
    let mut events = Vec::new();
    for n in ["a", "b"] {
        events.push(ManagerEvent::NodeConnected { node: n.into() });
        events.push(ManagerEvent::major(n, READY));
    }
    for (command, state) in [("START", "ALLOCATED"), ("CONFIGURE", "CONFIGURED"), ("RUN", "RUNNING")] {
        events.push(ManagerEvent::command(command));
        events.push(ManagerEvent::major("a", state));
        events.push(ManagerEvent::major("b", state));
    }
    events.push(ManagerEvent::OperatorAction {
        action: OperatorAction::Kill,
        node: "b".into(),
    });
    events.push(ManagerEvent::major("b", READY));
    let want = core_expectation(config, events);
    tokio::time::sleep(Duration::from_millis(200)).await;
    assert_eq!(farm.api.aggregate().await, want);
    assert_eq!(want, "RUNNING");
}

#[tokio::test(flavor = "multi_thread")]
async fn restart_lets_an_unavailable_node_rejoin() {
    let mut farm = Farm::start(ManagerArgs::default());
    farm.add("a");
    farm.add("b");
    farm.api.await_ready_nodes(&["a", "b"], LONG).await;
    farm.api.post("/command", json!({"name": "START"})).await;
    farm.api.await_aggregate("ALLOCATED", LONG).await;

    farm.proc("b").signal(libc::SIGKILL);
    farm.api.await_aggregate("ERROR", LONG).await;
    farm.api.post("/command", json!({"name": "RESET"})).await;
    farm.api.await_aggregate(READY, LONG).await;

    // Same node name, new process.
    farm.daemons.retain(|(n, _)| n != "b");
    farm.add("b");
    farm.api.await_ready_nodes(&["a", "b"], LONG).await;
    assert_eq!(farm.api.node("b").await.unwrap()["unavailable"], true);

    farm.api.post("/command", json!({"name": "START"})).await;
    farm.api.await_aggregate("ALLOCATED", LONG).await;
    assert_eq!(farm.api.node("b").await.unwrap()["active"], false);
    farm.api.post("/command", json!({"name": "RESET"})).await;
    farm.api.await_aggregate(READY, LONG).await;

    let (status, body) = farm.api.post("/nodes/b/restart", json!({})).await;
    assert_eq!(status, 200);
    assert_eq!(body["unavailable"], false);
    farm.api.await_ready_nodes(&["a", "b"], LONG).await;
    farm.api.post("/command", json!({"name": "START"})).await;
    farm.api.await_aggregate("ALLOCATED", LONG).await;
    let b = farm.api.node("b").await.unwrap();
    assert_eq!((b["active"].clone(), b["state"].clone()), (json!(true), json!("ALLOCATED")));
}
