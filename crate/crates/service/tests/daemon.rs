//! A real daemon process driven by a stand-in manager.

mod common;

use std::time::{Duration, Instant};

use common::*;
use mnsm_core::wire::{Body, ServiceKind};
use mnsm_core::StateClass;
use mnsm_service::registry::{self, Registration, RegistryClient};
use mnsm_service::session::{self, Inbox, Incoming, Outbox};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use tokio::net::TcpListener;

const LONG: Duration = Duration::from_secs(15);

struct FakeManager {
    registry: String,
    listener: TcpListener,
    _registration: Registration,
    _registry_task: tokio::task::JoinHandle<()>,
}

#[derive(Debug, Clone, PartialEq)]
struct Report {
    state: String,
    class: StateClass,
    color: String,
    detail: String,
}

struct Link {
    outbox: Outbox,
    inbox: Inbox,
}

impl FakeManager {
    async fn start() -> FakeManager {
        let reg = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let registry = reg.local_addr().unwrap().to_string();
        let task = tokio::spawn(registry::serve(reg, Duration::from_millis(HEARTBEAT_MS)));
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let mut registration = RegistryClient::new(&registry, "manager").keep_registered(
            "manager",
            ServiceKind::Manager,
            &addr,
        );
        registration.registered().await;
        FakeManager {
            registry,
            listener,
            _registration: registration,
            _registry_task: task,
        }
    }

    /// Accepts the next daemon session and checks its REGISTER.
    async fn accept(&self, node: &str) -> Link {
        let (stream, _) = tokio::time::timeout(LONG, self.listener.accept())
            .await
            .expect("daemon connects")
            .unwrap();
        let (outbox, mut inbox) = session::start(stream, "manager", Duration::from_millis(HEARTBEAT_MS));
        match session::next_message(&mut inbox).await.map(|m| m.body) {
            Some(Body::Register { name, kind, .. }) => {
                assert_eq!(name, node);
                assert_eq!(kind, ServiceKind::Daemon);
            }
            other => panic!("expected REGISTER, got {other:?}"),
        }
        Link { outbox, inbox }
    }
}

impl Link {
    fn command(&self, name: &str) {
        assert!(self.outbox.send(Body::Command {
            name: name.into(),
            target: None,
        }));
    }

    async fn next(&mut self, within: Duration) -> Option<Report> {
        loop {
            match tokio::time::timeout(within, self.inbox.recv()).await {
                Ok(Some(Incoming::Message(m))) => {
                    if let Body::StateReport {
                        state,
                        class,
                        color,
                        detail,
                    } = m.body
                    {
                        return Some(Report {
                            state,
                            class,
                            color,
                            detail,
                        });
                    }
                }
                _ => return None,
            }
        }
    }

    async fn expect(&mut self, state: &str) -> Report {
        let r = self.next(LONG).await.unwrap_or_else(|| panic!("no report, wanted {state}"));
        assert_eq!(r.state, state, "{r:?}");
        r
    }

    /// Skips reports until `state` arrives.
    async fn until(&mut self, state: &str) -> Report {
        loop {
            let r = self.next(LONG).await.unwrap_or_else(|| panic!("no report, wanted {state}"));
            if r.state == state {
                return r;
            }
        }
    }
}

struct Node {
    proc: Proc,
    dir: tempfile::TempDir,
}

fn node(fake: &FakeManager, name: &str, spec: &str, child: &str, grace_ms: u64) -> Node {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = write_file(dir.path(), "m.sm", spec);
    let child_path = write_file(dir.path(), "child.sh", child);
    let exec = format!("sh {}", child_path.display());
    let proc = daemon(DaemonArgs {
        name,
        spec: &spec_path,
        exec: &exec,
        log_dir: dir.path(),
        registry: &fake.registry,
        kill_grace_ms: grace_ms,
    });
    Node { proc, dir }
}

#[tokio::test(flavor = "multi_thread")]
async fn start_walks_through_events_and_suppresses_micro_states() {
    let fake = FakeManager::start().await;
    let _n = node(&fake, "n1", TRIGGER_FARM, FARM_CHILD, 1000);
    let mut link = fake.accept("n1").await;
    let hello = link.expect("READY").await;
    assert_eq!((hello.class, hello.color.as_str()), (StateClass::Major, "green"));

    link.command("START");
    // ALLOCATING is micro and never shows up.
    let seen: Vec<(String, StateClass)> = [
        link.expect("CONNECTING").await,
        link.expect("MAPPED").await,
        link.expect("ALLOCATED").await,
    ]
    .into_iter()
    .map(|r| (r.state, r.class))
    .collect();
    assert_eq!(
        seen,
        [
            ("CONNECTING".to_string(), StateClass::Minor),
            ("MAPPED".to_string(), StateClass::Minor),
            ("ALLOCATED".to_string(), StateClass::Major),
        ]
    );
    link.command("RESET");
    link.expect("READY").await;
}

/// Spec with one minor state per event name, so reports reveal trigger order.
fn counting_spec(events: usize) -> String {
    let mut s = String::from("machine counter\nstate READY class=major color=green initial\n");
    s.push_str("state LISTENING class=micro color=gray\n");
    for i in 0..events {
        s.push_str(&format!("state S{i} class=minor color=c{i}\n"));
    }
    s.push_str("trans READY on command START do start_process -> LISTENING\n");
    for i in 0..events {
        s.push_str(&format!("trans * on event e{i} -> S{i}\n"));
    }
    s.push_str("trans * on exit any do cleanup -> READY\n");
    s
}

#[tokio::test(flavor = "multi_thread")]
async fn only_well_formed_event_lines_trigger_in_pipe_order() {
    const LINES: usize = 10_000;
    const EVENTS: usize = 100;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xe7e7);
    let near_misses = ["EVENT", "EVENT ", "event e1", "EVENTe1", " EVENT e1", "EVENT e1 e2", "EVENT\te1", "xEVENT e1"];
    let mut slots: Vec<usize> = (0..LINES).collect();
    slots.shuffle(&mut rng);
    let mut event_at: Vec<usize> = slots[..EVENTS].to_vec();
    event_at.sort_unstable();
    let mut text = String::new();
    let mut next_event = 0;
    for line in 0..LINES {
        if event_at.get(next_event) == Some(&line) {
            text.push_str(&format!("EVENT e{next_event}\n"));
            next_event += 1;
        } else if rng.gen_bool(0.2) {
            text.push_str(near_misses[rng.gen_range(0..near_misses.len())]);
            text.push('\n');
        } else {
            let len = rng.gen_range(0..40);
            let chatter: String = (0..len).map(|_| rng.gen_range(b' '..=b'~') as char).collect();
            text.push_str(&chatter);
            text.push('\n');
        }
    }
    // Independent count of the lines a strict reader should accept.
    let expected = text
        .lines()
        .filter(|l| {
            let parts: Vec<&str> = l.split(' ').collect();
            parts.len() == 2 && parts[0] == "EVENT" && !parts[1].is_empty() && !parts[1].contains('\t')
        })
        .count();
    assert_eq!(expected, EVENTS);

    let fake = FakeManager::start().await;
    let n = node(&fake, "counter", &counting_spec(EVENTS), "", 1000);
    write_file(n.dir.path(), "lines.txt", &text);
    write_file(n.dir.path(), "child.sh", &format!("cat {}\n", n.dir.path().join("lines.txt").display()));
    let mut link = fake.accept("counter").await;
    link.expect("READY").await;
    link.command("START");
    let mut states = Vec::new();
    loop {
        let r = link.next(LONG).await.expect("reports keep coming");
        if r.state == "READY" {
            break;
        }
        states.push(r.state);
    }
    let want: Vec<String> = (0..EVENTS).map(|i| format!("S{i}")).collect();
    assert_eq!(states, want);

    // Every line went to the log, events included.
    let log = std::fs::read_to_string(n.dir.path().join("counter.log")).unwrap();
    assert_eq!(log, text);
}

const GRACE_SPEC: &str = "\
machine grace
state READY class=major color=green initial
state BUSY class=major color=blue
state KILLED class=error color=red
trans READY on command START do start_process -> BUSY
trans BUSY on command STOP do kill_process -> BUSY
trans BUSY on exit 137 do cleanup -> KILLED
trans BUSY on exit any do cleanup -> READY
";

#[tokio::test(flavor = "multi_thread")]
async fn a_child_ignoring_sigterm_is_killed_after_the_grace() {
    let fake = FakeManager::start().await;
    let stubborn = "trap '' TERM\necho EVENT up\nwhile :; do sleep 0.05; done\n";
    let _n = node(&fake, "g", GRACE_SPEC, stubborn, 1000);
    let mut link = fake.accept("g").await;
    link.expect("READY").await;
    link.command("START");
    link.expect("BUSY").await;
    tokio::time::sleep(Duration::from_millis(200)).await;
    let t0 = Instant::now();
    link.command("STOP");
    link.expect("BUSY").await;
    let r = link.expect("KILLED").await;
    let took = t0.elapsed();
    assert_eq!(r.detail, "exit 137");
    assert_eq!(r.class, StateClass::Error);
    assert!(took >= Duration::from_millis(1000), "{took:?}");
    assert!(took < Duration::from_millis(2000), "{took:?}");
}

#[tokio::test(flavor = "multi_thread")]
async fn a_polite_child_exits_on_sigterm() {
    let fake = FakeManager::start().await;
    let _n = node(&fake, "p", GRACE_SPEC, "echo hi\nexec sleep 30\n", 5000);
    let mut link = fake.accept("p").await;
    link.expect("READY").await;
    link.command("START");
    link.expect("BUSY").await;
    let t0 = Instant::now();
    link.command("STOP");
    link.expect("BUSY").await;
    // 143 = 128 + SIGTERM, which the spec maps back to READY.
    link.expect("READY").await;
    assert!(t0.elapsed() < Duration::from_secs(2));
}

#[tokio::test(flavor = "multi_thread")]
async fn exits_become_triggers() {
    let fake = FakeManager::start().await;
    // Nonzero exit matches the spec's crash rule.
    let n = node(&fake, "x", TRIGGER_FARM, "echo EVENT allocated\nexit 3\n", 1000);
    let mut link = fake.accept("x").await;
    link.expect("READY").await;
    link.command("START");
    link.expect("ALLOCATED").await;
    let r = link.expect("CRASHED").await;
    assert_eq!(r.detail, "exit 3");
    assert_eq!(r.color, "red");
    // The scratch dir made for the child is gone after cleanup.
    assert!(!n.dir.path().join("x.scratch").exists());
    link.command("RESET");
    link.expect("READY").await;

    // A missing program is exit 127.
    write_file(n.dir.path(), "child.sh", "exec /definitely/not/here\n");
    link.command("START");
    let r = link.expect("CRASHED").await;
    assert_eq!(r.detail, "exit 127");
}

#[tokio::test(flavor = "multi_thread")]
async fn unmatched_exit_forces_the_first_error_state() {
    let spec = "\
machine strict
state READY class=major color=green initial
state WORKING class=major color=blue
state BROKEN class=error color=red
state ALSO_BROKEN class=error color=maroon
trans READY on command START do start_process -> WORKING
trans * on command RESET do kill_process,cleanup -> READY
";
    let fake = FakeManager::start().await;
    let _n = node(&fake, "s", spec, "exit 0\n", 1000);
    let mut link = fake.accept("s").await;
    link.expect("READY").await;
    link.command("START");
    link.expect("WORKING").await;
    let r = link.expect("BROKEN").await;
    assert_eq!(r.detail, "exit 0");
}

#[tokio::test(flavor = "multi_thread")]
async fn manager_loss_is_a_disconnect_and_state_is_resent_once() {
    let fake = FakeManager::start().await;
    let n = node(&fake, "d", TRIGGER_FARM, &format!("echo \"pid $$\"\n{FARM_CHILD}"), 1000);
    let mut link = fake.accept("d").await;
    link.expect("READY").await;
    link.command("START");
    link.until("ALLOCATED").await;
    let log = std::fs::read_to_string(n.dir.path().join("d.log")).unwrap();
    let pid: i32 = log
        .lines()
        .find_map(|l| l.strip_prefix("pid "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(unsafe { libc::kill(pid, 0) }, 0, "child alive");

    drop(link);
    let mut link = fake.accept("d").await;
    // The disconnect rule killed the child and returned to READY.
    let first = link.expect("READY").await;
    assert_eq!(first.class, StateClass::Major);
    assert!(link.next(Duration::from_millis(700)).await.is_none(), "state re-sent more than once");
    assert_ne!(unsafe { libc::kill(pid, 0) }, 0, "child still alive");
}

#[tokio::test(flavor = "multi_thread")]
async fn shutdown_deregisters_and_exits() {
    let fake = FakeManager::start().await;
    let mut n = node(&fake, "bye", TRIGGER_FARM, FARM_CHILD, 1000);
    let mut link = fake.accept("bye").await;
    link.expect("READY").await;
    let client = RegistryClient::new(&fake.registry, "probe");
    wait_for("daemon registered", LONG, || async { client.lookup("bye").await.ok().flatten() }).await;
    link.command("SHUTDOWN");
    link.expect("READY").await;
    let status = n.proc.wait_exit(LONG).expect("daemon exits");
    assert!(status.success(), "{status:?}");
    wait_for("deregistered", LONG, || async {
        client.lookup("bye").await.ok().filter(Option::is_none).map(|_| ())
    })
    .await;
}

#[tokio::test(flavor = "multi_thread")]
async fn bad_spec_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "bad.sm", "machine x\nstate NOTREADY class=major color=red initial\n");
    let mut p = daemon(DaemonArgs {
        name: "bad",
        spec: &spec,
        exec: "true",
        log_dir: dir.path(),
        registry: "127.0.0.1:1",
        kill_grace_ms: 100,
    });
    let status = p.wait_exit(LONG).expect("exits");
    assert!(!status.success());
}
