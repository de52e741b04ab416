//! A framed, heartbeating peer session over one TCP connection.
//!
//! The session task owns the socket. Callers push bodies through an
//! [`Outbox`] and read [`Incoming`] items; the last item is always
//! [`Incoming::Closed`]. HEARTBEAT frames are consumed here and only feed
//! the liveness check.

use std::time::Duration;

use mnsm_core::wire::{Body, Liveness, LivenessVerdict, WireMessage};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpStream, ToSocketAddrs};
use tokio::sync::mpsc;
use tokio::time::{Instant, MissedTickBehavior};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CloseReason {
    /// Peer said BYE.
    Bye,
    /// Peer closed the socket.
    Eof,
    /// Nothing heard for the grace period.
    Silent,
    Io(String),
    /// Our side dropped its outbox or inbox.
    Local,
}

#[derive(Debug)]
pub enum Incoming {
    Message(WireMessage),
    Closed(CloseReason),
}

/// Cloneable sending half. Dropping every clone says BYE and closes.
#[derive(Debug, Clone)]
pub struct Outbox(mpsc::UnboundedSender<Body>);

impl Outbox {
    /// False once the session has ended.
    pub fn send(&self, body: Body) -> bool {
        self.0.send(body).is_ok()
    }

    pub fn is_closed(&self) -> bool {
        self.0.is_closed()
    }
}

pub type Inbox = mpsc::UnboundedReceiver<Incoming>;

pub fn start(stream: TcpStream, me: &str, heartbeat: Duration) -> (Outbox, Inbox) {
    let _ = stream.set_nodelay(true);
    let (out_tx, out_rx) = mpsc::unbounded_channel();
    let (in_tx, in_rx) = mpsc::unbounded_channel();
    tokio::spawn(run(stream, me.to_string(), heartbeat, out_rx, in_tx));
    (Outbox(out_tx), in_rx)
}

pub async fn connect(
    addr: impl ToSocketAddrs,
    me: &str,
    heartbeat: Duration,
) -> std::io::Result<(Outbox, Inbox)> {
    let stream = TcpStream::connect(addr).await?;
    Ok(start(stream, me, heartbeat))
}

struct Writer {
    half: OwnedWriteHalf,
    me: String,
    seq: u64,
}

impl Writer {
    async fn send(&mut self, body: Body) -> std::io::Result<()> {
        let msg = WireMessage::new(self.me.clone(), self.seq, body);
        self.seq += 1;
        let mut line = msg.encode();
        line.push('\n');
        self.half.write_all(line.as_bytes()).await
    }
}

async fn run(
    stream: TcpStream,
    me: String,
    heartbeat: Duration,
    mut out_rx: mpsc::UnboundedReceiver<Body>,
    in_tx: mpsc::UnboundedSender<Incoming>,
) {
    let (read, write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    let mut writer = Writer {
        half: write,
        me,
        seq: 0,
    };
    let started = Instant::now();
    let ms = || started.elapsed().as_millis() as u64;
    let interval_ms = (heartbeat.as_millis() as u64).max(1);
    let mut liveness = Liveness::new(interval_ms, 0);
    // Polling at half the interval keeps our own silences under 1.5 intervals
    // even when data frames reset the heartbeat clock mid-interval.
    let poll_every = (heartbeat / 2).max(Duration::from_millis(1));
    let mut tick = tokio::time::interval_at(started + poll_every, poll_every);
    tick.set_missed_tick_behavior(MissedTickBehavior::Delay);

    let reason = loop {
        // Input first: after a scheduling stall, frames already waiting in
        // the socket must count before the peer is judged silent.
        tokio::select! {
            biased;
            line = lines.next_line() => match line {
                Ok(Some(line)) => {
                    liveness.on_receive(ms());
                    match WireMessage::decode(&line) {
                        Ok(msg) => match msg.body {
                            Body::Heartbeat => {}
                            Body::Bye => break CloseReason::Bye,
                            _ => {
                                if in_tx.send(Incoming::Message(msg)).is_err() {
                                    break CloseReason::Local;
                                }
                            }
                        },
                        Err(e) => tracing::warn!(peer_frame = %line, error = %e, "dropping bad frame"),
                    }
                }
                Ok(None) => break CloseReason::Eof,
                Err(e) => break CloseReason::Io(e.to_string()),
            },
            body = out_rx.recv() => match body {
                Some(body) => {
                    if let Err(e) = writer.send(body).await {
                        break CloseReason::Io(e.to_string());
                    }
                    liveness.on_send(ms());
                }
                None => {
                    let _ = writer.send(Body::Bye).await;
                    break CloseReason::Local;
                }
            },
            _ = tick.tick() => match liveness.poll(ms()) {
                LivenessVerdict::Dead => break CloseReason::Silent,
                LivenessVerdict::Alive { send_heartbeat } => {
                    if send_heartbeat {
                        if let Err(e) = writer.send(Body::Heartbeat).await {
                            break CloseReason::Io(e.to_string());
                        }
                        liveness.on_send(ms());
                    }
                }
            },
            _ = in_tx.closed() => {
                // Whatever was queued before the reader went away still goes out.
                while let Ok(body) = out_rx.try_recv() {
                    if writer.send(body).await.is_err() {
                        break;
                    }
                }
                let _ = writer.send(Body::Bye).await;
                break CloseReason::Local;
            }
        }
    };
    let _ = writer.half.shutdown().await;
    let _ = in_tx.send(Incoming::Closed(reason));
}

/// Reads until the next application message, skipping nothing.
pub async fn next_message(inbox: &mut Inbox) -> Option<WireMessage> {
    match inbox.recv().await? {
        Incoming::Message(m) => Some(m),
        Incoming::Closed(_) => None,
    }
}
