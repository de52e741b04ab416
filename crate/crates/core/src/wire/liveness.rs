//! Heartbeat bookkeeping for one side of a session, on an abstract clock.
//!
//! The owner calls [`Liveness::poll`] once per interval. A peer that has been
//! silent for `grace × interval` is declared dead at the first poll after
//! that, so with a poll every interval the detection lands in
//! `[grace, grace + 1) × interval` after the last message heard.

pub const DEFAULT_GRACE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LivenessVerdict {
    Alive { send_heartbeat: bool },
    Dead,
}

#[derive(Debug, Clone)]
pub struct Liveness {
    interval: u64,
    grace: u64,
    last_heard: u64,
    last_sent: u64,
    dead: bool,
}

impl Liveness {
    /// `interval` in clock units; the session counts as opened at `now`.
    pub fn new(interval: u64, now: u64) -> Self {
        Self::with_grace(interval, DEFAULT_GRACE, now)
    }

    pub fn with_grace(interval: u64, grace: u64, now: u64) -> Self {
        assert!(interval > 0 && grace > 0);
        Liveness {
            interval,
            grace,
            last_heard: now,
            last_sent: now,
            dead: false,
        }
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    pub fn on_receive(&mut self, now: u64) {
        self.last_heard = self.last_heard.max(now);
    }

    pub fn on_send(&mut self, now: u64) {
        self.last_sent = self.last_sent.max(now);
    }

    pub fn last_heard(&self) -> u64 {
        self.last_heard
    }

    pub fn is_dead(&self) -> bool {
        self.dead
    }

    pub fn poll(&mut self, now: u64) -> LivenessVerdict {
        if self.dead || now.saturating_sub(self.last_heard) >= self.grace * self.interval {
            self.dead = true;
            return LivenessVerdict::Dead;
        }
        LivenessVerdict::Alive {
            send_heartbeat: now.saturating_sub(self.last_sent) >= self.interval,
        }
    }
}
