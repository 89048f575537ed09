//! Injectable time source so replayed runs produce identical records.

use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, TimeZone, Utc};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Starts at a fixed instant and advances one second per reading.
#[derive(Debug)]
pub struct ReplayClock {
    next: AtomicI64,
}

pub const REPLAY_EPOCH: i64 = 1_767_225_600; // 2026-01-01T00:00:00Z

impl ReplayClock {
    pub fn new() -> Self {
        Self::starting_at(REPLAY_EPOCH)
    }

    pub fn starting_at(unix_seconds: i64) -> Self {
        ReplayClock {
            next: AtomicI64::new(unix_seconds),
        }
    }
}

impl Default for ReplayClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for ReplayClock {
    fn now(&self) -> DateTime<Utc> {
        let t = self.next.fetch_add(1, Ordering::SeqCst);
        Utc.timestamp_opt(t, 0).single().expect("replay clock in range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_ticks() {
        let c = ReplayClock::new();
        assert_eq!(c.now().to_rfc3339(), "2026-01-01T00:00:00+00:00");
        assert_eq!(c.now().to_rfc3339(), "2026-01-01T00:00:01+00:00");
    }
}
