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

/// Deterministic clock: every reading advances one second from the start.
#[derive(Debug)]
pub struct StepClock {
    next: AtomicI64,
}

impl StepClock {
    pub fn starting_at(start: DateTime<Utc>) -> Self {
        Self { next: AtomicI64::new(start.timestamp()) }
    }
}

impl Default for StepClock {
    fn default() -> Self {
        Self::starting_at(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap())
    }
}

impl Clock for StepClock {
    fn now(&self) -> DateTime<Utc> {
        let secs = self.next.fetch_add(1, Ordering::SeqCst);
        Utc.timestamp_opt(secs, 0).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_clock_ticks_one_second() {
        let clock = StepClock::default();
        let a = clock.now();
        let b = clock.now();
        assert_eq!((b - a).num_seconds(), 1);
        assert_eq!(a.to_rfc3339(), "2024-01-01T00:00:00+00:00");
    }
}
