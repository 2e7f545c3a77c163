use std::time::Instant;

use chrono::{DateTime, TimeZone, Utc};

/// Source of wall-clock timestamps and stage timings.
///
/// `Frozen` makes every timestamp a fixed instant and every timing zero, which
/// is what stub-mode runs use so their JSON output is byte-for-byte repeatable.
#[derive(Debug, Clone, Copy)]
pub enum Clock {
    System,
    Frozen(DateTime<Utc>),
}

impl Clock {
    pub fn frozen_epoch() -> Self {
        Clock::Frozen(Utc.timestamp_opt(0, 0).single().expect("epoch"))
    }

    pub fn now(&self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Frozen(t) => *t,
        }
    }

    pub fn stopwatch(&self) -> Stopwatch {
        match self {
            Clock::System => Stopwatch(Some(Instant::now())),
            Clock::Frozen(_) => Stopwatch(None),
        }
    }
}

impl Default for Clock {
    fn default() -> Self {
        Clock::System
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Stopwatch(Option<Instant>);

impl Stopwatch {
    pub fn elapsed_us(&self) -> u64 {
        self.0
            .map(|t| t.elapsed().as_micros().min(u128::from(u64::MAX)) as u64)
            .unwrap_or(0)
    }
}
