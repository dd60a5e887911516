//! Injected time sources.
//!
//! Ledger timestamps come from a [`TimeSource`] rather than the system
//! clock directly. Scenario runs use the logical clock (a settable monotone
//! counter) so every run is deterministic; production embeddings use the
//! wall clock.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

pub trait TimeSource: Send + Sync {
    /// Milliseconds since epoch, or the current logical tick.
    fn now_ms(&self) -> u64;
}

/// System wall clock in milliseconds since the Unix epoch.
#[derive(Debug, Default)]
pub struct WallClock;

impl TimeSource for WallClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("system clock before Unix epoch")
            .as_millis() as u64
    }
}

/// Monotone logical counter. `set` refuses to move backwards so ledger
/// ordering errors cannot be triggered by a misbehaving driver.
#[derive(Debug, Default)]
pub struct LogicalClock {
    tick: AtomicU64,
}

impl LogicalClock {
    pub fn new() -> Arc<Self> {
        Arc::new(Self {
            tick: AtomicU64::new(0),
        })
    }

    pub fn starting_at(tick: u64) -> Arc<Self> {
        Arc::new(Self {
            tick: AtomicU64::new(tick),
        })
    }

    pub fn set(&self, tick: u64) {
        self.tick.fetch_max(tick, Ordering::SeqCst);
    }

    pub fn advance(&self, by: u64) -> u64 {
        self.tick.fetch_add(by, Ordering::SeqCst) + by
    }
}

impl TimeSource for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.tick.load(Ordering::SeqCst)
    }
}
