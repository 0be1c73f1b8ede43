//! Time source for batch timing.
//!
//! A simulated clock charges a fixed cost per batch and never reads the
//! system time, so round durations are reproducible bit for bit.

use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Monotonic,
    Simulated { batch_cost: Duration },
}

impl Clock {
    pub fn simulated_secs(secs: f64) -> Clock {
        Clock::Simulated {
            batch_cost: secs_to_duration(secs),
        }
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self, Clock::Simulated { .. })
    }

    /// Run `work` and report how long it took on this clock.
    pub fn time<T>(&self, work: impl FnOnce() -> T) -> (T, Duration) {
        match *self {
            Clock::Monotonic => {
                let start = Instant::now();
                let out = work();
                (out, start.elapsed())
            }
            Clock::Simulated { batch_cost } => (work(), batch_cost),
        }
    }
}

/// Seconds to a whole number of nanoseconds, rounding to nearest.
pub fn secs_to_duration(secs: f64) -> Duration {
    Duration::from_nanos((secs * 1e9).round() as u64)
}

/// Median of the samples; the mean of the two middle values for even counts.
pub fn median(samples: &[Duration]) -> Duration {
    if samples.is_empty() {
        return Duration::ZERO;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2
    }
}
