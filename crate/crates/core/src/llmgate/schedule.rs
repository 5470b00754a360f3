use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Time source for rate limiting and backoff. Tests use [`VirtualClock`].
pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;
    fn sleep_until(&self, deadline: Duration);
    fn sleep(&self, d: Duration) {
        self.sleep_until(self.now() + d);
    }
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
    fn sleep_until(&self, deadline: Duration) {
        let now = self.now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
    }
}

/// Clock whose time only moves when someone sleeps; sleeping jumps straight
/// to the deadline.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().expect("clock lock")
    }
    fn sleep_until(&self, deadline: Duration) {
        let mut now = self.now.lock().expect("clock lock");
        if deadline > *now {
            *now = deadline;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_backoff_ms: 500 }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt `attempt` (1-based): `base * 2^(attempt-1)`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let shift = attempt.saturating_sub(1).min(16);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(1u64 << shift))
    }
}

const WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug, Default)]
struct LimiterState {
    recent: VecDeque<Duration>,
    last: Duration,
    log: Vec<Duration>,
}

/// Sliding-window limiter: any 60 s window holds at most `per_minute` grants.
///
/// Grant times are reserved under the lock and never decrease, so the window
/// check only needs the grant `per_minute` places back.
#[derive(Debug)]
pub struct RateLimiter {
    per_minute: usize,
    state: Mutex<LimiterState>,
}

impl RateLimiter {
    pub fn new(per_minute: u32) -> Self {
        Self { per_minute: per_minute.max(1) as usize, state: Mutex::new(LimiterState::default()) }
    }

    /// Blocks (on `clock`) until a request may be issued; returns the grant time.
    pub fn acquire(&self, clock: &dyn Clock) -> Duration {
        let grant = {
            let mut st = self.state.lock().expect("limiter lock");
            let mut t = clock.now().max(st.last);
            if st.recent.len() >= self.per_minute {
                let pivot = st.recent[st.recent.len() - self.per_minute];
                t = t.max(pivot + WINDOW);
            }
            while st.recent.front().is_some_and(|&f| f + WINDOW <= t) {
                st.recent.pop_front();
            }
            st.recent.push_back(t);
            st.last = t;
            st.log.push(t);
            t
        };
        clock.sleep_until(grant);
        grant
    }

    /// Every grant issued so far, in grant order.
    pub fn grants(&self) -> Vec<Duration> {
        self.state.lock().expect("limiter lock").log.clone()
    }
}
