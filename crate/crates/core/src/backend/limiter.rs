use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

const WINDOW: Duration = Duration::from_secs(60);

/// Caps concurrent requests and, optionally, request starts per minute.
#[derive(Debug)]
pub struct RequestLimiter {
    max_in_flight: usize,
    per_minute: u32,
    state: Mutex<State>,
    freed: Condvar,
}

#[derive(Debug, Default)]
struct State {
    in_flight: usize,
    starts: VecDeque<Instant>,
}

/// Releases its in-flight slot on drop.
pub struct Permit<'a> {
    limiter: &'a RequestLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut s = self.limiter.state.lock().unwrap_or_else(|e| e.into_inner());
        s.in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}

impl RequestLimiter {
    pub fn new(max_in_flight: usize, per_minute: u32) -> Self {
        Self {
            max_in_flight: max_in_flight.max(1),
            per_minute,
            state: Mutex::new(State::default()),
            freed: Condvar::new(),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).in_flight
    }

    /// Blocks until a slot is free and the minute budget allows a start.
    pub fn acquire(&self) -> Permit<'_> {
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            while s.in_flight >= self.max_in_flight {
                s = self.freed.wait(s).unwrap_or_else(|e| e.into_inner());
            }
            if self.per_minute == 0 {
                break;
            }
            let now = Instant::now();
            while s.starts.front().is_some_and(|t| now.duration_since(*t) >= WINDOW) {
                s.starts.pop_front();
            }
            if s.starts.len() < self.per_minute as usize {
                s.starts.push_back(now);
                break;
            }
            let wait = WINDOW - now.duration_since(*s.starts.front().expect("budget is full"));
            s = self.freed.wait_timeout(s, wait).unwrap_or_else(|e| e.into_inner()).0;
        }
        s.in_flight += 1;
        Permit { limiter: self }
    }
}
