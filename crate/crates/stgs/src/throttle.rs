//! Token-bucket bandwidth limiter shared by all server connections.

use std::sync::Mutex;
use std::time::{Duration, Instant};

#[derive(Debug)]
pub struct TokenBucket {
    rate: Option<f64>,
    burst: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    /// `rate` in bytes per second; `None` is unlimited.
    pub fn new(rate: Option<f64>, burst: f64) -> Self {
        Self {
            rate,
            burst,
            tokens: burst,
            last: Instant::now(),
        }
    }

    pub fn rate(&self) -> Option<f64> {
        self.rate
    }

    pub fn set_rate(&mut self, rate: Option<f64>, now: Instant) {
        self.refill(now);
        self.rate = rate;
        self.tokens = self.tokens.min(self.burst);
    }

    fn refill(&mut self, now: Instant) {
        if let Some(r) = self.rate {
            let dt = now.saturating_duration_since(self.last).as_secs_f64();
            self.tokens = (self.tokens + dt * r).min(self.burst);
        }
        self.last = now;
    }

    /// Spend `bytes` and return how long the caller must wait before sending them.
    pub fn take(&mut self, bytes: usize, now: Instant) -> Duration {
        self.refill(now);
        match self.rate {
            None => Duration::ZERO,
            Some(r) => {
                self.tokens -= bytes as f64;
                if self.tokens >= 0.0 {
                    Duration::ZERO
                } else {
                    Duration::from_secs_f64(-self.tokens / r)
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct Throttle {
    bucket: Mutex<TokenBucket>,
}

pub const CHUNK: usize = 16 * 1024;

impl Throttle {
    pub fn new(rate: Option<f64>) -> Self {
        Self {
            bucket: Mutex::new(TokenBucket::new(rate, CHUNK as f64)),
        }
    }

    pub fn set_rate(&self, rate: Option<f64>) {
        self.bucket.lock().unwrap().set_rate(rate, Instant::now());
    }

    pub fn rate(&self) -> Option<f64> {
        self.bucket.lock().unwrap().rate()
    }

    pub async fn acquire(&self, bytes: usize) {
        let wait = self.bucket.lock().unwrap().take(bytes, Instant::now());
        if !wait.is_zero() {
            tokio::time::sleep(wait).await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_run_rate_matches() {
        let t0 = Instant::now();
        let mut b = TokenBucket::new(Some(1000.0), 100.0);
        let mut wait = Duration::ZERO;
        for _ in 0..10 {
            wait = b.take(100, t0);
        }
        // 1000 bytes at 1000 B/s with a 100-byte burst
        assert!((wait.as_secs_f64() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn unlimited_never_waits() {
        let mut b = TokenBucket::new(None, 10.0);
        assert_eq!(b.take(1 << 30, Instant::now()), Duration::ZERO);
    }

    #[test]
    fn refill_is_capped_by_burst() {
        let t0 = Instant::now();
        let mut b = TokenBucket::new(Some(10.0), 5.0);
        b.take(5, t0);
        assert_eq!(b.take(5, t0 + Duration::from_secs(100)), Duration::ZERO);
        assert!(b.take(1, t0 + Duration::from_secs(100)) > Duration::ZERO);
    }
}
