//! Per-profile request pacing: a token bucket for rate and a counting
//! semaphore for the in-flight ceiling. Both block the calling worker thread.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

struct Bucket {
    tokens: f64,
    last_refill: Instant,
}

pub struct RateGate {
    rps: f64,
    capacity: f64,
    bucket: Mutex<Bucket>,
    slots: Mutex<usize>,
    freed: Condvar,
}

impl RateGate {
    pub fn new(requests_per_second: f64, max_in_flight: usize) -> Self {
        let capacity = requests_per_second.max(1.0);
        Self {
            rps: requests_per_second,
            capacity,
            bucket: Mutex::new(Bucket {
                tokens: capacity,
                last_refill: Instant::now(),
            }),
            slots: Mutex::new(max_in_flight),
            freed: Condvar::new(),
        }
    }

    /// Blocks until both a rate token and an in-flight slot are available.
    pub fn acquire(&self) -> InFlightGuard<'_> {
        self.take_token();
        let mut slots = self.slots.lock().expect("slot lock");
        while *slots == 0 {
            slots = self.freed.wait(slots).expect("slot wait");
        }
        *slots -= 1;
        InFlightGuard { gate: self }
    }

    fn take_token(&self) {
        loop {
            let wait = {
                let mut bucket = self.bucket.lock().expect("bucket lock");
                let elapsed = bucket.last_refill.elapsed().as_secs_f64();
                bucket.tokens = (bucket.tokens + elapsed * self.rps).min(self.capacity);
                bucket.last_refill = Instant::now();
                if bucket.tokens >= 1.0 {
                    bucket.tokens -= 1.0;
                    return;
                }
                (1.0 - bucket.tokens) / self.rps
            };
            std::thread::sleep(Duration::from_secs_f64(wait.min(0.25)));
        }
    }
}

pub struct InFlightGuard<'a> {
    gate: &'a RateGate,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut slots = self.gate.slots.lock().expect("slot lock");
        *slots += 1;
        self.gate.freed.notify_one();
    }
}
