//! Counting semaphore bounding simultaneous in-flight backend calls.

use std::sync::{Condvar, Mutex};

pub struct InFlightLimiter {
    max: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        assert!(max >= 1, "limiter bound must be >= 1");
        InFlightLimiter { max, in_flight: Mutex::new(0), released: Condvar::new() }
    }

    /// Blocks until a slot is free; the slot is released when the guard drops.
    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut count = self.in_flight.lock().unwrap();
        while *count >= self.max {
            count = self.released.wait(count).unwrap();
        }
        *count += 1;
        InFlightGuard { limiter: self }
    }

    pub fn bound(&self) -> usize {
        self.max
    }
}

pub struct InFlightGuard<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut count = self.limiter.in_flight.lock().unwrap();
        *count -= 1;
        self.limiter.released.notify_one();
    }
}
