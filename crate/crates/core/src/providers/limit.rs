use parking_lot::{Condvar, Mutex};

/// Counting semaphore capping in-flight remote calls.
pub struct CallLimiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct CallPermit<'a> {
    limiter: &'a CallLimiter,
}

impl CallLimiter {
    pub const DEFAULT_MAX: usize = 4;

    pub fn new(max: usize) -> Self {
        CallLimiter { max: max.max(1), in_flight: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock()
    }

    pub fn acquire(&self) -> CallPermit<'_> {
        let mut n = self.in_flight.lock();
        while *n >= self.max {
            self.freed.wait(&mut n);
        }
        *n += 1;
        CallPermit { limiter: self }
    }
}

impl Default for CallLimiter {
    fn default() -> Self {
        CallLimiter::new(Self::DEFAULT_MAX)
    }
}

impl Drop for CallPermit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock();
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}
