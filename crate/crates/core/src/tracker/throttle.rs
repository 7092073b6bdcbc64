use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::{Timestamp, HOUR};

/// A bucket of `capacity` tokens in which each spent token comes back one
/// window after it was taken. No window of that length ever sees more than
/// `capacity` grants.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBucket {
    capacity: u32,
    window: Timestamp,
    spent: VecDeque<Timestamp>,
}

impl TokenBucket {
    pub fn per_hour(per_hour: u32, _now: Timestamp) -> Self {
        TokenBucket { capacity: per_hour, window: HOUR, spent: VecDeque::new() }
    }

    fn refill(&mut self, now: Timestamp) {
        while self.spent.front().is_some_and(|&t| now - t >= self.window) {
            self.spent.pop_front();
        }
    }

    /// Takes one token if available. A refusal leaves the bucket untouched.
    pub fn try_take(&mut self, now: Timestamp) -> bool {
        self.refill(now);
        if (self.spent.len() as u32) < self.capacity {
            self.spent.push_back(now);
            true
        } else {
            false
        }
    }

    /// Returns the most recently taken token.
    pub fn refund(&mut self) {
        self.spent.pop_back();
    }

    pub fn available(&mut self, now: Timestamp) -> u32 {
        self.refill(now);
        self.capacity - self.spent.len() as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_first_request_refused() {
        let mut b = TokenBucket::per_hour(30, 0);
        for i in 0..30 {
            assert!(b.try_take(i * 60), "request {i}");
        }
        assert!(!b.try_take(30 * 60));
        assert!(!b.try_take(HOUR - 1));
    }

    #[test]
    fn refills_after_window() {
        let mut b = TokenBucket::per_hour(30, 0);
        for _ in 0..30 {
            assert!(b.try_take(0));
        }
        assert!(!b.try_take(0));
        assert!(b.try_take(HOUR));
        assert_eq!(b.available(2 * HOUR), 30);
    }

    #[test]
    fn buckets_are_independent() {
        let mut a = TokenBucket::per_hour(30, 0);
        let mut b = TokenBucket::per_hour(30, 0);
        while a.try_take(0) {}
        assert!(b.try_take(0));
    }
}
