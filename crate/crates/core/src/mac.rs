//! Multiply-accumulate accounting.
//!
//! Kernels add to a per-thread running total; a [`MacCounter`] reads the
//! delta since it was started or last reset. Each thread therefore owns an
//! independent count, and counters from parallel workers merge by addition.

use std::cell::Cell;

thread_local! {
    static TOTAL: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record(macs: u64) {
    TOTAL.with(|t| t.set(t.get() + macs));
}

fn total() -> u64 {
    TOTAL.with(Cell::get)
}

#[derive(Debug, Clone)]
pub struct MacCounter {
    base: u64,
}

impl MacCounter {
    pub fn start() -> Self {
        Self { base: total() }
    }

    /// MACs issued on this thread since `start` or the last `reset`.
    pub fn macs(&self) -> u64 {
        total() - self.base
    }

    pub fn reset(&mut self) {
        self.base = total();
    }

    /// Runs `f` and returns its result with the MACs it issued.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let counter = Self::start();
        let out = f();
        (out, counter.macs())
    }
}
