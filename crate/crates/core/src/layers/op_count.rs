//! Per-thread arithmetic counters for the embedding-operation kernels.

use std::cell::Cell;

thread_local! {
    static OPS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    OPS.with(|c| c.set(0));
}

pub fn get() -> u64 {
    OPS.with(|c| c.get())
}

pub(crate) fn add(n: u64) {
    OPS.with(|c| c.set(c.get() + n));
}
