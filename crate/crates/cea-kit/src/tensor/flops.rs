//! Thread-local multiply-accumulate counter, incremented by the dense kernels
//! (matmul and convolutions). Reset/read around a region to cost it.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

pub fn read() -> u64 {
    MACS.with(|c| c.get())
}

/// Count MACs executed by `f` on this thread.
pub fn counted<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
