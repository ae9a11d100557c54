//! Per-thread multiply-accumulate counter for network forward passes.
//!
//! Every convolution forward records `Cout·Cin·k²·H'·W'` MACs on the calling
//! thread. Callers bracket a stage with [`reset`] / [`macs`] to measure it.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    MACS.with(|m| m.set(0));
}

pub fn macs() -> u64 {
    MACS.with(|m| m.get())
}

pub(crate) fn record(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}

/// Runs `f` and returns its result with the MACs it recorded.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = macs();
    let out = f();
    (out, macs() - before)
}

thread_local! {
    static BRANCHES: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Starts fingerprinting the branch pattern (relu signs, clamp hits, pool
/// argmaxes) of subsequent forward passes on this thread.
pub fn track_branches() {
    BRANCHES.with(|b| b.set(Some(0xcbf2_9ce4_8422_2325)));
}

/// Stops tracking and returns the fingerprint gathered since
/// [`track_branches`].
pub fn take_branches() -> Option<u64> {
    BRANCHES.with(|b| b.replace(None))
}

pub(crate) fn tracking_branches() -> bool {
    BRANCHES.with(|b| b.get().is_some())
}

pub(crate) fn note_branches(codes: impl Iterator<Item = u64>) {
    BRANCHES.with(|b| {
        if let Some(mut h) = b.get() {
            for c in codes {
                h = (h ^ c).wrapping_mul(0x0000_0100_0000_01b3);
            }
            b.set(Some(h));
        }
    });
}
