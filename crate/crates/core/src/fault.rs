//! Deliberate gradient faults for mutation-testing the self-check suite.

#[cfg(any(test, feature = "fault-injection"))]
mod imp {
    use std::cell::Cell;

    thread_local! {
        static TANH_SIGN: Cell<bool> = const { Cell::new(false) };
    }

    /// Flips the sign of the tanh backward pass on the current thread.
    pub fn inject_tanh_backward_sign_error(on: bool) {
        TANH_SIGN.with(|c| c.set(on));
    }

    pub(crate) fn tanh_backward_sign_flipped() -> bool {
        TANH_SIGN.with(|c| c.get())
    }
}

#[cfg(not(any(test, feature = "fault-injection")))]
mod imp {
    #[inline(always)]
    pub(crate) fn tanh_backward_sign_flipped() -> bool {
        false
    }
}

#[allow(unused_imports)]
pub use imp::*;
