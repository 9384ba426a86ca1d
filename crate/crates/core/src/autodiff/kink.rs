//! Records which side of every non-smooth branch a computation took.
//!
//! Finite differences are only meaningful when both probes stay on the same
//! smooth piece of the function. While tracing is enabled on a thread, every
//! piecewise decision (ReLU sign, clamp region, interpolation cell, plane
//! hit, depth order) is folded into an order-independent signature; two
//! evaluations with equal signatures lie on the same smooth piece.

use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};

static ACTIVE: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static SIG: Cell<Option<u64>> = const { Cell::new(None) };
}

#[inline(always)]
pub(crate) fn enabled() -> bool {
    ACTIVE.load(Ordering::Relaxed) != 0 && SIG.with(|s| s.get().is_some())
}

/// Fold one branch decision into the current signature.
#[inline(always)]
pub(crate) fn note(site: u64, decision: u64) {
    if ACTIVE.load(Ordering::Relaxed) == 0 {
        return;
    }
    SIG.with(|s| {
        if let Some(acc) = s.get() {
            s.set(Some(acc.wrapping_add(mix(
                site.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ decision,
            ))));
        }
    });
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run `f` on the current thread and return its result with the branch
/// signature of everything it evaluated.
pub fn trace<T>(f: impl FnOnce() -> T) -> (T, u64) {
    ACTIVE.fetch_add(1, Ordering::SeqCst);
    let prev = SIG.with(|s| s.replace(Some(0)));
    let out = f();
    let sig = SIG.with(|s| s.replace(prev)).unwrap_or(0);
    ACTIVE.fetch_sub(1, Ordering::SeqCst);
    (out, sig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signature_is_order_independent_and_decision_sensitive() {
        let (_, a) = trace(|| {
            note(1, 0);
            note(2, 1);
        });
        let (_, b) = trace(|| {
            note(2, 1);
            note(1, 0);
        });
        let (_, c) = trace(|| {
            note(1, 1);
            note(2, 1);
        });
        assert_eq!(a, b);
        assert_ne!(a, c);
        note(5, 5);
    }
}
