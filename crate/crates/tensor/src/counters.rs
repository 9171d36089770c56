//! Per-thread kernel invocation counters.
//!
//! Used by tests and benchmarks to check structural claims, e.g. that a
//! deployed backbone block runs a single convolution or that the optimized
//! coarse matcher never evaluates a softmax. Counters are thread-local, so
//! concurrently running tests do not observe each other.

use std::cell::RefCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kernel {
    Conv2d,
    DepthwiseConv2d,
    MaxPool2d,
    Softmax,
    MatMul,
    Upsample,
    /// Entries of attention score matrices (one count per query/key pair, per head).
    AttentionScores,
    /// Position-encoding rotations applied.
    Rope,
    /// Dense probability matrices materialized by coarse matching.
    DualSoftmax,
}

const N_KERNELS: usize = 9;

fn slot(k: Kernel) -> usize {
    match k {
        Kernel::Conv2d => 0,
        Kernel::DepthwiseConv2d => 1,
        Kernel::MaxPool2d => 2,
        Kernel::Softmax => 3,
        Kernel::MatMul => 4,
        Kernel::Upsample => 5,
        Kernel::AttentionScores => 6,
        Kernel::Rope => 7,
        Kernel::DualSoftmax => 8,
    }
}

thread_local! {
    static COUNTS: RefCell<[u64; N_KERNELS]> = const { RefCell::new([0; N_KERNELS]) };
}

pub fn record(k: Kernel) {
    add(k, 1);
}

pub fn add(k: Kernel, n: u64) {
    COUNTS.with(|c| c.borrow_mut()[slot(k)] += n);
}

pub fn get(k: Kernel) -> u64 {
    COUNTS.with(|c| c.borrow()[slot(k)])
}

pub fn reset() {
    COUNTS.with(|c| *c.borrow_mut() = [0; N_KERNELS]);
}

/// Runs `f` and returns its result with the counter increments it caused.
pub fn measure<R>(k: Kernel, f: impl FnOnce() -> R) -> (R, u64) {
    let before = get(k);
    let r = f();
    (r, get(k) - before)
}
