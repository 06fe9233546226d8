//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p q3dk --test acceptance`.

#[path = "../common/mod.rs"]
mod common;

mod attention;
mod budget;
mod fusion;
mod gradients;
mod sampling;
mod training;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// Pinned tolerances. Changing one is a change to the acceptance contract.
pub mod tol {
    /// Max relative error of analytic vs central-difference gradients.
    pub const GRAD_REL: f64 = 1e-4;
    /// Denominator floor for the relative error, so exact zeros compare by
    /// absolute error.
    pub const GRAD_FLOOR: f64 = 1e-6;
    /// Central-difference step.
    pub const FD_STEP: f64 = 1e-5;
    pub const GRAD_CASES: usize = 100;
    pub const GRAD_SECONDS: f64 = 60.0;

    /// Two computations of the same quantity by different routes.
    pub const EXACT: f64 = 1e-10;
    /// Cached decode vs full recompute.
    pub const DECODE: f64 = 1e-8;
    /// Closed-form scalar identities (balance loss of 1, advantage sums).
    pub const IDENTITY: f64 = 1e-12;
    /// Unit variance of group advantages whose rewards spread by at least
    /// 0.1; the `1e-8` in the denominator keeps it just below 1.
    pub const UNIT_VAR: f64 = 1e-6;

    pub const SAMPLING_DRAWS: usize = 100_000;
    pub const SAMPLING_SIGMAS: f64 = 3.0;

    pub const SFT_LOSS: f64 = 0.1;
    pub const DISTILL_KL_DROP: f64 = 0.5;
    pub const DISTILL_AGREEMENT: f64 = 0.8;
    pub const BANDIT_P: f64 = 0.9;
    pub const SMOKE_SECONDS: f64 = 300.0;

    pub const FUSION_TRIALS: usize = 100;
    pub const FUSION_PASSES: usize = 95;
}

/// A criterion reports a one-line summary on success and the reason on
/// failure.
pub type Outcome = Result<String, String>;

#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Unwraps a library result into the criterion's error.
pub fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient suite", gradients::run),
    (2, "attention equivalence oracles", attention::run),
    (3, "mixture of experts", moe::run),
    (4, "shape audit", shapes::run),
    (5, "tokenizer round trip", tokenizer::run),
    (6, "template goldens", template::run),
    (7, "thinking budget", budget::run),
    (8, "sampling", sampling::run),
    (9, "training smokes", training::run),
    (10, "mode-fusion proxy", fusion::run),
];

fn main() -> ExitCode {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{id:>2}] {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
