//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Outcomes are reported, not asserted, so a criterion that is out of reach
//! at desk scale shows up as FAIL without hiding the rest of the suite. Set
//! `CMAH_ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero exit.
//! A panic inside a criterion is a harness error and always fails the run.
//! `CMAH_ACCEPTANCE_QUICK=1` skips the two criteria that need the
//! 12-run training protocol.

mod determinism;
mod formats;
mod gradients;
mod invariants;
mod learning;
mod oracles;
mod stats;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

const LEARNING: [&str; 2] = ["end-to-end learning", "ablation directionality"];

type Criterion<'a> = Box<dyn FnMut() -> Outcome + 'a>;

fn main() -> ExitCode {
    // libtest flags such as --nocapture or a name filter are accepted and ignored.
    let strict = std::env::var("CMAH_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let quick = std::env::var("CMAH_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let learning_runs = std::cell::OnceCell::new();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("gradient suite", Box::new(gradients::run)),
        ("oracle equivalence", Box::new(oracles::run)),
        ("loss invariants", Box::new(invariants::run)),
        ("format round-trips", Box::new(formats::run)),
        ("determinism", Box::new(determinism::run)),
        ("paper-preset stats", Box::new(stats::run)),
        (
            "end-to-end learning",
            Box::new(|| learning::end_to_end(learning_runs.get_or_init(learning::run_protocol))),
        ),
        (
            "ablation directionality",
            Box::new(|| learning::ablation(learning_runs.get_or_init(learning::run_protocol))),
        ),
    ];
    let mut failed = 0;
    let mut harness_errors = 0;
    let mut skipped = 0;
    let total = criteria.len();
    println!("\nacceptance criteria");
    for (name, check) in criteria {
        if quick && LEARNING.contains(&name) {
            println!("SKIP {name}: CMAH_ACCEPTANCE_QUICK=1");
            skipped += 1;
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(o) => {
                if !o.passed {
                    failed += 1;
                }
                println!("{} {name} [{secs:.1}s]: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
            }
            Err(e) => {
                harness_errors += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL {name} [{secs:.1}s]: harness panic: {msg}");
            }
        }
    }
    println!(
        "{}/{total} criteria passed, {skipped} skipped",
        total - failed - harness_errors - skipped
    );
    if harness_errors > 0 || (strict && failed > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
