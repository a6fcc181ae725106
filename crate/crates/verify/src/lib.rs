//! Helpers for the acceptance target: outcome bookkeeping and pooled
//! statistics over several runs.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use puck_track::eval::{AccuracyReport, SuiteRow};

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

/// Runs one check. The closure returns `(passed, detail)`; a panic counts as
/// a failure with the panic message as detail.
pub fn check(name: &str, budget: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let started = Instant::now();
    let res = panic::catch_unwind(AssertUnwindSafe(f));
    let elapsed = started.elapsed();
    let (mut passed, mut detail) = match res {
        Ok(r) => r,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            (false, format!("panic: {msg}"))
        }
    };
    if let Some(b) = budget {
        if elapsed > b {
            passed = false;
            detail += &format!("; over time budget {:.0?}", b);
        }
    }
    let o = Outcome {
        name: name.to_string(),
        passed,
        detail,
        elapsed,
    };
    println!(
        "{} {:<40} {:>8.2}s  {}",
        if o.passed { "PASS" } else { "FAIL" },
        o.name,
        o.elapsed.as_secs_f64(),
        o.detail
    );
    o
}

/// All per-sample errors of the successful rows, as one report.
pub fn pooled(rows: &[&SuiteRow], threshold_px: f64) -> AccuracyReport {
    let errors = rows
        .iter()
        .filter_map(|r| r.accuracy.as_ref())
        .flat_map(|a| a.errors.iter().copied())
        .collect();
    AccuracyReport::from_errors(errors, threshold_px)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Stalls {
    pub count: usize,
    pub total: Duration,
    pub longest: Duration,
}

/// Spins for `span` and records every gap over 200 us between consecutive
/// clock reads, i.e. time the thread was not running.
pub fn host_stalls(span: Duration) -> Stalls {
    let mut s = Stalls::default();
    let start = Instant::now();
    let mut last = start;
    while last - start < span {
        let now = Instant::now();
        let gap = now - last;
        if gap > Duration::from_micros(200) {
            s.count += 1;
            s.total += gap;
            s.longest = s.longest.max(gap);
        }
        last = now;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_failures() {
        let o = check("boom", None, || panic!("nope"));
        assert!(!o.passed);
        assert!(o.detail.contains("nope"));
    }

    #[test]
    fn budget_overrun_fails() {
        let o = check("slow", Some(Duration::ZERO), || {
            std::thread::sleep(Duration::from_millis(2));
            (true, String::new())
        });
        assert!(!o.passed);
    }
}
