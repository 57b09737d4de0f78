//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p damper --test acceptance`. Criteria 5, 6 and 8
//! share one overfit training run, paid for by criterion 5.

mod gradients;
mod identities;
mod overfit;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use support::Checks;

struct Criterion {
    id: u32,
    title: &'static str,
    limit: Option<Duration>,
    run: fn(&mut Checks),
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, title: "loss identities and trivial examples", limit: Some(Duration::from_secs(10)), run: identities::run },
        Criterion { id: 2, title: "brute-force oracle equivalence", limit: Some(Duration::from_secs(60)), run: oracles::run },
        Criterion { id: 3, title: "analytic vs central-difference gradients", limit: Some(Duration::from_secs(120)), run: gradients::run },
        Criterion { id: 4, title: "permutation symmetry and masking", limit: None, run: symmetry::run },
        Criterion { id: 5, title: "overfit run on 8 synthetic records", limit: Some(Duration::from_secs(15 * 60)), run: overfit::run_overfit },
        Criterion { id: 6, title: "matched pairs outrank mismatched pairs", limit: None, run: overfit::run_alignment },
        Criterion { id: 7, title: "ablation surface over all switch settings", limit: Some(Duration::from_secs(5 * 60)), run: ablation::run },
        Criterion { id: 8, title: "single-view generation from a two-view model", limit: None, run: overfit::run_missing_view },
        Criterion { id: 9, title: "metric sanity on identical and disjoint corpora", limit: None, run: identities::run_metric_sanity },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let mut checks = Checks::default();
        (c.run)(&mut checks);
        let elapsed = start.elapsed();
        let failures = checks.failures();
        let over = c.limit.is_some_and(|l| elapsed > l);
        let ok = failures.is_empty() && !over && checks.total() > 0;
        if !ok {
            failed += 1;
        }
        let limit = c.limit.map(|l| format!(" / limit {}s", l.as_secs())).unwrap_or_default();
        println!(
            "criterion {} {}: {} ({}/{} checks, {:.1}s{limit})",
            c.id,
            if ok { "PASS" } else { "FAIL" },
            c.title,
            checks.total() - failures.len(),
            checks.total(),
            elapsed.as_secs_f64(),
        );
        for (name, msg) in failures {
            println!("    failed {name}: {msg}");
        }
        if over {
            println!("    runtime exceeded the limit");
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
