//! Finite-difference checks of every hand-written backward pass.

use std::fmt::Write;

use rayon::prelude::*;

use harecast_core::gradcheck::{run_all, GradCheckOptions, GradReport};
use harecast_core::Result;

use crate::error::{CliError, CliResult};

pub fn run(seed: u64, count: usize, opts: &GradCheckOptions) -> CliResult<Vec<GradReport>> {
    if count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let seeds: Vec<u64> = (0..count as u64).map(|i| seed.wrapping_add(i)).collect();
    let per_seed: Vec<Vec<GradReport>> = seeds.par_iter().map(|&s| run_all(&[s], opts)).collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

pub fn table(reports: &[GradReport]) -> String {
    let mut s = format!("{:<12} {:>6} {:>7} {:>6} {:>12}  {:<28} {}\n", "suite", "seed", "coords", "kinks", "max_rel_err", "worst", "status");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>7} {:>6} {:>12.3e}  {:<28} {}",
            r.suite,
            r.seed,
            r.checks.len(),
            r.kinks(),
            r.max_rel_err,
            r.worst_param.as_deref().unwrap_or("-"),
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    s
}

/// The first failing suite, phrased for the error message.
pub fn failure(reports: &[GradReport], tol: f64) -> Option<String> {
    reports.iter().find(|r| !r.pass).map(|r| {
        format!(
            "suite {} seed {}: parameter {} has relative error {:.3e} (tolerance {tol:e})",
            r.suite,
            r.seed,
            r.worst_param.as_deref().unwrap_or("<none scored>"),
            r.max_rel_err
        )
    })
}

pub fn to_json(reports: &[GradReport]) -> String {
    let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
    s.push('\n');
    s
}
