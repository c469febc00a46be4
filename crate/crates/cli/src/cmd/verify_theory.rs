//! Monte-Carlo suite over the lemma and theorem bounds.

use rayon::prelude::*;
use serde::Serialize;

use harecast_core::theory::{check_theorem1, BoundReport};
use harecast_core::verify::{self, SuiteSizes, TheoremOutcome};
use harecast_core::Result;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    pub sizes: SuiteSizes,
    /// Test hook: multiply every bound's right-hand side.
    pub inflate_rhs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trial {
    pub family: &'static str,
    pub index: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_g: Option<f64>,
    /// Set when the configuration is inadmissible and no bound applies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refused: Option<String>,
    pub bounds: Vec<BoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub bounds_checked: usize,
    pub violations: usize,
    pub refused: usize,
    pub violated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub sizes: SuiteSizes,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inflate_rhs: Option<f64>,
    pub summary: Summary,
    pub results: Vec<Trial>,
}

#[derive(Clone, Copy)]
enum Family {
    Lemma2,
    Lemma1,
    Lemma1Equality,
    Theorem,
    Analytic,
}

impl Family {
    fn name(self) -> &'static str {
        match self {
            Family::Lemma2 => "lemma2",
            Family::Lemma1 => "lemma1",
            Family::Lemma1Equality => "lemma1.equality",
            Family::Theorem => "theorem1",
            Family::Analytic => "theorem1.analytic",
        }
    }

    /// Keeps the families' seed streams apart.
    fn offset(self) -> u64 {
        (self as u64 + 1) << 40
    }
}

fn run_trial(family: Family, index: usize, seed: u64, sizes: &SuiteSizes) -> Result<Trial> {
    let mut t = Trial { family: family.name(), index, seed, c_f: None, c_g: None, refused: None, bounds: vec![] };
    let theorem = match family {
        Family::Lemma2 => {
            t.bounds.push(verify::lemma2_trial(seed, sizes.lemma2_samples)?);
            return Ok(t);
        }
        Family::Lemma1 => {
            t.bounds.push(verify::lemma1_trial(seed, sizes.lemma1_samples)?);
            return Ok(t);
        }
        Family::Lemma1Equality => {
            t.bounds.push(verify::lemma1_equality(seed, sizes.lemma1_samples)?);
            return Ok(t);
        }
        Family::Theorem => verify::theorem_trial(seed, sizes.theorem_samples)?,
        Family::Analytic => TheoremOutcome::Admissible(check_theorem1(&verify::analytic_setup(seed, sizes.analytic_samples)?)?),
    };
    match theorem {
        TheoremOutcome::Admissible(r) => {
            t.c_f = Some(r.c_f);
            t.c_g = Some(r.c_g);
            t.bounds = r.bounds;
        }
        TheoremOutcome::Refused { reason } => t.refused = Some(reason),
    }
    Ok(t)
}

pub fn run(opts: &VerifyOptions) -> CliResult<VerifyReport> {
    if opts.trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }
    let families = [
        (Family::Lemma2, opts.trials),
        (Family::Lemma1, opts.trials),
        (Family::Lemma1Equality, 1),
        (Family::Theorem, opts.trials),
        (Family::Analytic, 1),
    ];
    let jobs: Vec<(Family, usize, u64)> = families
        .iter()
        .flat_map(|&(f, n)| (0..n).map(move |i| (f, i, opts.seed.wrapping_add(f.offset()).wrapping_add(i as u64))))
        .collect();
    let mut results: Vec<Trial> = jobs
        .par_iter()
        .map(|&(family, index, seed)| run_trial(family, index, seed, &opts.sizes))
        .collect::<Result<_>>()?;

    if let Some(f) = opts.inflate_rhs {
        for t in &mut results {
            t.bounds = t.bounds.iter().map(|b| b.with_scaled_rhs(f)).collect();
        }
    }
    let mut summary = Summary { bounds_checked: 0, violations: 0, refused: 0, violated: Vec::new() };
    for t in &results {
        summary.refused += t.refused.is_some() as usize;
        for b in &t.bounds {
            summary.bounds_checked += 1;
            if !b.holds {
                summary.violations += 1;
                summary.violated.push(format!("{}#{} {}", t.family, t.index, b.name));
            }
        }
    }
    Ok(VerifyReport { seed: opts.seed, trials: opts.trials, sizes: opts.sizes, inflate_rhs: opts.inflate_rhs, summary, results })
}

/// Pretty JSON with a trailing newline.
pub fn to_json(r: &VerifyReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(trials: usize, inflate: Option<f64>) -> VerifyOptions {
        VerifyOptions {
            trials,
            seed: 3,
            sizes: SuiteSizes { lemma1_samples: 2000, lemma2_samples: 32, theorem_samples: 2000, analytic_samples: 50_000 },
            inflate_rhs: inflate,
        }
    }

    #[test]
    fn default_suite_has_no_violations() {
        let r = run(&small(10, None)).unwrap();
        assert_eq!(r.summary.violations, 0, "{:?}", r.summary.violated);
        assert_eq!(r.results.len(), 32);
        assert!(r.summary.bounds_checked > 30);
    }

    #[test]
    fn inflated_bounds_are_violated() {
        let r = run(&small(2, Some(1.1))).unwrap();
        assert!(r.summary.violated.iter().any(|v| v.starts_with("lemma1.equality")));
        assert!(r.summary.violated.iter().any(|v| v.contains("unbiased.input_form")));
    }

    #[test]
    fn zero_trials_is_a_usage_error() {
        assert!(matches!(run(&small(0, None)), Err(CliError::Usage(_))));
    }
}
