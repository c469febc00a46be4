//! Randomized instances for the lemma and theorem checks. Every trial is a
//! pure function of its seed, so trials can run in any order or in parallel.

use serde::Serialize;

use crate::attention::{AttentionConfig, LinearHead};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};
use crate::theory::{
    check_lemma1, check_lemma2, check_theorem1, random_orthogonal, BoundReport, Coupling, DistributionSpec, FeatureMap,
    SampleGenerator, TheoremReport, TheoremSetup,
};

pub const LEMMA2_DIMS: [usize; 3] = [1, 4, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SuiteSizes {
    pub lemma1_samples: usize,
    pub lemma2_samples: usize,
    pub theorem_samples: usize,
    pub analytic_samples: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self { lemma1_samples: 10_000, lemma2_samples: 64, theorem_samples: 10_000, analytic_samples: 1_000_000 }
    }
}

fn random_distribution(dim: usize, samples: usize, rng: &mut SeededRng) -> DistributionSpec {
    let seed = rng.next_u64();
    if rng.below(3) == 0 {
        let k = 2 + rng.below(3);
        let centers = (0..k).map(|_| (0..dim).map(|_| rng.uniform_in(-3.0, 3.0)).collect()).collect();
        DistributionSpec { generator: SampleGenerator::Mixture { centers, std: rng.uniform_in(0.2, 1.5) }, seed, samples }
    } else {
        DistributionSpec::gaussian((0..dim).map(|_| rng.uniform_in(0.2, 3.0)).collect(), seed, samples)
    }
}

fn gaussian_matrix(p: usize, q: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(&[p, q], |_| rng.normal())
}

/// Random joint `(Y, Ŷ)` law: `Ŷ = A·Y + b + noise` in one of [`LEMMA2_DIMS`].
pub fn lemma2_trial(seed: u64, samples: usize) -> Result<BoundReport> {
    let mut rng = SeededRng::new(seed);
    let dim = LEMMA2_DIMS[rng.below(LEMMA2_DIMS.len())];
    let ys = random_distribution(dim, samples, &mut rng).draw()?;
    let a = gaussian_matrix(dim, dim, &mut rng).scale(rng.uniform_in(0.0, 2.0));
    let b: Vec<f64> = (0..dim).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
    let noise = rng.uniform_in(0.0, 1.5);
    let y_hats: Vec<Vec<f64>> = ys
        .iter()
        .map(|y| {
            (0..dim)
                .map(|i| b[i] + noise * rng.normal() + (0..dim).map(|j| a.get2(i, j) * y[j]).sum::<f64>())
                .collect()
        })
        .collect();
    check_lemma2(&ys, &y_hats)
}

/// Random head `W` (tall, square or occasionally wide) and feature law.
pub fn lemma1_trial(seed: u64, samples: usize) -> Result<BoundReport> {
    let mut rng = SeededRng::new(seed);
    let q = 1 + rng.below(6);
    let p = if rng.below(8) == 0 { (q - 1).max(1) } else { q + rng.below(3) };
    let w = match rng.below(3) {
        0 => {
            let s = rng.uniform_in(0.3, 3.0);
            // leading p×q block: orthonormal columns when p ≥ q, rows otherwise
            let qm = random_orthogonal(p.max(q), &mut rng);
            Tensor::from_fn(&[p, q], |k| s * qm.get2(k / q, k % q))
        }
        _ => gaussian_matrix(p, q, &mut rng),
    };
    let bias = Tensor::from_fn(&[p], |_| rng.uniform_in(-5.0, 5.0));
    let head = LinearHead::new(w, bias)?;
    let fs = random_distribution(q, samples, &mut rng).draw()?;
    check_lemma1(&head, &fs)
}

/// `W = 2·I`, where the lemma holds with equality.
pub fn lemma1_equality(seed: u64, samples: usize) -> Result<BoundReport> {
    let mut rng = SeededRng::new(seed);
    let q = 1 + rng.below(4);
    let head = LinearHead::without_bias(Tensor::identity(q).scale(2.0))?;
    let fs = random_distribution(q, samples, &mut rng).draw()?;
    let mut r = check_lemma1(&head, &fs)?;
    r.name = "lemma1.equality".into();
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TheoremOutcome {
    Admissible(TheoremReport),
    Refused { reason: String },
}

/// A random `(X, F, W, Y)` configuration; some are inadmissible by
/// construction and must be refused.
pub fn theorem_setup(seed: u64, samples: usize) -> Result<TheoremSetup> {
    let mut rng = SeededRng::new(seed);
    let attention = rng.below(4) == 0;
    let (map, dim) = if attention {
        let tokens = 2 + rng.below(2);
        let cfg = AttentionConfig::new(2, 1 + rng.below(2))?;
        let gain = rng.uniform_in(1.0, 4.0);
        (FeatureMap::random_attention(tokens, cfg, gain, &mut rng), tokens * 2)
    } else {
        let dim = 1 + rng.below(4);
        let map = if rng.below(2) == 0 {
            FeatureMap::Scale(rng.uniform_in(0.5, 3.0))
        } else {
            FeatureMap::Linear(gaussian_matrix(dim, dim, &mut rng).scale(rng.uniform_in(0.5, 2.0)))
        };
        (map, dim)
    };
    let s = rng.uniform_in(0.5, 2.5);
    let qm = random_orthogonal(dim, &mut rng);
    let jitter = gaussian_matrix(dim, dim, &mut rng).scale(0.05);
    let weight = qm.scale(s).add(&jitter)?;
    let bias = if rng.below(2) == 0 { Tensor::zeros(&[dim]) } else { Tensor::from_fn(&[dim], |_| rng.uniform_in(-1.0, 1.0)) };
    let coupling = match rng.below(7) {
        0 => Coupling::Scaled(rng.uniform_in(1.2, 2.0)),
        1 | 2 => Coupling::Identity,
        3 | 4 => Coupling::Rotation { seed: rng.next_u64() },
        _ => Coupling::Mixed { seed: rng.next_u64(), noise: rng.uniform_in(0.1, 1.0) },
    };
    Ok(TheoremSetup {
        input: random_distribution(dim, samples, &mut rng),
        map,
        head: LinearHead::new(weight, bias)?,
        coupling,
        unbiased: false,
    })
}

pub fn theorem_trial(seed: u64, samples: usize) -> Result<TheoremOutcome> {
    match check_theorem1(&theorem_setup(seed, samples)?) {
        Ok(r) => Ok(TheoremOutcome::Admissible(r)),
        Err(Error::Precondition(reason)) => Ok(TheoremOutcome::Refused { reason }),
        Err(e) => Err(e),
    }
}

/// `F(X) = 2X`, `W = [1]`, `b = 0`, `Y = X` with standard normal `X`.
pub fn analytic_setup(seed: u64, samples: usize) -> Result<TheoremSetup> {
    Ok(TheoremSetup {
        input: DistributionSpec::gaussian(vec![1.0], seed, samples),
        map: FeatureMap::Scale(2.0),
        head: LinearHead::without_bias(Tensor::identity(1))?,
        coupling: Coupling::Identity,
        unbiased: true,
    })
}
