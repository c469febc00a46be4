//! Monte-Carlo checks of the variance-propagation bounds for a self-attention
//! map followed by a linear head.
//!
//! All variances here use the population convention, `Var(Z) = E‖Z − E Z‖²`
//! estimated with divisor `n`. Inequalities that hold exactly on empirical
//! moments are checked at [`EXACT_EPS`]; the others allow three standard
//! errors of the relevant estimator.

use serde::Serialize;

use crate::attention::{sigma_min, AttentionConfig, LinearHead, MultiHeadAttention};
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{Tensor, SeededRng};

/// Absolute slack for inequalities that hold exactly on sample moments.
pub const EXACT_EPS: f64 = 1e-10;
/// Standard errors of slack for sampling-dependent inequalities.
pub const SAMPLING_SE: f64 = 3.0;
/// Relative tolerance on `Var(Y) = Var(X)`.
pub const MATCHED_VARIANCE_TOL: f64 = 1e-6;

/// One-pass (Welford) accumulator of total variance over vector samples.
#[derive(Debug, Clone)]
pub struct VarianceAccumulator {
    count: usize,
    mean: Vec<f64>,
    sum_sq_dev: f64,
}

impl VarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], sum_sq_dev: 0.0 }
    }

    pub fn push(&mut self, z: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        let mut inc = 0.0;
        for (m, &v) in self.mean.iter_mut().zip(z) {
            let delta = v - *m;
            *m += delta / n;
            inc += delta * (v - *m);
        }
        self.sum_sq_dev += inc;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.sum_sq_dev / self.count as f64
    }
}

/// `E‖Z − E Z‖²` over equal-shaped samples, divisor `n`.
pub fn total_variance(samples: &[Tensor]) -> Result<f64> {
    if samples.len() < 2 {
        return config_err(format!("total variance needs at least 2 samples, got {}", samples.len()));
    }
    let shape = samples[0].shape();
    let mut acc = VarianceAccumulator::new(samples[0].len());
    for s in samples {
        if s.shape() != shape {
            return dim_err(format!("sample shapes {:?} and {:?} differ", shape, s.shape()));
        }
        acc.push(s.data());
    }
    Ok(acc.variance())
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleGenerator {
    /// Independent coordinates with the given standard deviations.
    Gaussian { std: Vec<f64> },
    /// Equal-weight mixture of isotropic Gaussians.
    Mixture { centers: Vec<Vec<f64>>, std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSpec {
    pub generator: SampleGenerator,
    pub seed: u64,
    pub samples: usize,
}

impl DistributionSpec {
    pub fn gaussian(std: Vec<f64>, seed: u64, samples: usize) -> Self {
        Self { generator: SampleGenerator::Gaussian { std }, seed, samples }
    }

    pub fn dim(&self) -> usize {
        match &self.generator {
            SampleGenerator::Gaussian { std } => std.len(),
            SampleGenerator::Mixture { centers, .. } => centers.first().map_or(0, |c| c.len()),
        }
    }

    pub fn draw(&self) -> Result<Vec<Vec<f64>>> {
        if self.samples < 2 {
            return config_err(format!("need at least 2 samples, got {}", self.samples));
        }
        let dim = self.dim();
        if dim == 0 {
            return dim_err("distribution has zero dimension");
        }
        let mut rng = SeededRng::new(self.seed);
        let out = (0..self.samples)
            .map(|_| match &self.generator {
                SampleGenerator::Gaussian { std } => std.iter().map(|s| s * rng.normal()).collect(),
                SampleGenerator::Mixture { centers, std } => {
                    let c = &centers[rng.below(centers.len())];
                    c.iter().map(|m| m + std * rng.normal()).collect()
                }
            })
            .collect();
        Ok(out)
    }
}

/// The map playing the role of the attention response `F`.
#[derive(Debug, Clone)]
pub enum FeatureMap {
    Identity,
    Scale(f64),
    /// `F(x) = A·x`.
    Linear(Tensor),
    /// Self-attention over `tokens` rows of the flattened input, residual-free.
    Attention { block: MultiHeadAttention, tokens: usize },
}

impl FeatureMap {
    pub fn random_attention(tokens: usize, cfg: AttentionConfig, gain: f64, rng: &mut SeededRng) -> Self {
        let mut block = MultiHeadAttention::new(cfg, rng);
        block.wv.value = block.wv.value.scale(gain);
        Self::Attention { block, tokens }
    }

    pub fn apply_all(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match self {
            FeatureMap::Identity => Ok(xs.to_vec()),
            FeatureMap::Scale(c) => Ok(xs.iter().map(|x| x.iter().map(|v| c * v).collect()).collect()),
            FeatureMap::Linear(a) => {
                let (p, q) = a.dims2()?;
                xs.iter()
                    .map(|x| {
                        if x.len() != q {
                            return dim_err(format!("map expects {q} inputs, got {}", x.len()));
                        }
                        Ok((0..p).map(|i| (0..q).map(|j| a.get2(i, j) * x[j]).sum()).collect())
                    })
                    .collect()
            }
            FeatureMap::Attention { block, tokens } => {
                let d = block.config().model_dim;
                let dim = tokens * d;
                if xs.iter().any(|x| x.len() != dim) {
                    return dim_err(format!("attention map expects inputs of length {dim}"));
                }
                let flat: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
                let mut block = block.clone();
                let y = block.forward(&Tensor::new(&[xs.len(), *tokens, d], flat)?)?;
                Ok(y.data().chunks(dim).map(|c| c.to_vec()).collect())
            }
        }
    }
}

fn variance_of(samples: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let mut acc = VarianceAccumulator::new(samples[0].len());
    samples.iter().for_each(|s| acc.push(s));
    (acc.variance(), acc.mean().to_vec())
}

/// Largest `c_F` with `Var(F(X)) ≥ c_F²·Var(X)` on the drawn samples.
pub fn estimate_c_f(map: &FeatureMap, dist: &DistributionSpec) -> Result<f64> {
    let xs = dist.draw()?;
    let fs = map.apply_all(&xs)?;
    c_f_from_samples(&xs, &fs)
}

fn c_f_from_samples(xs: &[Vec<f64>], fs: &[Vec<f64>]) -> Result<f64> {
    let (vx, _) = variance_of(xs);
    if vx <= 0.0 {
        return Err(Error::Degenerate("Var(X) is zero".into()));
    }
    let (vf, _) = variance_of(fs);
    Ok((vf / vx).sqrt())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BoundConstants {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_y: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_y_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    /// Allowed negative margin.
    pub epsilon: f64,
    pub holds: bool,
    pub variance_convention: &'static str,
    pub constants: BoundConstants,
}

impl BoundReport {
    pub fn new(name: &str, lhs: f64, rhs: f64, epsilon: f64, constants: BoundConstants) -> Self {
        let margin = lhs - rhs;
        Self {
            name: name.to_string(),
            lhs,
            rhs,
            margin,
            epsilon,
            holds: margin >= -epsilon,
            variance_convention: "population",
            constants,
        }
    }

    /// Same report with the bound scaled by `factor`.
    pub fn with_scaled_rhs(&self, factor: f64) -> Self {
        Self::new(&self.name, self.lhs, self.rhs * factor, self.epsilon, self.constants.clone())
    }
}

fn std_error(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (var / n).sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `Var(Ŷ) ≥ σ_min(W)²·Var(F(X))` for `Ŷ = W·F + b`.
pub fn check_lemma1(head: &LinearHead, f_samples: &[Vec<f64>]) -> Result<BoundReport> {
    if f_samples.len() < 2 {
        return config_err("lemma check needs at least 2 samples");
    }
    let (p, q) = head.weight.dims2()?;
    // A wide head has a null space, so no positive constant bounds it below.
    let c_g = if p >= q { sigma_min(&head.weight)? } else { 0.0 };
    let y_hat: Vec<Vec<f64>> = f_samples.iter().map(|f| head.apply(f)).collect::<Result<_>>()?;
    let (var_f, mean_f) = variance_of(f_samples);
    let (var_y_hat, mean_y) = variance_of(&y_hat);
    let terms = f_samples.iter().zip(&y_hat).map(|(f, y)| {
        sq_dist(y, &mean_y) - c_g * c_g * sq_dist(f, &mean_f)
    });
    let se = std_error(terms);
    let eps = (SAMPLING_SE * se).max(EXACT_EPS);
    Ok(BoundReport::new(
        "lemma1",
        var_y_hat,
        c_g * c_g * var_f,
        eps,
        BoundConstants { c_g: Some(c_g), var_f: Some(var_f), var_y_hat: Some(var_y_hat), ..Default::default() },
    ))
}

/// `MSE ≥ ‖E Ŷ − E Y‖² + (√Var Ŷ − √Var Y)²` on the empirical joint law.
pub fn check_lemma2(ys: &[Vec<f64>], y_hats: &[Vec<f64>]) -> Result<BoundReport> {
    if ys.len() != y_hats.len() || ys.len() < 2 {
        return config_err("lemma check needs at least 2 paired samples");
    }
    let (var_y, mean_y) = variance_of(ys);
    let (var_y_hat, mean_y_hat) = variance_of(y_hats);
    let mse = ys.iter().zip(y_hats).map(|(y, h)| sq_dist(y, h)).sum::<f64>() / ys.len() as f64;
    let bias_sq = sq_dist(&mean_y, &mean_y_hat);
    let rhs = bias_sq + (var_y_hat.sqrt() - var_y.sqrt()).powi(2);
    Ok(BoundReport::new(
        "lemma2",
        mse,
        rhs,
        EXACT_EPS,
        BoundConstants { bias_sq: Some(bias_sq), var_y: Some(var_y), var_y_hat: Some(var_y_hat), ..Default::default() },
    ))
}

/// How the target `Y` is tied to the input `X`.
#[derive(Debug, Clone, PartialEq)]
pub enum Coupling {
    /// `Y = X`.
    Identity,
    /// `Y = Q·X` for a random orthogonal `Q`.
    Rotation { seed: u64 },
    /// `Q·X` blended with independent noise, rescaled so the sample variance
    /// equals that of `X`.
    Mixed { seed: u64, noise: f64 },
    /// `Y = s·X`; breaks the matched-variance condition unless `|s| = 1`.
    Scaled(f64),
}

impl Coupling {
    fn apply(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let dim = xs[0].len();
        match self {
            Coupling::Identity => xs.to_vec(),
            Coupling::Scaled(s) => xs.iter().map(|x| x.iter().map(|v| s * v).collect()).collect(),
            Coupling::Rotation { seed } => {
                let q = random_orthogonal(dim, &mut SeededRng::new(*seed));
                xs.iter().map(|x| mat_vec(&q, x)).collect()
            }
            Coupling::Mixed { seed, noise } => {
                let mut rng = SeededRng::new(*seed);
                let q = random_orthogonal(dim, &mut rng);
                let (vx, _) = variance_of(xs);
                let scale = (vx / dim as f64).sqrt();
                let raw: Vec<Vec<f64>> = xs
                    .iter()
                    .map(|x| mat_vec(&q, x).into_iter().map(|v| v + noise * scale * rng.normal()).collect())
                    .collect();
                let (vr, mean) = variance_of(&raw);
                let k = (vx / vr).sqrt();
                raw.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| m + k * (v - m)).collect()).collect()
            }
        }
    }
}

fn mat_vec(a: &Tensor, x: &[f64]) -> Vec<f64> {
    let (p, q) = (a.shape()[0], a.shape()[1]);
    (0..p).map(|i| (0..q).map(|j| a.get2(i, j) * x[j]).sum()).collect()
}

/// Orthogonal matrix from Gram–Schmidt on a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut SeededRng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Tensor::from_fn(&[n, n], |k| cols[k % n][k / n])
}

#[derive(Debug, Clone)]
pub struct TheoremSetup {
    pub input: DistributionSpec,
    pub map: FeatureMap,
    pub head: LinearHead,
    pub coupling: Coupling,
    /// Also report the bias-free forms of the gap and input bounds.
    pub unbiased: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub c_f: f64,
    pub c_g: f64,
    pub bounds: Vec<BoundReport>,
}

impl TheoremReport {
    pub fn all_hold(&self) -> bool {
        self.bounds.iter().all(|b| b.holds)
    }
}

/// The three MSE lower bounds implied by `c_G·c_F > 1` and `Var(Y) = Var(X)`.
///
/// Returns [`Error::Precondition`] naming the failed condition instead of a
/// report when the configuration is inadmissible.
pub fn check_theorem1(setup: &TheoremSetup) -> Result<TheoremReport> {
    let xs = setup.input.draw()?;
    let fs = setup.map.apply_all(&xs)?;
    let ys = setup.coupling.apply(&xs);
    let y_hats: Vec<Vec<f64>> = fs.iter().map(|f| setup.head.apply(f)).collect::<Result<_>>()?;
    if ys[0].len() != y_hats[0].len() {
        return dim_err(format!("target dim {} vs prediction dim {}", ys[0].len(), y_hats[0].len()));
    }
    let (p, q) = setup.head.weight.dims2()?;
    let c_g = if p >= q { sigma_min(&setup.head.weight)? } else { 0.0 };
    let c_f = c_f_from_samples(&xs, &fs)?;
    let (var_x, _) = variance_of(&xs);
    let (var_f, _) = variance_of(&fs);
    let (var_y, mean_y) = variance_of(&ys);
    let (var_y_hat, mean_y_hat) = variance_of(&y_hats);
    if c_g * c_f <= 1.0 {
        return Err(Error::Precondition(format!("c_G·c_F = {} must exceed 1", c_g * c_f)));
    }
    if (var_y - var_x).abs() > MATCHED_VARIANCE_TOL * var_x {
        return Err(Error::Precondition(format!("Var(Y) = {var_y} differs from Var(X) = {var_x}")));
    }
    let errs: Vec<f64> = ys.iter().zip(&y_hats).map(|(y, h)| sq_dist(y, h)).collect();
    let mse = errs.iter().sum::<f64>() / errs.len() as f64;
    let eps = (SAMPLING_SE * std_error(errs.iter().copied())).max(EXACT_EPS);
    let bias_sq = sq_dist(&mean_y, &mean_y_hat);
    let constants = BoundConstants {
        c_f: Some(c_f),
        c_g: Some(c_g),
        bias_sq: Some(bias_sq),
        var_x: Some(var_x),
        var_f: Some(var_f),
        var_y: Some(var_y),
        var_y_hat: Some(var_y_hat),
    };
    let gap = (c_g - 1.0 / c_f).powi(2) * var_f;
    let input = (c_g * c_f - 1.0).powi(2) * var_y;
    let mut bounds = vec![
        BoundReport::new(
            "theorem1.f_form",
            mse,
            bias_sq + (c_g * var_f.sqrt() - var_y.sqrt()).powi(2),
            eps,
            constants.clone(),
        ),
        BoundReport::new("theorem1.gap_form", mse, bias_sq + gap, eps, constants.clone()),
        BoundReport::new("theorem1.input_form", mse, bias_sq + input, eps, constants.clone()),
    ];
    if setup.unbiased {
        bounds.push(BoundReport::new("theorem1.unbiased.gap_form", mse, gap, eps, constants.clone()));
        bounds.push(BoundReport::new("theorem1.unbiased.input_form", mse, input, eps, constants));
    }
    Ok(TheoremReport { c_f, c_g, bounds })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mean first, then squared deviations.
    fn two_pass_variance(xs: &[Vec<f64>]) -> f64 {
        let n = xs.len() as f64;
        let dim = xs[0].len();
        let mean: Vec<f64> = (0..dim).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        xs.iter().map(|x| sq_dist(x, &mean)).sum::<f64>() / n
    }

    fn scalars(v: &[f64]) -> Vec<Tensor> {
        v.iter().map(|&x| Tensor::new(&[1], vec![x]).unwrap()).collect()
    }

    #[test]
    fn total_variance_examples() {
        assert_eq!(total_variance(&scalars(&[3.0, 3.0, 3.0])).unwrap(), 0.0);
        assert_eq!(total_variance(&scalars(&[-1.0, 1.0])).unwrap(), 1.0);
        let v = vec![Tensor::new(&[2], vec![0.0, 0.0]).unwrap(), Tensor::new(&[2], vec![2.0, 0.0]).unwrap()];
        assert_eq!(total_variance(&v).unwrap(), 1.0);
        assert!(total_variance(&scalars(&[1.0])).is_err());
    }

    #[test]
    fn c_f_for_linear_scalings() {
        let dist = DistributionSpec::gaussian(vec![1.0, 0.5, 2.0], 1, 100_000);
        assert!((estimate_c_f(&FeatureMap::Scale(2.0), &dist).unwrap() - 2.0).abs() < 0.01);
        assert!((estimate_c_f(&FeatureMap::Identity, &dist).unwrap() - 1.0).abs() < 0.01);
    }

    #[test]
    fn c_f_for_attention_matches_two_pass_oracle() {
        let mut rng = SeededRng::new(4);
        let map = FeatureMap::random_attention(3, AttentionConfig::new(4, 2).unwrap(), 2.0, &mut rng);
        let dist = DistributionSpec::gaussian(vec![1.0; 12], 9, 20_000);
        let got = estimate_c_f(&map, &dist).unwrap();
        let xs = dist.draw().unwrap();
        let fs = map.apply_all(&xs).unwrap();
        let want = (two_pass_variance(&fs) / two_pass_variance(&xs)).sqrt();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn c_f_degenerate_input() {
        let dist = DistributionSpec::gaussian(vec![0.0, 0.0], 1, 10);
        assert!(matches!(estimate_c_f(&FeatureMap::Identity, &dist), Err(Error::Degenerate(_))));
    }

    #[test]
    fn lemma1_examples() {
        let fs = DistributionSpec::gaussian(vec![1.0, 3.0], 2, 10_000).draw().unwrap();
        let head = LinearHead::without_bias(Tensor::identity(2).scale(2.0)).unwrap();
        let r = check_lemma1(&head, &fs).unwrap();
        assert!(r.holds);
        assert!((r.lhs - r.rhs).abs() <= 1e-9 * r.rhs);
        assert!((r.lhs / (4.0 * r.constants.var_f.unwrap()) - 1.0).abs() < 1e-12);

        let diag = LinearHead::without_bias(Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 0.5]])).unwrap();
        let r = check_lemma1(&diag, &fs).unwrap();
        assert!(r.holds && r.margin > 0.0);

        let shifted = LinearHead::new(diag.weight.clone(), Tensor::new(&[2], vec![10.0, -4.0]).unwrap()).unwrap();
        let r2 = check_lemma1(&shifted, &fs).unwrap();
        assert!((r2.lhs - r.lhs).abs() < 1e-9 && (r2.rhs - r.rhs).abs() < 1e-12);
    }

    #[test]
    fn lemma2_equality_cases() {
        let ys = DistributionSpec::gaussian(vec![1.0], 3, 1000).draw().unwrap();
        let zeros = vec![vec![0.0]; ys.len()];
        let r = check_lemma2(&ys, &zeros).unwrap();
        // MSE = Var + mean² = bound
        assert!((r.lhs - r.rhs).abs() < 1e-12 && r.holds);
        let r = check_lemma2(&ys, &ys).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.rhs.abs() < 1e-15);
    }

    #[test]
    fn theorem_analytic_configuration() {
        let setup = TheoremSetup {
            input: DistributionSpec::gaussian(vec![1.0], 5, 200_000),
            map: FeatureMap::Scale(2.0),
            head: LinearHead::without_bias(Tensor::identity(1)).unwrap(),
            coupling: Coupling::Identity,
            unbiased: true,
        };
        let r = check_theorem1(&setup).unwrap();
        assert!(r.all_hold());
        assert!((r.c_f - 2.0).abs() < 1e-12);
        let input = r.bounds.iter().find(|b| b.name == "theorem1.unbiased.input_form").unwrap();
        assert!((input.lhs / input.rhs - 1.0).abs() < 0.005);

        let shift = 0.7;
        let biased = TheoremSetup {
            head: LinearHead::new(Tensor::identity(1), Tensor::new(&[1], vec![shift]).unwrap()).unwrap(),
            unbiased: false,
            ..setup.clone()
        };
        let r = check_theorem1(&biased).unwrap();
        assert!(r.all_hold());
        let bias_sq = r.bounds[0].constants.bias_sq.unwrap();
        // E[2X + b − X] = E[X] + b ≈ b
        assert!((bias_sq - shift * shift).abs() < 0.01);
    }

    #[test]
    fn theorem_refuses_inadmissible_setups() {
        let base = TheoremSetup {
            input: DistributionSpec::gaussian(vec![1.0, 1.0], 5, 1000),
            map: FeatureMap::Scale(0.8),
            head: LinearHead::without_bias(Tensor::identity(2)).unwrap(),
            coupling: Coupling::Identity,
            unbiased: false,
        };
        assert!(matches!(check_theorem1(&base), Err(Error::Precondition(m)) if m.contains("c_G")));
        let mismatch = TheoremSetup { map: FeatureMap::Scale(3.0), coupling: Coupling::Scaled(1.5), ..base };
        assert!(matches!(check_theorem1(&mismatch), Err(Error::Precondition(m)) if m.contains("Var(Y)")));
    }

    #[test]
    fn couplings_preserve_variance() {
        let xs = DistributionSpec::gaussian(vec![1.0, 2.0, 0.5], 8, 5000).draw().unwrap();
        let (vx, _) = variance_of(&xs);
        for c in [Coupling::Identity, Coupling::Rotation { seed: 1 }, Coupling::Mixed { seed: 2, noise: 0.7 }] {
            let (vy, _) = variance_of(&c.apply(&xs));
            assert!((vy - vx).abs() <= 1e-9 * vx, "{c:?}");
        }
    }

    #[test]
    fn reports_are_seed_deterministic() {
        let setup = TheoremSetup {
            input: DistributionSpec {
                generator: SampleGenerator::Mixture { centers: vec![vec![0.0, 1.0], vec![2.0, -1.0]], std: 0.5 },
                seed: 17,
                samples: 4000,
            },
            map: FeatureMap::Scale(1.7),
            head: LinearHead::without_bias(Tensor::from_rows(&[&[1.2, 0.3], &[0.0, 1.1]])).unwrap(),
            coupling: Coupling::Mixed { seed: 3, noise: 0.4 },
            unbiased: false,
        };
        assert_eq!(check_theorem1(&setup).unwrap(), check_theorem1(&setup).unwrap());
    }
}
