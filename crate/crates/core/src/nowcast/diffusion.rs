//! Noise schedule, forward noising, the denoising loss and a deterministic
//! DDIM sampler.

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// `β_t` linear from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return config_err(format!("invalid schedule: {steps} steps, β from {beta_start} to {beta_end}"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("standard schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `t ∈ 1..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Evenly spaced descending timesteps `T, T − T/n, …, T/n`.
    pub fn sub_schedule(&self, n: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if n == 0 || n > t {
            return config_err(format!("cannot take {n} sampling steps from a {t}-step schedule"));
        }
        Ok((1..=n).rev().map(|k| k * t / n).collect())
    }
}

/// Map `[0, 1]` pixels to the `[−1, 1]` diffusion space.
pub fn to_signed(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

pub fn from_signed(x: &Tensor) -> Tensor {
    x.map(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0)
}

/// The random part of one training step: a timestep per sample and `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDraw {
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl DiffusionDraw {
    /// `shape` is `[B × …]`.
    pub fn sample(shape: &[usize], sched: &DiffusionSchedule, rng: &mut SeededRng) -> Self {
        let t = (0..shape[0]).map(|_| 1 + rng.below(sched.steps())).collect();
        let eps = Tensor::from_fn(shape, |_| rng.normal());
        Self { t, eps }
    }
}

/// `x_t = √ᾱ_t·y + √(1−ᾱ_t)·ε`, per sample.
pub fn noise(y: &Tensor, draw: &DiffusionDraw, sched: &DiffusionSchedule) -> Result<Tensor> {
    if y.shape() != draw.eps.shape() || y.shape().first() != Some(&draw.t.len()) {
        return dim_err(format!("signal {:?} and noise {:?} differ", y.shape(), draw.eps.shape()));
    }
    let per = y.len() / draw.t.len();
    let mut out = Vec::with_capacity(y.len());
    for (i, (ys, es)) in y.data().chunks(per).zip(draw.eps.data().chunks(per)).enumerate() {
        let ab = sched.alpha_bar(draw.t[i]);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        out.extend(ys.iter().zip(es).map(|(y, e)| a * y + s * e));
    }
    Tensor::new(y.shape(), out)
}

/// Anything that predicts `ε` from `(x_t, t, conditioning)`.
pub trait NoisePredictor {
    /// `x_t` is `[B×T_O×H×W]`; `t` holds one timestep per sample.
    fn predict_noise(&mut self, x_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor>;
}

/// Returns the exact noise that maps a known target to `x_t`.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    /// Target in `[−1, 1]`.
    pub target: Tensor,
    pub schedule: DiffusionSchedule,
}

impl NoisePredictor for OracleDenoiser {
    fn predict_noise(&mut self, x_t: &Tensor, t: &[usize], _cond: &Tensor) -> Result<Tensor> {
        if x_t.shape() != self.target.shape() {
            return dim_err("oracle target shape differs from x_t");
        }
        let per = x_t.len() / t.len();
        let mut out = Vec::with_capacity(x_t.len());
        for (i, (xs, ys)) in x_t.data().chunks(per).zip(self.target.data().chunks(per)).enumerate() {
            let ab = self.schedule.alpha_bar(t[i]);
            out.extend(xs.iter().zip(ys).map(|(x, y)| (x - ab.sqrt() * y) / (1.0 - ab).sqrt()));
        }
        Tensor::new(x_t.shape(), out)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl NoisePredictor for ZeroDenoiser {
    fn predict_noise(&mut self, x_t: &Tensor, _t: &[usize], _cond: &Tensor) -> Result<Tensor> {
        Ok(Tensor::zeros_like(x_t))
    }
}

/// Denoising loss for one draw: mean `(ε̂ − ε)²`, its per-sample means and
/// `∂L/∂ε̂`.
#[derive(Debug, Clone)]
pub struct DiffusionLoss {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grad_eps_hat: Tensor,
}

pub fn diffusion_loss<P: NoisePredictor + ?Sized>(
    model: &mut P,
    y: &Tensor,
    cond: &Tensor,
    sched: &DiffusionSchedule,
    draw: &DiffusionDraw,
) -> Result<DiffusionLoss> {
    if y.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return config_err("diffusion targets must lie in [0, 1]");
    }
    let x_t = noise(&to_signed(y), draw, sched)?;
    let eps_hat = model.predict_noise(&x_t, &draw.t, cond)?;
    let diff = eps_hat.sub(&draw.eps)?;
    let n = diff.len() as f64;
    let per = diff.len() / draw.t.len();
    let per_sample = diff.data().chunks(per).map(|c| c.iter().map(|v| v * v).sum::<f64>() / per as f64).collect();
    Ok(DiffusionLoss { loss: diff.frobenius_sq() / n, per_sample, grad_eps_hat: diff.scale(2.0 / n) })
}

/// Deterministic (`η = 0`) DDIM from `x_T ~ N(0, I)` over `n_steps` evenly
/// spaced timesteps. Output is clipped and mapped back to `[0, 1]`.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    model: &mut P,
    shape: &[usize],
    cond: &Tensor,
    sched: &DiffusionSchedule,
    n_steps: usize,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let ts = sched.sub_schedule(n_steps)?;
    let b = shape[0];
    let mut x = Tensor::from_fn(shape, |_| rng.normal());
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let eps = model.predict_noise(&x, &vec![t; b], cond)?;
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
        let data = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&xv, &e)| {
                let x0 = (xv - (1.0 - ab).sqrt() * e) / ab.sqrt();
                ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e
            })
            .collect();
        x = Tensor::new(shape, data)?;
    }
    Ok(from_signed(&x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_invariants() {
        let s = DiffusionSchedule::standard();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        for t in 1..1000 {
            assert!(s.beta(t) < s.beta(t + 1));
            assert!(s.alpha_bar(t) > s.alpha_bar(t + 1));
        }
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert_eq!(s.sub_schedule(5).unwrap(), vec![1000, 800, 600, 400, 200]);
        assert_eq!(s.sub_schedule(1000).unwrap().last(), Some(&1));
        assert!(s.sub_schedule(0).is_err());
    }

    #[test]
    fn early_step_is_near_identity() {
        let s = DiffusionSchedule::standard();
        let mut rng = SeededRng::new(1);
        let y = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.uniform_in(-1.0, 1.0));
        let mut draw = DiffusionDraw::sample(y.shape(), &s, &mut rng);
        draw.t = vec![1, 1];
        let x = noise(&y, &draw, &s).unwrap();
        let max_dev = x.sub(&y).unwrap().data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let scale = (1.0 - s.alpha_bar(1)).sqrt();
        assert!((scale - 0.01).abs() < 1e-4);
        assert!(max_dev < 6.0 * scale);
    }

    #[test]
    fn noise_budget_is_conserved() {
        let s = DiffusionSchedule::standard();
        let mut rng = SeededRng::new(2);
        let (b, dim) = (4000, 16);
        let y = Tensor::from_fn(&[b, dim], |k| if k % 2 == 0 { 0.8 } else { -0.3 });
        let mut draw = DiffusionDraw::sample(y.shape(), &s, &mut rng);
        draw.t = vec![300; b];
        let x = noise(&y, &draw, &s).unwrap();
        let ab = s.alpha_bar(300);
        let per: Vec<f64> = x.data().chunks(dim).map(|c| c.iter().map(|v| v * v).sum()).collect();
        let mean = per.iter().sum::<f64>() / b as f64;
        let sd = (per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1) as f64).sqrt();
        let want = ab * (y.frobenius_sq() / b as f64) + (1.0 - ab) * dim as f64;
        assert!((mean - want).abs() < 3.0 * sd / (b as f64).sqrt(), "{mean} vs {want}");
    }

    #[test]
    fn oracle_and_zero_losses() {
        let s = DiffusionSchedule::standard();
        let mut rng = SeededRng::new(3);
        let y = Tensor::from_fn(&[2, 4, 16, 16], |_| rng.uniform());
        let cond = Tensor::zeros(&[2, 1, 16, 16]);
        let draw = DiffusionDraw::sample(y.shape(), &s, &mut rng);
        let mut oracle = OracleDenoiser { target: to_signed(&y), schedule: s.clone() };
        let l = diffusion_loss(&mut oracle, &y, &cond, &s, &draw).unwrap();
        assert!(l.loss < 1e-20);

        let l = diffusion_loss(&mut ZeroDenoiser, &y, &cond, &s, &draw).unwrap();
        let sq: Vec<f64> = draw.eps.data().iter().map(|e| e * e).collect();
        let n = sq.len() as f64;
        let m = sq.iter().sum::<f64>() / n;
        let sd = (sq.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((l.loss - m).abs() < 1e-12);
        assert!((l.loss - 1.0).abs() < 3.0 * sd / n.sqrt());
        assert!(diffusion_loss(&mut ZeroDenoiser, &y.scale(2.0), &cond, &s, &draw).is_err());
    }

    #[test]
    fn ddim_with_oracle_recovers_target() {
        let s = DiffusionSchedule::standard();
        let mut rng = SeededRng::new(4);
        let y = Tensor::from_fn(&[1, 2, 8, 8], |_| rng.uniform());
        let cond = Tensor::zeros(&[1, 1, 8, 8]);
        let mut oracle = OracleDenoiser { target: to_signed(&y), schedule: s.clone() };
        let five = ddim_sample(&mut oracle, y.shape(), &cond, &s, 5, &mut SeededRng::new(9)).unwrap();
        assert!(five.max_abs_diff(&y).unwrap() < 1e-3);
        let fifty = ddim_sample(&mut oracle, y.shape(), &cond, &s, 50, &mut SeededRng::new(9)).unwrap();
        assert!(five.max_abs_diff(&fifty).unwrap() < 1e-6);
        let again = ddim_sample(&mut oracle, y.shape(), &cond, &s, 5, &mut SeededRng::new(9)).unwrap();
        assert_eq!(five, again);
    }

    /// Hand-unrolled two-step recursion with a constant predicted noise.
    #[test]
    fn ddim_update_matches_recursion() {
        struct Const(f64);
        impl NoisePredictor for Const {
            fn predict_noise(&mut self, x: &Tensor, _: &[usize], _: &Tensor) -> Result<Tensor> {
                Ok(Tensor::filled(x.shape(), self.0))
            }
        }
        let s = DiffusionSchedule::standard();
        let cond = Tensor::zeros(&[1]);
        let got = ddim_sample(&mut Const(0.1), &[1, 1], &cond, &s, 2, &mut SeededRng::new(5)).unwrap();
        let x = SeededRng::new(5).normal();
        let step = |x: f64, ab: f64, ab_prev: f64| {
            let x0 = (x - (1.0 - ab).sqrt() * 0.1) / ab.sqrt();
            ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * 0.1
        };
        let x = step(x, s.alpha_bar(1000), s.alpha_bar(500));
        let x = step(x, s.alpha_bar(500), 1.0);
        assert!((got.data()[0] - (x.clamp(-1.0, 1.0) + 1.0) / 2.0).abs() < 1e-12);
    }
}
