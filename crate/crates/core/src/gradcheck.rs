//! Central finite-difference checks of the hand-written backward passes,
//! using the fourth-order stencil `(−f(2h) + 8f(h) − 8f(−h) + f(−2h)) / 12h`.
//!
//! Relative error is `|a − n| / max(|a|, |n|, floor)`. Coordinates where a
//! step within `±2h` changes the piecewise structure of the loss (head partition,
//! active samples or mask) are reported as kinks and not scored.

use serde::Serialize;

use crate::attention::{AttentionConfig, MultiHeadAttention};
use crate::error::Result;
use crate::hare::{evaluate_block, HareConfig, HeadPartition};
use crate::nn::Module;
use crate::nowcast::{Batch, DiffusionDraw, HareCast, LayerStats, LossWeights, ModelConfig, StepStats};
use crate::synth::{Event, EventConfig, EventSpec};
use crate::tensor::{SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Step for the end-to-end model, whose loss carries more rounding noise.
    pub model_step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Coordinates sampled per parameter tensor; larger tensors are subsampled.
    pub coords_per_tensor: usize,
    /// Adds `delta` to the analytic gradient of the first coordinate of the
    /// named parameter, to exercise the failure path.
    pub perturb: Option<(String, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, model_step: 1e-4, tolerance: 1e-5, floor: 1e-4, coords_per_tensor: 16, perturb: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub kink: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub suite: String,
    pub seed: u64,
    pub checks: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub pass: bool,
}

impl GradReport {
    fn new(suite: &str, seed: u64, checks: Vec<CoordCheck>, tol: f64) -> Self {
        let worst = checks.iter().filter(|c| !c.kink).max_by(|a, b| a.rel_err.total_cmp(&b.rel_err));
        let max_rel_err = worst.map_or(0.0, |c| c.rel_err);
        let worst_param = worst.map(|c| c.param.clone());
        let scored = checks.iter().any(|c| !c.kink);
        Self { suite: suite.to_string(), seed, pass: scored && max_rel_err < tol, max_rel_err, worst_param, checks }
    }

    pub fn kinks(&self) -> usize {
        self.checks.iter().filter(|c| c.kink).count()
    }
}

/// A loss value together with a fingerprint of its piecewise structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub signature: Vec<u64>,
}

/// Compare the gradients stored in `model` against central differences of
/// `eval`. The model is restored after every coordinate.
pub fn check_params<M: Module>(
    model: &mut M,
    eval: &mut dyn FnMut(&mut M) -> Result<Evaluation>,
    opts: &GradCheckOptions,
    rng: &mut SeededRng,
) -> Result<Vec<CoordCheck>> {
    let base = eval(model)?;
    let mut targets: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit("", &mut |name, p| {
        let n = p.value.len();
        let idx: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut picked: Vec<usize> = (0..opts.coords_per_tensor).map(|_| rng.below(n)).collect();
            picked.sort_unstable();
            picked.dedup();
            picked
        };
        let mut grads: Vec<f64> = idx.iter().map(|&i| p.grad.data()[i]).collect();
        if let Some((target, delta)) = &opts.perturb {
            if target == name {
                grads[0] += delta;
            }
        }
        targets.push((name.to_string(), idx, grads));
    });
    let mut out = Vec::new();
    for (name, idx, grads) in targets {
        for (&i, &analytic) in idx.iter().zip(&grads) {
            let mut at = |delta: f64, model: &mut M| -> Result<Evaluation> {
                model.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[i] += delta;
                    }
                });
                let e = eval(model);
                model.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[i] -= delta;
                    }
                });
                e
            };
            let h = opts.step;
            let evals = [at(2.0 * h, model)?, at(h, model)?, at(-h, model)?, at(-2.0 * h, model)?];
            let [p2, p1, m1, m2] = [0, 1, 2, 3].map(|k| evals[k].loss);
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let kink = evals.iter().any(|e| e.signature != base.signature);
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            out.push(CoordCheck { param: name.clone(), index: i, analytic, numeric, rel_err, kink });
        }
    }
    Ok(out)
}

fn partition_signature(p: &HeadPartition, sig: &mut Vec<u64>) {
    for group in [&p.strong, &p.contextual, &p.weak] {
        sig.push(u64::MAX);
        sig.extend(group.iter().map(|&h| h as u64));
    }
}

fn layer_signature(layers: &[LayerStats], mask: &[f64]) -> Vec<u64> {
    let mut sig: Vec<u64> = mask.iter().map(|&m| m as u64).collect();
    for l in layers {
        partition_signature(&l.partition, &mut sig);
        sig.extend(l.active.iter().map(|&a| a as u64));
    }
    sig
}

/// Finite differences see the target move with the parameters, so the
/// checks use the attached-target gradient.
fn exact_hare() -> HareConfig {
    HareConfig { detach_target: false, ..HareConfig::default() }
}

/// Self-attention with a fixed linear readout of its output.
pub fn attention_suite(seed: u64, opts: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = SeededRng::new(seed);
    let mut blk = MultiHeadAttention::new(AttentionConfig::new(8, 2)?, &mut rng);
    let x = Tensor::from_fn(&[2, 5, 8], |_| rng.normal());
    let probe = Tensor::from_fn(&[2, 5, 8], |_| rng.normal());
    blk.zero_grad();
    blk.forward(&x)?;
    blk.backward(&probe, None)?;
    let mut eval = |b: &mut MultiHeadAttention| -> Result<Evaluation> {
        let y = b.forward(&x)?;
        Ok(Evaluation { loss: y.mul(&probe)?.sum(), signature: vec![] })
    };
    let checks = check_params(&mut blk, &mut eval, opts, &mut rng)?;
    Ok(GradReport::new("attention", seed, checks, opts.tolerance))
}

/// The stabilization loss of one block, back through the attention weights.
pub fn hare_suite(seed: u64, opts: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = SeededRng::new(seed);
    let mut blk = MultiHeadAttention::new(AttentionConfig::new(8, 4)?, &mut rng);
    let x = Tensor::from_fn(&[4, 6, 8], |_| rng.normal());
    let cfg = exact_hare();
    let mask = vec![1.0; 4];
    blk.zero_grad();
    blk.forward(&x)?;
    let lh = evaluate_block(blk.activations().expect("forward ran"), &cfg, &mask)?;
    blk.backward(&Tensor::zeros(&[4, 6, 8]), Some(&lh.grad_o))?;
    let mut eval = |b: &mut MultiHeadAttention| -> Result<Evaluation> {
        b.forward(&x)?;
        let lh = evaluate_block(b.activations().expect("forward ran"), &cfg, &mask)?;
        let mut sig = Vec::new();
        partition_signature(&lh.partition, &mut sig);
        sig.extend(lh.loss.active.iter().map(|&a| a as u64));
        Ok(Evaluation { loss: lh.loss.loss, signature: sig })
    };
    let checks = check_params(&mut blk, &mut eval, opts, &mut rng)?;
    Ok(GradReport::new("hare", seed, checks, opts.tolerance))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Objective {
    /// `L_hare` alone.
    Hare,
    /// `λ1·L_recon + λ2·L_hare + λ3·L_diff` at the default weights.
    Full,
}

impl Objective {
    pub fn weights(self) -> LossWeights {
        match self {
            Objective::Hare => LossWeights { recon: 0.0, hare: 1.0, diff: 0.0 },
            Objective::Full => LossWeights::default(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Hare => "micro.hare",
            Objective::Full => "micro.full",
        }
    }
}

/// End-to-end check on the micro model with a fixed batch and diffusion draw.
pub fn nowcast_suite(seed: u64, objective: Objective, opts: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = SeededRng::new(seed);
    let cfg = ModelConfig::micro();
    let mut model = HareCast::new(cfg, &mut rng)?;
    let ecfg = EventConfig {
        height: cfg.encoder.height,
        width: cfg.encoder.width,
        t_in: cfg.encoder.t_in,
        t_out: cfg.t_out,
        ..EventConfig::default()
    };
    let events: Vec<Event> = (0..2)
        .map(|i| Event::generate(EventSpec::random(seed.wrapping_mul(31).wrapping_add(i), &ecfg), &ecfg))
        .collect::<Result<_>>()?;
    let refs: Vec<&Event> = events.iter().collect();
    let batch = Batch::from_events(&refs, &cfg)?;
    let draw = DiffusionDraw::sample(batch.target.shape(), &model.schedule, &mut rng);
    let weights = objective.weights();
    let hare = exact_hare();
    model.step(&batch, &draw, &weights, Some(&hare), true)?;
    let mut eval = |m: &mut HareCast| -> Result<Evaluation> {
        let s: StepStats = m.step(&batch, &draw, &weights, Some(&hare), false)?;
        Ok(Evaluation { loss: s.total, signature: layer_signature(&s.layers, &s.mask) })
    };
    let model_opts = GradCheckOptions { step: opts.model_step, ..opts.clone() };
    let checks = check_params(&mut model, &mut eval, &model_opts, &mut rng)?;
    Ok(GradReport::new(objective.name(), seed, checks, opts.tolerance))
}

/// Every suite for every seed, in a fixed order.
pub fn run_all(seeds: &[u64], opts: &GradCheckOptions) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for &s in seeds {
        out.push(attention_suite(s, opts)?);
        out.push(hare_suite(s, opts)?);
        out.push(nowcast_suite(s, Objective::Hare, opts)?);
        out.push(nowcast_suite(s, Objective::Full, opts)?);
    }
    Ok(out)
}
