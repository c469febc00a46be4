//! Head-wise attention response energy and the group-wise stabilization loss.
//!
//! For sample `i` and head `m` the energy is `e[i,m] = ‖O[i,m]‖²_F`. Heads are
//! split by their batch-mean energy into a single strongest head, a weak set
//! (`ē_m < α·ē`) and the contextual remainder. Each sample's per-group mean
//! energy is pulled toward the batch mean of that group with a one-sided
//! (ReLU) penalty:
//!
//! ```text
//! L = (1/B) Σ_i mask_i Σ_g relu(e_i^g − μ_g),   μ_g = (1/B) Σ_i e_i^g
//! ```
//!
//! Empty groups are absent rather than zero and contribute nothing.

use serde::Serialize;

use crate::attention::HeadActivations;
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{frobenius_sq, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum MaskStrategy {
    AllOnes,
    /// Keep the given fraction of samples with the highest per-sample loss.
    TopFractionBySampleLoss(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Grouping {
    /// Strong / contextual / weak partition.
    ThreeWay,
    /// One shared target over all heads.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HareConfig {
    pub alpha: f64,
    pub mask: MaskStrategy,
    pub detach_target: bool,
    pub grouping: Grouping,
    /// Divide energies by the token count. Off by default.
    pub normalize_by_tokens: bool,
}

impl Default for HareConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            mask: MaskStrategy::AllOnes,
            detach_target: true,
            grouping: Grouping::ThreeWay,
            normalize_by_tokens: false,
        }
    }
}

impl HareConfig {
    pub fn with_alpha(alpha: f64) -> Result<Self> {
        let cfg = Self { alpha, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return config_err(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if let MaskStrategy::TopFractionBySampleLoss(f) = self.mask {
            if !(f > 0.0 && f <= 1.0) {
                return config_err(format!("mask fraction must lie in (0, 1], got {f}"));
            }
        }
        Ok(())
    }
}

/// Per-sample per-head energies with their batch and head means.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyBatch {
    energies: Tensor,
    head_means: Vec<f64>,
    global_mean: f64,
}

impl EnergyBatch {
    /// From a `[B×M]` table of nonnegative energies.
    pub fn from_energies(energies: Tensor) -> Result<Self> {
        let (b, m) = energies.dims2()?;
        if energies.data().iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
            return dim_err("energies must be finite and nonnegative");
        }
        let head_means: Vec<f64> =
            (0..m).map(|h| (0..b).map(|i| energies.get2(i, h)).sum::<f64>() / b as f64).collect();
        let global_mean = head_means.iter().sum::<f64>() / m as f64;
        Ok(Self { energies, head_means, global_mean })
    }

    pub fn batch(&self) -> usize {
        self.energies.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.energies.shape()[1]
    }

    pub fn energy(&self, sample: usize, head: usize) -> f64 {
        self.energies.get2(sample, head)
    }

    pub fn energies(&self) -> &Tensor {
        &self.energies
    }

    /// `ē_m`, the batch mean of each head.
    pub fn head_means(&self) -> &[f64] {
        &self.head_means
    }

    /// `ē`, the mean of `ē_m` over heads.
    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }
}

/// Fails only when the responses contain non-finite values.
pub fn compute_energies(acts: &HeadActivations, normalize_by_tokens: bool) -> Result<EnergyBatch> {
    let (b, m) = (acts.batch(), acts.heads());
    let norm = if normalize_by_tokens { acts.tokens() as f64 } else { 1.0 };
    let e = Tensor::from_fn(&[b, m], |k| frobenius_sq(acts.response(k / m, k % m)) / norm);
    EnergyBatch::from_energies(e).map_err(|_| Error::Degenerate("attention responses are not finite".into()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HeadPartition {
    pub strong: Vec<usize>,
    pub contextual: Vec<usize>,
    pub weak: Vec<usize>,
}

/// Strongest head (lowest index on ties), weak heads strictly below
/// `alpha·ē`, contextual heads otherwise.
pub fn partition_heads(eb: &EnergyBatch, alpha: f64) -> Result<HeadPartition> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return config_err(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let means = eb.head_means();
    let mut strong = 0;
    for (h, &e) in means.iter().enumerate() {
        if e > means[strong] {
            strong = h;
        }
    }
    let cut = alpha * eb.global_mean();
    let mut contextual = Vec::new();
    let mut weak = Vec::new();
    for (h, &e) in means.iter().enumerate() {
        if h == strong {
            continue;
        }
        if e < cut {
            weak.push(h);
        } else {
            contextual.push(h);
        }
    }
    Ok(HeadPartition { strong: vec![strong], contextual, weak })
}

/// Ordered head groups over which energies are averaged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HeadGroups(pub Vec<Vec<usize>>);

impl HeadGroups {
    pub fn from_partition(p: &HeadPartition) -> Self {
        Self(vec![p.strong.clone(), p.contextual.clone(), p.weak.clone()])
    }

    pub fn shared(heads: usize) -> Self {
        Self(vec![(0..heads).collect()])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Group index and group size containing `head`.
    pub fn group_of(&self, head: usize) -> Option<(usize, usize)> {
        self.0.iter().enumerate().find(|(_, g)| g.contains(&head)).map(|(gi, g)| (gi, g.len()))
    }
}

/// `e_i^g` per group; `None` marks an empty group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEnergies {
    pub groups: Vec<Option<Vec<f64>>>,
    batch: usize,
}

impl GroupEnergies {
    pub fn new(groups: Vec<Option<Vec<f64>>>, batch: usize) -> Result<Self> {
        if groups.iter().flatten().any(|g| g.len() != batch) {
            return dim_err(format!("every present group needs {batch} sample energies"));
        }
        Ok(Self { groups, batch })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn get(&self, sample: usize, group: usize) -> Option<f64> {
        self.groups[group].as_ref().map(|g| g[sample])
    }
}

pub fn group_energies(eb: &EnergyBatch, groups: &HeadGroups) -> Result<GroupEnergies> {
    let b = eb.batch();
    let m = eb.heads();
    let mut out = Vec::with_capacity(groups.len());
    for g in &groups.0 {
        if g.iter().any(|&h| h >= m) {
            return dim_err(format!("group {g:?} references heads beyond {m}"));
        }
        if g.is_empty() {
            out.push(None);
            continue;
        }
        let k = g.len() as f64;
        out.push(Some((0..b).map(|i| g.iter().map(|&h| eb.energy(i, h)).sum::<f64>() / k).collect()));
    }
    GroupEnergies::new(out, b)
}

/// Loss value, per-group targets and `∂L/∂e_i^g`.
#[derive(Debug, Clone, PartialEq)]
pub struct HareLoss {
    pub loss: f64,
    pub targets: Vec<Option<f64>>,
    pub grad: GroupEnergies,
    /// Samples with a positive contribution in at least one group.
    pub active: Vec<bool>,
}

pub fn hare_loss(ge: &GroupEnergies, mask: &[f64], cfg: &HareConfig) -> Result<HareLoss> {
    let b = ge.batch();
    if b < 2 {
        return config_err(format!("the stabilization loss needs a batch of at least 2, got {b}"));
    }
    if mask.len() != b || mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return config_err(format!("mask must hold {b} entries in {{0, 1}}"));
    }
    let bf = b as f64;
    let mut loss = 0.0;
    let mut targets = Vec::with_capacity(ge.groups.len());
    let mut grads = Vec::with_capacity(ge.groups.len());
    let mut active = vec![false; b];
    for g in &ge.groups {
        let Some(e) = g else {
            targets.push(None);
            grads.push(None);
            continue;
        };
        let mu = e.iter().sum::<f64>() / bf;
        let mut grad = vec![0.0; b];
        let mut active_mass = 0.0;
        for i in 0..b {
            let dev = e[i] - mu;
            if dev > 0.0 {
                loss += mask[i] * dev / bf;
                grad[i] = mask[i] / bf;
                active_mass += mask[i];
                active[i] |= mask[i] > 0.0;
            }
        }
        if !cfg.detach_target {
            // μ_g depends on every sample: ∂μ/∂e_j = 1/B.
            let shift = active_mass / (bf * bf);
            grad.iter_mut().for_each(|v| *v -= shift);
        }
        targets.push(Some(mu));
        grads.push(Some(grad));
    }
    Ok(HareLoss { loss, targets, grad: GroupEnergies::new(grads, b)?, active })
}

/// Chains `∂L/∂e_i^g` through the group mean and the Frobenius energy:
/// `∂L/∂O[i,m] = ∂L/∂e_i^g · (1/|g|) · 2·O[i,m]`.
pub fn hare_grad_to_o(
    grad_ge: &GroupEnergies,
    groups: &HeadGroups,
    acts: &HeadActivations,
    normalize_by_tokens: bool,
) -> Result<Tensor> {
    let (b, m) = (acts.batch(), acts.heads());
    if grad_ge.batch() != b || grad_ge.groups.len() != groups.len() {
        return dim_err("group gradients do not match the activations");
    }
    let norm = if normalize_by_tokens { acts.tokens() as f64 } else { 1.0 };
    let len = acts.tokens() * acts.head_dim();
    let mut out = vec![0.0; b * m * len];
    for h in 0..m {
        let Some((gi, size)) = groups.group_of(h) else { continue };
        for i in 0..b {
            let Some(g) = grad_ge.get(i, gi) else { continue };
            if g == 0.0 {
                continue;
            }
            let c = 2.0 * g / (size as f64 * norm);
            let off = (i * m + h) * len;
            for (o, &r) in out[off..off + len].iter_mut().zip(acts.response(i, h)) {
                *o = c * r;
            }
        }
    }
    Tensor::new(acts.responses.shape(), out)
}

/// Unbiased (n−1) variance of each head's energy across the batch.
pub fn cross_sample_variance(eb: &EnergyBatch) -> Result<Vec<f64>> {
    let b = eb.batch();
    if b < 2 {
        return config_err(format!("cross-sample variance needs at least 2 samples, got {b}"));
    }
    Ok((0..eb.heads())
        .map(|h| {
            let mean = eb.head_means()[h];
            (0..b).map(|i| (eb.energy(i, h) - mean).powi(2)).sum::<f64>() / (b - 1) as f64
        })
        .collect())
}

/// Mask for the given strategy. Ties in the per-sample loss go to the lower index.
pub fn select_mask(strategy: MaskStrategy, batch: usize, sample_loss: Option<&[f64]>) -> Result<Vec<f64>> {
    match strategy {
        MaskStrategy::AllOnes => Ok(vec![1.0; batch]),
        MaskStrategy::TopFractionBySampleLoss(f) => {
            let Some(losses) = sample_loss else {
                return config_err("top-fraction mask needs per-sample losses");
            };
            if losses.len() != batch {
                return dim_err(format!("{} sample losses for a batch of {batch}", losses.len()));
            }
            let keep = ((f * batch as f64).ceil() as usize).clamp(1, batch);
            let mut order: Vec<usize> = (0..batch).collect();
            order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
            let mut mask = vec![0.0; batch];
            for &i in &order[..keep] {
                mask[i] = 1.0;
            }
            Ok(mask)
        }
    }
}

/// Everything the stabilization loss produces for one attention block.
#[derive(Debug, Clone)]
pub struct LayerHare {
    pub energies: EnergyBatch,
    pub partition: HeadPartition,
    pub groups: HeadGroups,
    pub loss: HareLoss,
    pub grad_o: Tensor,
}

/// Energies, partition, loss and the gradient at `O` for one block.
pub fn evaluate_block(acts: &HeadActivations, cfg: &HareConfig, mask: &[f64]) -> Result<LayerHare> {
    cfg.validate()?;
    let energies = compute_energies(acts, cfg.normalize_by_tokens)?;
    let partition = partition_heads(&energies, cfg.alpha)?;
    let groups = match cfg.grouping {
        Grouping::ThreeWay => HeadGroups::from_partition(&partition),
        Grouping::Shared => HeadGroups::shared(energies.heads()),
    };
    let ge = group_energies(&energies, &groups)?;
    let loss = hare_loss(&ge, mask, cfg)?;
    let grad_o = hare_grad_to_o(&loss.grad, &groups, acts, cfg.normalize_by_tokens)?;
    Ok(LayerHare { energies, partition, groups, loss, grad_o })
}
