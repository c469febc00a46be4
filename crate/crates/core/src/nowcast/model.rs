//! The assembled toy nowcaster, its combined objective and SGD training.

use crate::archive;
use crate::error::{config_err, dim_err, Error, Result};
use crate::hare::{compute_energies, evaluate_block, select_mask, EnergyBatch, HareConfig, HeadPartition};
use crate::nn::{join, Linear, Module, Param};
use crate::nowcast::denoiser::{Denoiser, DenoiserConfig};
use crate::nowcast::diffusion::{ddim_sample, diffusion_loss, DiffusionDraw, DiffusionSchedule};
use crate::nowcast::encoder::{mse_with_grad, Decoder, Encoder, EncoderConfig, ModalityMode};
use crate::synth::{Event, FrameSequence, Modality};
use crate::tensor::{SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub hare: f64,
    pub diff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { recon: 1.0, hare: 1.0, diff: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.recon, self.hare, self.diff].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return config_err(format!("loss weights must be finite and nonnegative: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub t_out: usize,
    pub cond_channels: usize,
    pub channels: (usize, usize, usize),
    pub attn_heads: usize,
    pub time_dim: usize,
    pub sample_steps: usize,
}

impl ModelConfig {
    /// 32×32 frames, 5 in, 20 out, 8×8 patches, d = 16, M = 4, L = 2.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                height: 32,
                width: 32,
                t_in: 5,
                patch: 8,
                dim: 16,
                layers: 2,
                heads: 4,
                mode: ModalityMode::Unimodal,
            },
            t_out: 20,
            cond_channels: 4,
            channels: (8, 16, 16),
            attn_heads: 2,
            time_dim: 8,
            sample_steps: 5,
        }
    }

    /// d = 8, M = 2, L = 1 on 16×16 frames, for gradient checks.
    pub fn micro() -> Self {
        Self {
            encoder: EncoderConfig {
                height: 16,
                width: 16,
                t_in: 2,
                patch: 4,
                dim: 8,
                layers: 1,
                heads: 2,
                mode: ModalityMode::Unimodal,
            },
            t_out: 2,
            cond_channels: 2,
            channels: (3, 4, 4),
            attn_heads: 2,
            time_dim: 4,
            sample_steps: 5,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            frames: self.t_out,
            cond_channels: self.cond_channels,
            channels: self.channels,
            attn_heads: self.attn_heads,
            time_dim: self.time_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.denoiser().validate(self.encoder.height, self.encoder.width)?;
        if self.t_out == 0 || self.cond_channels == 0 {
            return config_err("t_out and cond_channels must be positive");
        }
        Ok(())
    }
}

/// Projects `F` averaged over time tokens and broadcasts each patch
/// location's value over its pixels.
#[derive(Debug, Clone)]
pub struct Conditioner {
    pub proj: Linear,
    cfg: EncoderConfig,
}

impl Conditioner {
    pub fn new(cfg: EncoderConfig, channels: usize, rng: &mut SeededRng) -> Self {
        Self { proj: Linear::new(cfg.dim, channels, rng), cfg }
    }

    pub fn forward(&mut self, f: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        let &[b, n, d] = f.shape() else {
            return dim_err(format!("conditioner expects [B×N×d], got {:?}", f.shape()));
        };
        let g = c.locations();
        if n != c.tokens() || d != c.dim {
            return dim_err("conditioner input does not match the encoder layout");
        }
        let mut fbar = vec![0.0; b * g * d];
        for bi in 0..b {
            for t in 0..c.t_in {
                for loc in 0..g {
                    let src = &f.data()[((bi * n) + t * g + loc) * d..][..d];
                    let dst = &mut fbar[(bi * g + loc) * d..][..d];
                    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v / c.t_in as f64);
                }
            }
        }
        let z = self.proj.forward(&Tensor::new(&[b * g, d], fbar)?)?;
        let ch = self.proj.outputs();
        let (h, w, p) = (c.height, c.width, c.patch);
        let gw = c.grid().1;
        let mut out = vec![0.0; b * ch * h * w];
        for bi in 0..b {
            for k in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        out[((bi * ch + k) * h + y) * w + x] = z.data()[(bi * g + (y / p) * gw + x / p) * ch + k];
                    }
                }
            }
        }
        Tensor::new(&[b, ch, h, w], out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        let ch = self.proj.outputs();
        let (h, w, p) = (c.height, c.width, c.patch);
        let b = grad.shape()[0];
        let g = c.locations();
        let gw = c.grid().1;
        let mut gz = vec![0.0; b * g * ch];
        for bi in 0..b {
            for k in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        gz[(bi * g + (y / p) * gw + x / p) * ch + k] += grad.data()[((bi * ch + k) * h + y) * w + x];
                    }
                }
            }
        }
        let gf = self.proj.backward(&Tensor::new(&[b * g, ch], gz)?)?;
        let (n, d) = (c.tokens(), c.dim);
        let mut out = vec![0.0; b * n * d];
        for bi in 0..b {
            for t in 0..c.t_in {
                for loc in 0..g {
                    let src = &gf.data()[(bi * g + loc) * d..][..d];
                    let dst = &mut out[((bi * n) + t * g + loc) * d..][..d];
                    dst.iter_mut().zip(src).for_each(|(o, v)| *o = v / c.t_in as f64);
                }
            }
        }
        Tensor::new(&[b, n, d], out)
    }
}

impl Module for Conditioner {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.proj.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj.visit_mut(prefix, f);
    }
}

/// Stacked context and target windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B×T_I×H×W]`.
    pub radar: Tensor,
    pub satellite: Option<Tensor>,
    /// `[B×T_O×H×W]` in `[0, 1]`.
    pub target: Tensor,
}

impl Batch {
    pub fn from_events(events: &[&Event], cfg: &ModelConfig) -> Result<Self> {
        let t_in = cfg.encoder.t_in;
        let stack = |f: &dyn Fn(&Event) -> Result<FrameSequence>| -> Result<Tensor> {
            let parts = events.iter().map(|e| f(e).map(|s| s.frames().clone())).collect::<Result<Vec<_>>>()?;
            Tensor::stack(&parts)
        };
        let radar = stack(&|e| e.radar.window(0, t_in))?;
        let satellite = match cfg.encoder.mode {
            ModalityMode::Unimodal => None,
            ModalityMode::Multimodal => Some(stack(&|e| e.satellite.window(0, t_in))?),
        };
        let target = stack(&|e| e.radar.window(t_in, t_in + cfg.t_out))?;
        Ok(Self { radar, satellite, target })
    }

    pub fn size(&self) -> usize {
        self.radar.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct LayerStats {
    pub energies: EnergyBatch,
    pub partition: HeadPartition,
    pub loss: f64,
    pub active: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub l_recon: f64,
    /// Mean block loss; `None` when the module is disabled or skipped.
    pub l_hare: Option<f64>,
    pub l_diff: f64,
    pub total: f64,
    pub mask: Vec<f64>,
    pub layers: Vec<LayerStats>,
}

#[derive(Debug, Clone)]
pub struct HareCast {
    cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoders: Vec<Decoder>,
    pub conditioner: Conditioner,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
}

impl HareCast {
    pub fn new(cfg: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder, rng)?;
        let decoders = (0..cfg.encoder.mode.channels()).map(|_| Decoder::new(cfg.encoder, rng)).collect();
        let conditioner = Conditioner::new(cfg.encoder, cfg.cond_channels, rng);
        let denoiser = Denoiser::new(cfg.denoiser(), rng)?;
        Ok(Self { cfg, encoder, decoders, conditioner, denoiser, schedule: DiffusionSchedule::standard() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Combined objective for one batch and diffusion draw. With `backward`,
    /// parameter gradients are reset and then filled for that objective.
    pub fn step(
        &mut self,
        batch: &Batch,
        draw: &DiffusionDraw,
        weights: &LossWeights,
        hare: Option<&HareConfig>,
        backward: bool,
    ) -> Result<StepStats> {
        weights.validate()?;
        let b = batch.size();
        if weights.hare > 0.0 && hare.is_some() && b < 2 {
            return config_err(format!("the stabilization loss needs a batch of at least 2, got {b}"));
        }
        let tokens = self.encoder.tokenize(&batch.radar, batch.satellite.as_ref())?;
        let f = self.encoder.forward(&tokens)?;

        let mut inputs = vec![&batch.radar];
        inputs.extend(batch.satellite.as_ref());
        let mut l_recon = 0.0;
        let mut recon_grads = Vec::with_capacity(inputs.len());
        for (dec, x) in self.decoders.iter_mut().zip(&inputs) {
            let (l, g) = mse_with_grad(&dec.forward(&f)?, x)?;
            l_recon += l;
            recon_grads.push(g);
        }

        let cond = self.conditioner.forward(&f)?;
        let dl = diffusion_loss(&mut self.denoiser, &batch.target, &cond, &self.schedule, draw)?;

        let mut mask = vec![1.0; b];
        let mut layers = Vec::new();
        let mut grad_o = Vec::new();
        if let Some(hc) = hare.filter(|_| b >= 2) {
            mask = select_mask(hc.mask, b, Some(&dl.per_sample))?;
            for acts in self.encoder.activations() {
                let lh = evaluate_block(acts, hc, &mask)?;
                layers.push(LayerStats {
                    energies: lh.energies,
                    partition: lh.partition,
                    loss: lh.loss.loss,
                    active: lh.loss.active,
                });
                grad_o.push(lh.grad_o);
            }
        }
        let l_hare = (!layers.is_empty()).then(|| layers.iter().map(|l| l.loss).sum::<f64>() / layers.len() as f64);
        let total = weights.recon * l_recon + weights.hare * l_hare.unwrap_or(0.0) + weights.diff * dl.loss;

        if backward {
            self.zero_grad();
            let g_eps = dl.grad_eps_hat.scale(weights.diff);
            let g_cond = self.denoiser.backward(&g_eps)?;
            let mut g_f = self.conditioner.backward(&g_cond)?;
            if weights.recon != 0.0 {
                for (dec, g) in self.decoders.iter_mut().zip(&recon_grads) {
                    g_f = g_f.add(&dec.backward(&g.scale(weights.recon))?)?;
                }
            }
            let extra: Vec<Option<Tensor>> = if weights.hare != 0.0 && !grad_o.is_empty() {
                let per_layer = weights.hare / grad_o.len() as f64;
                grad_o.iter().map(|g| Some(g.scale(per_layer))).collect()
            } else {
                vec![]
            };
            self.encoder.backward(&g_f, &extra)?;
        }
        Ok(StepStats { l_recon, l_hare, l_diff: dl.loss, total, mask, layers })
    }

    /// Per-block head energies for a batch, encoder only.
    pub fn probe_energies(&mut self, radar: &Tensor, satellite: Option<&Tensor>, normalize_by_tokens: bool) -> Result<Vec<EnergyBatch>> {
        let tokens = self.encoder.tokenize(radar, satellite)?;
        self.encoder.forward(&tokens)?;
        self.encoder.activations().into_iter().map(|a| compute_energies(a, normalize_by_tokens)).collect()
    }

    /// Inference-only copy: encoder, conditioning and denoiser.
    pub fn forecaster(&self, seed: u64) -> Forecaster {
        Forecaster {
            cfg: self.cfg,
            encoder: self.encoder.clone(),
            conditioner: self.conditioner.clone(),
            denoiser: self.denoiser.clone(),
            schedule: self.schedule.clone(),
            rng: SeededRng::new(seed),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n.to_string(), p.value.clone())));
        out
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let params = self.named_params();
        let refs: Vec<(&str, &Tensor)> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        archive::encode_tensors(&refs)
    }

    pub fn load_params(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        let mut missing = Vec::new();
        self.visit_mut("", &mut |n, p| match params.iter().find(|(k, _)| k == n) {
            Some((_, t)) if t.shape() == p.value.shape() => p.value = t.clone(),
            _ => missing.push(n.to_string()),
        });
        if !missing.is_empty() {
            return Err(Error::Format(format!("checkpoint lacks or mis-shapes: {}", missing.join(", "))));
        }
        Ok(())
    }
}

impl Module for HareCast {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (i, d) in self.decoders.iter().enumerate() {
            d.visit(&join(prefix, &format!("decoder{i}")), f);
        }
        self.conditioner.visit(&join(prefix, "cond"), f);
        self.denoiser.visit(&join(prefix, "denoiser"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        for (i, d) in self.decoders.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("decoder{i}")), f);
        }
        self.conditioner.visit_mut(&join(prefix, "cond"), f);
        self.denoiser.visit_mut(&join(prefix, "denoiser"), f);
    }
}

/// The inference path. It holds no reconstruction decoders.
#[derive(Debug, Clone)]
pub struct Forecaster {
    cfg: ModelConfig,
    encoder: Encoder,
    conditioner: Conditioner,
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
    rng: SeededRng,
}

impl Forecaster {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `[B×T_O×H×W]` forecast in `[0, 1]`.
    pub fn predict(&mut self, radar: &Tensor, satellite: Option<&Tensor>) -> Result<Tensor> {
        let tokens = self.encoder.tokenize(radar, satellite)?;
        let f = self.encoder.forward(&tokens)?;
        let cond = self.conditioner.forward(&f)?;
        let e = &self.cfg.encoder;
        let shape = [radar.shape()[0], self.cfg.t_out, e.height, e.width];
        ddim_sample(&mut self.denoiser, &shape, &cond, &self.schedule, self.cfg.sample_steps, &mut self.rng)
    }
}

impl crate::nowcast::rollout::ChunkPredictor for Forecaster {
    fn context_len(&self) -> usize {
        self.cfg.encoder.t_in
    }

    fn chunk_len(&self) -> usize {
        self.cfg.t_out
    }

    fn uses_satellite(&self) -> bool {
        self.cfg.encoder.mode == ModalityMode::Multimodal
    }

    fn predict_chunk(&mut self, radar: &FrameSequence, satellite: Option<&FrameSequence>) -> Result<FrameSequence> {
        let lift = |s: &FrameSequence| s.frames().clone().reshape(&[1, s.len(), s.height(), s.width()]);
        let r = lift(radar)?;
        let s = satellite.map(lift).transpose()?;
        let y = self.predict(&r, s.as_ref())?;
        let e = &self.cfg.encoder;
        FrameSequence::new(y.reshape(&[self.cfg.t_out, e.height, e.width])?, Modality::Radar, radar.dt_minutes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    /// `None` removes the stabilization module entirely.
    pub hare: Option<HareConfig>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, n_events: usize) -> Result<()> {
        self.weights.validate()?;
        if let Some(h) = &self.hare {
            h.validate()?;
        }
        if self.batch_size == 0 || self.batch_size > n_events {
            return config_err(format!("batch size {} with {n_events} training events", self.batch_size));
        }
        if self.weights.hare > 0.0 && self.hare.is_some() && self.batch_size < 2 {
            return config_err(format!(
                "the stabilization loss needs a batch of at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.lr > 0.0) {
            return config_err(format!("learning rate must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub events: Vec<usize>,
    pub stats: StepStats,
}

/// Training with plain SGD. Batches are drawn without replacement from a
/// per-epoch shuffle; shuffling and diffusion noise use separate streams.
pub fn train(model: &mut HareCast, data: &[Event], cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    train_with(model, data, cfg, |_, _| Ok(()))
}

/// As [`train`], calling `on_step` with the updated model after every step.
pub fn train_with(
    model: &mut HareCast,
    data: &[Event],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&mut HareCast, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate(data.len())?;
    let base = SeededRng::new(cfg.seed);
    let mut shuffle = base.fork(1);
    let mut noise = base.fork(2);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order = (0..data.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, shuffle.below(i + 1));
            }
            cursor = 0;
        }
        let idx = order[cursor..cursor + cfg.batch_size].to_vec();
        cursor += cfg.batch_size;
        let events: Vec<&Event> = idx.iter().map(|&i| &data[i]).collect();
        let batch = Batch::from_events(&events, &model.cfg)?;
        let draw = DiffusionDraw::sample(batch.target.shape(), &model.schedule, &mut noise);
        let stats = model.step(&batch, &draw, &cfg.weights, cfg.hare.as_ref(), true)?;
        if !stats.total.is_finite() {
            return Err(Error::Degenerate(format!("training diverged at step {step}")));
        }
        model.sgd_step(cfg.lr);
        let rec = StepRecord { step, events: idx, stats };
        on_step(model, &rec)?;
        log.push(rec);
    }
    Ok(log)
}
