//! Patch-token encoder with residual self-attention blocks and the
//! per-modality linear decoders used for the reconstruction loss.

use crate::attention::{AttentionConfig, HeadActivations, MultiHeadAttention};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{join, Linear, Module, Param};
use crate::tensor::{SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityMode {
    Unimodal,
    /// Radar and satellite frames concatenated channel-wise per patch.
    Multimodal,
}

impl ModalityMode {
    pub fn channels(self) -> usize {
        match self {
            ModalityMode::Unimodal => 1,
            ModalityMode::Multimodal => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub t_in: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mode: ModalityMode,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return config_err(format!(
                "{}×{} frames are not divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if self.t_in == 0 || self.layers == 0 {
            return config_err("encoder needs at least one input frame and one layer");
        }
        AttentionConfig::new(self.dim, self.heads)?;
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn locations(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// `N = T_I·(H/P)·(W/P)`.
    pub fn tokens(&self) -> usize {
        self.t_in * self.locations()
    }

    pub fn patch_len(&self) -> usize {
        self.mode.channels() * self.patch * self.patch
    }
}

/// `[B×T×H×W]` fields, one per channel, to `[B×N×C·P²]` tokens. Token
/// `t·gh·gw + gy·gw + gx` holds channel-major then row-major patch pixels.
pub fn patchify(channels: &[&Tensor], patch: usize) -> Result<Tensor> {
    let Some(first) = channels.first() else {
        return dim_err("patchify needs at least one channel");
    };
    let &[b, t, h, w] = first.shape() else {
        return dim_err(format!("patchify expects [B×T×H×W], got {:?}", first.shape()));
    };
    if channels.iter().any(|c| c.shape() != first.shape()) {
        return dim_err("modalities differ in shape");
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return dim_err(format!("{h}×{w} frames are not divisible by patch size {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let c = channels.len();
    let pl = c * patch * patch;
    let n = t * gh * gw;
    let mut out = vec![0.0; b * n * pl];
    for bi in 0..b {
        for ti in 0..t {
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = ((bi * n) + (ti * gh + gy) * gw + gx) * pl;
                    for (ci, ch) in channels.iter().enumerate() {
                        let frame = &ch.data()[(bi * t + ti) * h * w..];
                        for py in 0..patch {
                            let src = (gy * patch + py) * w + gx * patch;
                            let dst = tok + (ci * patch + py) * patch;
                            out[dst..dst + patch].copy_from_slice(&frame[src..src + patch]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, n, pl], out)
}

/// Inverse of [`patchify`] for a single channel.
pub fn depatchify(tokens: &Tensor, t: usize, h: usize, w: usize, patch: usize) -> Result<Tensor> {
    let &[b, n, pl] = tokens.shape() else {
        return dim_err(format!("depatchify expects [B×N×P²], got {:?}", tokens.shape()));
    };
    if pl != patch * patch || n != t * (h / patch) * (w / patch) {
        return dim_err(format!("tokens {:?} do not tile {t}×{h}×{w} with patch {patch}", tokens.shape()));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = vec![0.0; b * t * h * w];
    for bi in 0..b {
        for ti in 0..t {
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = ((bi * n) + (ti * gh + gy) * gw + gx) * pl;
                    let frame = (bi * t + ti) * h * w;
                    for py in 0..patch {
                        let dst = frame + (gy * patch + py) * w + gx * patch;
                        out[dst..dst + patch].copy_from_slice(&tokens.data()[tok + py * patch..tok + (py + 1) * patch]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, t, h, w], out)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    pub embed: Linear,
    pub pos: Param,
    pub blocks: Vec<MultiHeadAttention>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let attn = AttentionConfig::new(cfg.dim, cfg.heads)?;
        Ok(Self {
            cfg,
            embed: Linear::new(cfg.patch_len(), cfg.dim, rng),
            pos: Param::normal(&[cfg.tokens(), cfg.dim], 0.1, rng),
            blocks: (0..cfg.layers).map(|_| MultiHeadAttention::new(attn, rng)).collect(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Patch tokens for a batch of radar (and satellite) contexts.
    pub fn tokenize(&self, radar: &Tensor, satellite: Option<&Tensor>) -> Result<Tensor> {
        let chans: Vec<&Tensor> = match (self.cfg.mode, satellite) {
            (ModalityMode::Unimodal, None) => vec![radar],
            (ModalityMode::Multimodal, Some(s)) => vec![radar, s],
            (ModalityMode::Unimodal, Some(_)) => return config_err("unimodal encoder got satellite input"),
            (ModalityMode::Multimodal, None) => return config_err("multimodal encoder needs satellite input"),
        };
        let &[_, t, h, w] = radar.shape() else {
            return dim_err(format!("encoder input must be [B×T×H×W], got {:?}", radar.shape()));
        };
        if (t, h, w) != (self.cfg.t_in, self.cfg.height, self.cfg.width) {
            return config_err(format!(
                "encoder configured for {}×{}×{} input, got {t}×{h}×{w}",
                self.cfg.t_in, self.cfg.height, self.cfg.width
            ));
        }
        patchify(&chans, self.cfg.patch)
    }

    /// `F` of shape `[B×N×d]`.
    pub fn forward(&mut self, tokens: &Tensor) -> Result<Tensor> {
        let &[b, n, pl] = tokens.shape() else {
            return dim_err(format!("encoder expects [B×N×C·P²], got {:?}", tokens.shape()));
        };
        if n != self.cfg.tokens() || pl != self.cfg.patch_len() {
            return dim_err(format!("encoder expects {} tokens of length {}", self.cfg.tokens(), self.cfg.patch_len()));
        }
        let d = self.cfg.dim;
        let flat = tokens.clone().reshape(&[b * n, pl])?;
        let mut h = self.embed.forward(&flat)?.into_data();
        for (row, chunk) in h.chunks_mut(d).enumerate() {
            let p = &self.pos.value.data()[(row % n) * d..(row % n + 1) * d];
            chunk.iter_mut().zip(p).for_each(|(v, pv)| *v += pv);
        }
        let mut h = Tensor::new(&[b, n, d], h)?;
        for blk in &mut self.blocks {
            let y = blk.forward(&h)?;
            h = h.add(&y)?;
        }
        Ok(h)
    }

    /// Per-block head activations from the last forward pass.
    pub fn activations(&self) -> Vec<&HeadActivations> {
        self.blocks.iter().filter_map(|b| b.activations()).collect()
    }

    /// Backward from `∂L/∂F`, with optional extra gradients at each block's
    /// head responses.
    pub fn backward(&mut self, grad_f: &Tensor, extra: &[Option<Tensor>]) -> Result<()> {
        let mut g = grad_f.clone();
        for (l, blk) in self.blocks.iter_mut().enumerate().rev() {
            let dx = blk.backward(&g, extra.get(l).and_then(|e| e.as_ref()))?;
            g = g.add(&dx)?;
        }
        let &[b, n, d] = g.shape() else { unreachable!() };
        for (row, chunk) in g.data().chunks(d).enumerate() {
            let p = &mut self.pos.grad.data_mut()[(row % n) * d..(row % n + 1) * d];
            p.iter_mut().zip(chunk).for_each(|(pg, v)| *pg += v);
        }
        self.embed.backward(&g.reshape(&[b * n, d])?)?;
        Ok(())
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.embed.visit(&join(prefix, "embed"), f);
        f(&join(prefix, "pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        f(&join(prefix, "pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// Linear de-patchify from `F` back to one modality's frames.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub proj: Linear,
    cfg: EncoderConfig,
}

impl Decoder {
    pub fn new(cfg: EncoderConfig, rng: &mut SeededRng) -> Self {
        Self { proj: Linear::new(cfg.dim, cfg.patch * cfg.patch, rng), cfg }
    }

    pub fn forward(&mut self, f: &Tensor) -> Result<Tensor> {
        let &[b, n, d] = f.shape() else {
            return dim_err(format!("decoder expects [B×N×d], got {:?}", f.shape()));
        };
        let y = self.proj.forward(&f.clone().reshape(&[b * n, d])?)?;
        let c = &self.cfg;
        depatchify(&y.reshape(&[b, n, c.patch * c.patch])?, c.t_in, c.height, c.width, c.patch)
    }

    /// `∂L/∂F` from the gradient at the reconstructed frames.
    pub fn backward(&mut self, grad_frames: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        let tok = patchify(&[grad_frames], c.patch)?;
        let &[b, n, pl] = tok.shape() else { unreachable!() };
        let g = self.proj.backward(&tok.reshape(&[b * n, pl])?)?;
        g.reshape(&[b, n, c.dim])
    }
}

impl Module for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.proj.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj.visit_mut(prefix, f);
    }
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_with_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let diff = pred.sub(target)?;
    let n = diff.len() as f64;
    Ok((diff.frobenius_sq() / n, diff.scale(2.0 / n)))
}
