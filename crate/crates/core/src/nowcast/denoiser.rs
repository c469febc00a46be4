//! Small convolutional noise predictor: two stride-2 stages, residual
//! self-attention at the bottleneck, nearest-neighbour upsampling with skip
//! additions, and a sinusoidal timestep embedding.

use crate::attention::{AttentionConfig, MultiHeadAttention};
use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::{dims4, join, silu, silu_backward, timestep_embedding, upsample2x, upsample2x_backward, Conv2d, Linear, Module, Param};
use crate::nowcast::diffusion::NoisePredictor;
use crate::tensor::{SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Frames being denoised, stacked as channels.
    pub frames: usize,
    pub cond_channels: usize,
    pub channels: (usize, usize, usize),
    pub attn_heads: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if height % 4 != 0 || width % 4 != 0 {
            return config_err(format!("denoiser needs frame sides divisible by 4, got {height}×{width}"));
        }
        if self.frames == 0 || self.time_dim < 2 {
            return config_err("denoiser needs at least one frame and a time embedding of width ≥ 2");
        }
        AttentionConfig::new(self.channels.2, self.attn_heads)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Cache {
    a1: Tensor,
    a2: Tensor,
    a3: Tensor,
    a4: Tensor,
    a5: Tensor,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    pub conv_in: Conv2d,
    pub time: Linear,
    pub down1: Conv2d,
    pub down2: Conv2d,
    pub mid: MultiHeadAttention,
    pub up2: Conv2d,
    pub up1: Conv2d,
    pub conv_out: Conv2d,
    cache: Option<Cache>,
}

/// `[B×C×H×W]` to `[B×HW×C]` and back.
fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x)?;
    let s = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..s {
                out[(bi * s + p) * c + ci] = x.data()[(bi * c + ci) * s + p];
            }
        }
    }
    Tensor::new(&[b, s, c], out)
}

fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let &[b, s, c] = x.shape() else {
        return dim_err("token tensor must be rank 3");
    };
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..s {
                out[(bi * c + ci) * s + p] = x.data()[(bi * s + p) * c + ci];
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

/// Channel concatenation of two `[B×·×H×W]` tensors.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = dims4(a)?;
    let [nb, cb, hb, wb] = dims4(b)?;
    if (n, h, w) != (nb, hb, wb) {
        return dim_err(format!("cannot concatenate {:?} and {:?} along channels", a.shape(), b.shape()));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Tensor::new(&[n, ca + cb, h, w], out)
}

/// The trailing `c` channels of `x`.
fn tail_channels(x: &Tensor, c: usize) -> Result<Tensor> {
    let [n, ct, h, w] = dims4(x)?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c * hw);
    for i in 0..n {
        out.extend_from_slice(&x.data()[(i * ct + ct - c) * hw..(i + 1) * ct * hw]);
    }
    Tensor::new(&[n, c, h, w], out)
}

fn add_per_channel(x: &mut Tensor, v: &Tensor) {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let hw = x.len() / (b * c);
    for (k, plane) in x.data_mut().chunks_mut(hw).enumerate() {
        let add = v.data()[k];
        plane.iter_mut().for_each(|p| *p += add);
    }
    debug_assert_eq!(v.len(), b * c);
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, rng: &mut SeededRng) -> Result<Self> {
        let (c1, c2, c3) = cfg.channels;
        let attn = AttentionConfig::new(c3, cfg.attn_heads)?;
        Ok(Self {
            cfg,
            conv_in: Conv2d::new(cfg.frames + cfg.cond_channels, c1, 1, rng),
            time: Linear::new(cfg.time_dim, c1, rng),
            down1: Conv2d::new(c1, c2, 2, rng),
            down2: Conv2d::new(c2, c3, 2, rng),
            mid: MultiHeadAttention::new(attn, rng),
            up2: Conv2d::new(c3, c2, 1, rng),
            up1: Conv2d::new(c2, c1, 1, rng),
            conv_out: Conv2d::new(c1, cfg.frames, 1, rng),
            cache: None,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn forward(&mut self, x_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        let [b, f, h, w] = dims4(x_t)?;
        if f != self.cfg.frames || t.len() != b {
            return dim_err(format!("denoiser expects {} frames and one timestep per sample", self.cfg.frames));
        }
        self.cfg.validate(h, w)?;
        let x = concat_channels(x_t, cond)?;
        let a1 = self.conv_in.forward(&x)?;
        let emb: Vec<f64> = t.iter().flat_map(|&ti| timestep_embedding(ti, self.cfg.time_dim)).collect();
        let temb = self.time.forward(&Tensor::new(&[b, self.cfg.time_dim], emb)?)?;
        let mut h1 = silu(&a1);
        add_per_channel(&mut h1, &temb);
        let a2 = self.down1.forward(&h1)?;
        let h2 = silu(&a2);
        let a3 = self.down2.forward(&h2)?;
        let h3 = silu(&a3);
        let (qh, qw) = (h3.shape()[2], h3.shape()[3]);
        let z = to_tokens(&h3)?;
        let z = z.add(&self.mid.forward(&z)?)?;
        let h3b = from_tokens(&z, qh, qw)?;
        let a4 = self.up2.forward(&upsample2x(&h3b)?)?;
        let u2 = silu(&a4).add(&h2)?;
        let a5 = self.up1.forward(&upsample2x(&u2)?)?;
        let u1 = silu(&a5).add(&h1)?;
        let out = self.conv_out.forward(&u1)?;
        self.cache = Some(Cache { a1, a2, a3, a4, a5 });
        Ok(out)
    }

    /// Accumulates parameter gradients and returns `∂L/∂cond`.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let c = self.cache.take().ok_or_else(|| Error::State("denoiser backward before forward".into()))?;
        let g_u1 = self.conv_out.backward(grad_out)?;
        let g_a5 = silu_backward(&c.a5, &g_u1)?;
        let g_u2 = upsample2x_backward(&self.up1.backward(&g_a5)?)?;
        let g_a4 = silu_backward(&c.a4, &g_u2)?;
        let g_h3b = upsample2x_backward(&self.up2.backward(&g_a4)?)?;
        let (qh, qw) = (g_h3b.shape()[2], g_h3b.shape()[3]);
        let g_z = to_tokens(&g_h3b)?;
        let g_z = g_z.add(&self.mid.backward(&g_z, None)?)?;
        let g_h3 = from_tokens(&g_z, qh, qw)?;
        let g_a3 = silu_backward(&c.a3, &g_h3)?;
        let g_h2 = g_u2.add(&self.down2.backward(&g_a3)?)?;
        let g_a2 = silu_backward(&c.a2, &g_h2)?;
        let g_h1 = g_u1.add(&self.down1.backward(&g_a2)?)?;
        let [b, c1, h, w] = dims4(&g_h1)?;
        let g_temb: Vec<f64> = g_h1.data().chunks(h * w).map(|p| p.iter().sum()).collect();
        self.time.backward(&Tensor::new(&[b, c1], g_temb)?)?;
        let g_a1 = silu_backward(&c.a1, &g_h1)?;
        let g_x = self.conv_in.backward(&g_a1)?;
        tail_channels(&g_x, self.cfg.cond_channels)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&mut self, x_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        self.forward(x_t, t, cond)
    }
}

impl Module for Denoiser {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv_in.visit(&join(prefix, "conv_in"), f);
        self.time.visit(&join(prefix, "time"), f);
        self.down1.visit(&join(prefix, "down1"), f);
        self.down2.visit(&join(prefix, "down2"), f);
        self.mid.visit(&join(prefix, "mid"), f);
        self.up2.visit(&join(prefix, "up2"), f);
        self.up1.visit(&join(prefix, "up1"), f);
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv_in.visit_mut(&join(prefix, "conv_in"), f);
        self.time.visit_mut(&join(prefix, "time"), f);
        self.down1.visit_mut(&join(prefix, "down1"), f);
        self.down2.visit_mut(&join(prefix, "down2"), f);
        self.mid.visit_mut(&join(prefix, "mid"), f);
        self.up2.visit_mut(&join(prefix, "up2"), f);
        self.up1.visit_mut(&join(prefix, "up1"), f);
        self.conv_out.visit_mut(&join(prefix, "conv_out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Denoiser, Tensor, Vec<usize>, Tensor) {
        let cfg = DenoiserConfig { frames: 2, cond_channels: 2, channels: (3, 4, 4), attn_heads: 2, time_dim: 4 };
        let mut rng = SeededRng::new(7);
        let d = Denoiser::new(cfg, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 2, 8, 8], |_| rng.normal());
        let cond = Tensor::from_fn(&[2, 2, 8, 8], |_| rng.normal());
        (d, x, vec![3, 700], cond)
    }

    #[test]
    fn output_shape_and_state_error() {
        let (mut d, x, t, cond) = small();
        assert!(matches!(d.backward(&x), Err(Error::State(_))));
        let y = d.forward(&x, &t, &cond).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(d.forward(&x, &[1], &cond).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut d, x, t, cond) = small();
        let mut rng = SeededRng::new(8);
        let probe = Tensor::from_fn(x.shape(), |_| rng.normal());
        let loss = |d: &mut Denoiser, cond: &Tensor| -> f64 {
            let y = d.forward(&x, &t, cond).unwrap();
            y.mul(&probe).unwrap().sum()
        };
        d.zero_grad();
        d.forward(&x, &t, &cond).unwrap();
        let g_cond = d.backward(&probe).unwrap();
        let h = 1e-5;
        for k in [0, 17, 101, 255] {
            let mut cp = cond.clone();
            cp.data_mut()[k] += h;
            let mut cm = cond.clone();
            cm.data_mut()[k] -= h;
            let fd = (loss(&mut d.clone(), &cp) - loss(&mut d.clone(), &cm)) / (2.0 * h);
            assert!((fd - g_cond.data()[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "cond[{k}]: {fd} vs {}", g_cond.data()[k]);
        }
        let mut names = vec![];
        d.visit("", &mut |n, p| names.push((n.to_string(), p.grad.clone())));
        for (name, grad) in names {
            for k in [0, grad.len() / 2, grad.len() - 1] {
                let bump = |delta: f64| {
                    let mut dd = d.clone();
                    dd.visit_mut("", &mut |n, p| {
                        if n == name {
                            p.value.data_mut()[k] += delta;
                        }
                    });
                    loss(&mut dd, &cond)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = grad.data()[k];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{name}[{k}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn concat_and_tail_channels_are_inverse() {
        let mut rng = SeededRng::new(9);
        let a = Tensor::from_fn(&[2, 3, 2, 2], |_| rng.normal());
        let b = Tensor::from_fn(&[2, 1, 2, 2], |_| rng.normal());
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(tail_channels(&c, 1).unwrap(), b);
        let t = to_tokens(&a).unwrap();
        assert_eq!(from_tokens(&t, 2, 2).unwrap(), a);
    }
}
