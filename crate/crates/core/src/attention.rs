//! Multi-head self-attention with an exact analytic backward pass.
//!
//! Per sample and head: `S = Q_m K_mᵀ / √d_h`, `A = softmax_rows(S)`,
//! `O = A V_m`; the head responses are concatenated and projected by
//! `W_o`. The attention maps, values and responses of the last forward pass
//! are kept in [`HeadActivations`] so energy statistics can be read off them,
//! and the backward pass accepts an extra gradient injected directly at `O`.

use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::{join, Module, Param};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_in_place, Tensor};
use crate::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize) -> Result<Self> {
        if model_dim == 0 || heads == 0 || model_dim % heads != 0 {
            return config_err(format!("model_dim {model_dim} must be a positive multiple of heads {heads}"));
        }
        Ok(Self { model_dim, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Attention maps `A` `[B×M×N×N]`, values `V` and responses `O = A·V`
/// `[B×M×N×d_h]` of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadActivations {
    pub attn: Tensor,
    pub values: Tensor,
    pub responses: Tensor,
}

impl HeadActivations {
    /// Builds activations from explicit maps and values, computing `O = A·V`.
    pub fn from_maps(attn: Tensor, values: Tensor) -> Result<Self> {
        let (&[b, m, n, n2], &[b2, m2, n3, dh]) = (attn.shape(), values.shape()) else {
            return dim_err(format!("expected rank-4 maps and values, got {:?} and {:?}", attn.shape(), values.shape()));
        };
        if n != n2 || (b, m, n) != (b2, m2, n3) {
            return dim_err(format!("maps {:?} incompatible with values {:?}", attn.shape(), values.shape()));
        }
        let mut o = vec![0.0; b * m * n * dh];
        for s in 0..b * m {
            gemm_nn(
                &attn.data()[s * n * n..(s + 1) * n * n],
                &values.data()[s * n * dh..(s + 1) * n * dh],
                &mut o[s * n * dh..(s + 1) * n * dh],
                n,
                n,
                dh,
            );
        }
        let responses = Tensor::new(values.shape(), o)?;
        Ok(Self { attn, values, responses })
    }

    pub fn batch(&self) -> usize {
        self.responses.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.responses.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.responses.shape()[2]
    }

    pub fn head_dim(&self) -> usize {
        self.responses.shape()[3]
    }

    pub fn response(&self, sample: usize, head: usize) -> &[f64] {
        let len = self.tokens() * self.head_dim();
        let off = (sample * self.heads() + head) * len;
        &self.responses.data()[off..off + len]
    }

    pub fn attention_map(&self, sample: usize, head: usize) -> &[f64] {
        let len = self.tokens() * self.tokens();
        let off = (sample * self.heads() + head) * len;
        &self.attn.data()[off..off + len]
    }
}

#[derive(Debug, Clone)]
struct Saved {
    x: Tensor,
    q: Vec<f64>,
    k: Vec<f64>,
    concat: Vec<f64>,
    acts: HeadActivations,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    cfg: AttentionConfig,
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    pub bo: Param,
    saved: Option<Saved>,
}

impl MultiHeadAttention {
    pub fn new(cfg: AttentionConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.model_dim;
        let std = (1.0 / d as f64).sqrt();
        Self {
            cfg,
            wq: Param::normal(&[d, d], std, rng),
            wk: Param::normal(&[d, d], std, rng),
            wv: Param::normal(&[d, d], std, rng),
            wo: Param::normal(&[d, d], std, rng),
            bo: Param::zeros(&[d]),
            saved: None,
        }
    }

    pub fn config(&self) -> AttentionConfig {
        self.cfg
    }

    /// Head activations of the most recent forward pass.
    pub fn activations(&self) -> Option<&HeadActivations> {
        self.saved.as_ref().map(|s| &s.acts)
    }

    /// `x: [B×N×d] → y: [B×N×d]`; saves activations for `backward`.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let &[b, n, d] = x.shape() else {
            return dim_err(format!("attention input must be [B×N×d], got {:?}", x.shape()));
        };
        if d != self.cfg.model_dim {
            return dim_err(format!("attention expects model_dim {}, got {:?}", self.cfg.model_dim, x.shape()));
        }
        let m = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = b * n;
        let project = |w: &Param| {
            let mut out = vec![0.0; rows * d];
            gemm_nn(x.data(), w.value.data(), &mut out, rows, d, d);
            out
        };
        let (q, k, v) = (project(&self.wq), project(&self.wk), project(&self.wv));

        let mut attn = vec![0.0; b * m * n * n];
        let mut values = vec![0.0; b * m * n * dh];
        let mut resp = vec![0.0; b * m * n * dh];
        let mut concat = vec![0.0; rows * d];
        let (mut qh, mut kh) = (vec![0.0; n * dh], vec![0.0; n * dh]);
        for bi in 0..b {
            for h in 0..m {
                let slot = bi * m + h;
                let vh = &mut values[slot * n * dh..(slot + 1) * n * dh];
                for t in 0..n {
                    let src = (bi * n + t) * d + h * dh;
                    qh[t * dh..(t + 1) * dh].copy_from_slice(&q[src..src + dh]);
                    kh[t * dh..(t + 1) * dh].copy_from_slice(&k[src..src + dh]);
                    vh[t * dh..(t + 1) * dh].copy_from_slice(&v[src..src + dh]);
                }
                let a = &mut attn[slot * n * n..(slot + 1) * n * n];
                gemm_nt(&qh, &kh, a, n, dh, n);
                for row in a.chunks_mut(n) {
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(row);
                }
                let o = &mut resp[slot * n * dh..(slot + 1) * n * dh];
                gemm_nn(a, vh, o, n, n, dh);
                for t in 0..n {
                    let dst = (bi * n + t) * d + h * dh;
                    concat[dst..dst + dh].copy_from_slice(&o[t * dh..(t + 1) * dh]);
                }
            }
        }
        let mut y = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            y.extend_from_slice(self.bo.value.data());
        }
        gemm_nn(&concat, self.wo.value.data(), &mut y, rows, d, d);

        let acts = HeadActivations {
            attn: Tensor::new(&[b, m, n, n], attn)?,
            values: Tensor::new(&[b, m, n, dh], values)?,
            responses: Tensor::new(&[b, m, n, dh], resp)?,
        };
        self.saved = Some(Saved { x: x.clone(), q, k, concat, acts });
        Tensor::new(&[b, n, d], y)
    }

    /// Accumulates parameter gradients of `⟨grad_y, y⟩ + ⟨grad_o_extra, O⟩`
    /// and returns the input gradient.
    pub fn backward(&mut self, grad_y: &Tensor, grad_o_extra: Option<&Tensor>) -> Result<Tensor> {
        let saved = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::State("attention backward called without saved activations".into()))?;
        let x = &saved.x;
        let &[b, n, d] = x.shape() else { unreachable!() };
        if grad_y.shape() != x.shape() {
            return dim_err(format!("grad_y shape {:?}, expected {:?}", grad_y.shape(), x.shape()));
        }
        if let Some(g) = grad_o_extra {
            if g.shape() != saved.acts.responses.shape() {
                return dim_err(format!(
                    "grad_O shape {:?}, expected {:?}",
                    g.shape(),
                    saved.acts.responses.shape()
                ));
            }
        }
        let m = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = b * n;
        let gy = grad_y.data();

        gemm_tn(&saved.concat, gy, self.wo.grad.data_mut(), d, rows, d);
        let bog = self.bo.grad.data_mut();
        for row in gy.chunks(d) {
            for (bg, g) in bog.iter_mut().zip(row) {
                *bg += g;
            }
        }
        let mut dconcat = vec![0.0; rows * d];
        gemm_nt(gy, self.wo.value.data(), &mut dconcat, rows, d, d);

        let (mut dq, mut dk, mut dv) = (vec![0.0; rows * d], vec![0.0; rows * d], vec![0.0; rows * d]);
        let (mut qh, mut kh, mut doh) = (vec![0.0; n * dh], vec![0.0; n * dh], vec![0.0; n * dh]);
        let mut da = vec![0.0; n * n];
        let acts = &saved.acts;
        for bi in 0..b {
            for h in 0..m {
                let slot = bi * m + h;
                let a = &acts.attn.data()[slot * n * n..(slot + 1) * n * n];
                let vh = &acts.values.data()[slot * n * dh..(slot + 1) * n * dh];
                for t in 0..n {
                    let src = (bi * n + t) * d + h * dh;
                    qh[t * dh..(t + 1) * dh].copy_from_slice(&saved.q[src..src + dh]);
                    kh[t * dh..(t + 1) * dh].copy_from_slice(&saved.k[src..src + dh]);
                    doh[t * dh..(t + 1) * dh].copy_from_slice(&dconcat[src..src + dh]);
                }
                if let Some(g) = grad_o_extra {
                    let extra = &g.data()[slot * n * dh..(slot + 1) * n * dh];
                    doh.iter_mut().zip(extra).for_each(|(o, e)| *o += e);
                }
                // dV = Aᵀ dO ; dA = dO Vᵀ
                let mut dvh = vec![0.0; n * dh];
                gemm_tn(a, &doh, &mut dvh, n, n, dh);
                da.fill(0.0);
                gemm_nt(&doh, vh, &mut da, n, dh, n);
                // softmax Jacobian, then the score scale
                for (arow, drow) in a.chunks(n).zip(da.chunks_mut(n)) {
                    let dot: f64 = arow.iter().zip(drow.iter()).map(|(p, g)| p * g).sum();
                    for (g, &p) in drow.iter_mut().zip(arow) {
                        *g = p * (*g - dot) * scale;
                    }
                }
                let mut dqh = vec![0.0; n * dh];
                let mut dkh = vec![0.0; n * dh];
                gemm_nn(&da, &kh, &mut dqh, n, n, dh);
                gemm_tn(&da, &qh, &mut dkh, n, n, dh);
                for t in 0..n {
                    let dst = (bi * n + t) * d + h * dh;
                    dq[dst..dst + dh].copy_from_slice(&dqh[t * dh..(t + 1) * dh]);
                    dk[dst..dst + dh].copy_from_slice(&dkh[t * dh..(t + 1) * dh]);
                    dv[dst..dst + dh].copy_from_slice(&dvh[t * dh..(t + 1) * dh]);
                }
            }
        }
        let xd = x.data();
        gemm_tn(xd, &dq, self.wq.grad.data_mut(), d, rows, d);
        gemm_tn(xd, &dk, self.wk.grad.data_mut(), d, rows, d);
        gemm_tn(xd, &dv, self.wv.grad.data_mut(), d, rows, d);
        let mut dx = vec![0.0; rows * d];
        gemm_nt(&dq, self.wq.value.data(), &mut dx, rows, d, d);
        gemm_nt(&dk, self.wk.value.data(), &mut dx, rows, d, d);
        gemm_nt(&dv, self.wv.value.data(), &mut dx, rows, d, d);
        Tensor::new(&[b, n, d], dx)
    }
}

impl Module for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "wq"), &self.wq);
        f(&join(prefix, "wk"), &self.wk);
        f(&join(prefix, "wv"), &self.wv);
        f(&join(prefix, "wo"), &self.wo);
        f(&join(prefix, "bo"), &self.bo);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
        f(&join(prefix, "bo"), &mut self.bo);
    }
}

/// Linear prediction head `ŷ = W·f + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (p, _) = weight.dims2()?;
        if bias.len() != p {
            return dim_err(format!("bias of length {} for weight {:?}", bias.len(), weight.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn without_bias(weight: Tensor) -> Result<Self> {
        let (p, _) = weight.dims2()?;
        Self::new(weight, Tensor::zeros(&[p]))
    }

    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        let (p, q) = self.weight.dims2()?;
        if f.len() != q {
            return dim_err(format!("head expects {q} features, got {}", f.len()));
        }
        let mut out = self.bias.data().to_vec();
        let w = self.weight.data();
        for (i, o) in out.iter_mut().enumerate().take(p) {
            *o += w[i * q..(i + 1) * q].iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(out)
    }

    pub fn sigma_min(&self) -> f64 {
        sigma_min(&self.weight).unwrap_or(0.0)
    }
}

/// Singular values of a matrix (descending), by one-sided Jacobi rotations.
pub fn singular_values(w: &Tensor) -> Result<Vec<f64>> {
    let (p, q) = w.dims2()?;
    // Orthogonalise the columns of the taller orientation.
    let (rows, cols, mut u) = if p >= q {
        (p, q, w.data().to_vec())
    } else {
        (q, p, w.transpose()?.into_data())
    };
    let col = |u: &[f64], j: usize| -> Vec<f64> { (0..rows).map(|i| u[i * cols + j]).collect() };
    for _sweep in 0..100 {
        let mut rotated = false;
        for i in 0..cols {
            for j in i + 1..cols {
                let (ci, cj) = (col(&u, i), col(&u, j));
                let alpha: f64 = ci.iter().map(|v| v * v).sum();
                let beta: f64 = cj.iter().map(|v| v * v).sum();
                let gamma: f64 = ci.iter().zip(&cj).map(|(a, b)| a * b).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let (a, b) = (u[r * cols + i], u[r * cols + j]);
                    u[r * cols + i] = c * a - s * b;
                    u[r * cols + j] = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols).map(|j| col(&u, j).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Smallest of the `min(p, q)` singular values of `W[p×q]`; 0 when rank deficient.
pub fn sigma_min(w: &Tensor) -> Result<f64> {
    Ok(singular_values(w)?.last().copied().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_normal;

    /// Straight per-head triple loop, written without the gemm helpers.
    fn naive_forward(att: &MultiHeadAttention, x: &Tensor) -> Tensor {
        let &[b, n, d] = x.shape() else { panic!() };
        let m = att.cfg.heads;
        let dh = d / m;
        let w = |p: &Param, i: usize, j: usize| p.value.data()[i * d + j];
        let xv = |bi: usize, t: usize, i: usize| x.data()[(bi * n + t) * d + i];
        let mut y = vec![0.0; b * n * d];
        for bi in 0..b {
            let proj = |p: &Param, t: usize, j: usize| (0..d).map(|i| xv(bi, t, i) * w(p, i, j)).sum::<f64>();
            let mut concat = vec![vec![0.0; d]; n];
            for h in 0..m {
                for t in 0..n {
                    let scores: Vec<f64> = (0..n)
                        .map(|s| {
                            (0..dh).map(|c| proj(&att.wq, t, h * dh + c) * proj(&att.wk, s, h * dh + c)).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                    for c in 0..dh {
                        concat[t][h * dh + c] =
                            (0..n).map(|s| (scores[s] - mx).exp() / z * proj(&att.wv, s, h * dh + c)).sum();
                    }
                }
            }
            for t in 0..n {
                for j in 0..d {
                    y[(bi * n + t) * d + j] =
                        att.bo.value.data()[j] + (0..d).map(|i| concat[t][i] * w(&att.wo, i, j)).sum::<f64>();
                }
            }
        }
        Tensor::new(&[b, n, d], y).unwrap()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = SeededRng::new(1);
        let mut att = MultiHeadAttention::new(AttentionConfig::new(4, 2).unwrap(), &mut rng);
        let x = rng_normal(&mut rng, &[3, 1, 4]).unwrap();
        att.forward(&x).unwrap();
        let acts = att.activations().unwrap();
        assert!(acts.attn.data().iter().all(|&a| a == 1.0));
        assert_eq!(acts.responses, acts.values);
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let mut rng = SeededRng::new(2);
        let mut att = MultiHeadAttention::new(AttentionConfig::new(4, 2).unwrap(), &mut rng);
        att.wq.value.fill(0.0);
        att.wk.value.fill(0.0);
        let x = rng_normal(&mut rng, &[2, 5, 4]).unwrap();
        att.forward(&x).unwrap();
        assert!(att.activations().unwrap().attn.data().iter().all(|&a| (a - 0.2).abs() < 1e-15));
    }

    #[test]
    fn forward_matches_naive_loop() {
        let mut rng = SeededRng::new(3);
        let mut att = MultiHeadAttention::new(AttentionConfig::new(8, 2).unwrap(), &mut rng);
        att.bo = Param::normal(&[8], 0.3, &mut rng);
        let x = rng_normal(&mut rng, &[2, 4, 8]).unwrap();
        let y = att.forward(&x).unwrap();
        assert!(y.max_abs_diff(&naive_forward(&att, &x)).unwrap() < 1e-10);
    }

    #[test]
    fn rows_are_stochastic_and_responses_are_av() {
        let mut rng = SeededRng::new(4);
        let mut att = MultiHeadAttention::new(AttentionConfig::new(6, 3).unwrap(), &mut rng);
        let x = rng_normal(&mut rng, &[2, 5, 6]).unwrap().scale(3.0);
        att.forward(&x).unwrap();
        let acts = att.activations().unwrap().clone();
        for row in acts.attn.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let rebuilt = HeadActivations::from_maps(acts.attn.clone(), acts.values.clone()).unwrap();
        assert!(rebuilt.responses.max_abs_diff(&acts.responses).unwrap() < 1e-12);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut rng = SeededRng::new(5);
        let mut att = MultiHeadAttention::new(AttentionConfig::new(4, 2).unwrap(), &mut rng);
        let r = att.backward(&Tensor::zeros(&[1, 2, 4]), None);
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = SeededRng::new(6);
        let mut att = MultiHeadAttention::new(AttentionConfig::new(4, 2).unwrap(), &mut rng);
        let x = rng_normal(&mut rng, &[2, 3, 4]).unwrap();
        att.forward(&x).unwrap();
        let o_shape = att.activations().unwrap().responses.shape().to_vec();
        let dx = att.backward(&Tensor::zeros(&[2, 3, 4]), Some(&Tensor::zeros(&o_shape))).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        att.visit("", &mut |_, p| assert!(p.grad.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn bad_config_is_rejected() {
        assert!(AttentionConfig::new(6, 4).is_err());
        assert!(AttentionConfig::new(0, 1).is_err());
    }

    #[test]
    fn head_permutation_permutes_energies() {
        let mut rng = SeededRng::new(7);
        let cfg = AttentionConfig::new(6, 3).unwrap();
        let mut att = MultiHeadAttention::new(cfg, &mut rng);
        let x = rng_normal(&mut rng, &[2, 4, 6]).unwrap();
        att.forward(&x).unwrap();
        let energy = |a: &MultiHeadAttention, i, h| crate::tensor::frobenius_sq(a.activations().unwrap().response(i, h));
        let perm = [2usize, 0, 1];
        let dh = 2;
        let mut permuted = att.clone();
        for (src, dst) in [(&att.wq, &mut permuted.wq), (&att.wk, &mut permuted.wk), (&att.wv, &mut permuted.wv)] {
            for (new_h, &old_h) in perm.iter().enumerate() {
                for r in 0..6 {
                    for c in 0..dh {
                        dst.value.data_mut()[r * 6 + new_h * dh + c] = src.value.data()[r * 6 + old_h * dh + c];
                    }
                }
            }
        }
        for (new_h, &old_h) in perm.iter().enumerate() {
            for c in 0..dh {
                for j in 0..6 {
                    permuted.wo.value.data_mut()[(new_h * dh + c) * 6 + j] = att.wo.value.data()[(old_h * dh + c) * 6 + j];
                }
            }
        }
        let y = permuted.forward(&x).unwrap();
        let y0 = att.forward(&x).unwrap();
        assert!(y.max_abs_diff(&y0).unwrap() < 1e-12);
        for i in 0..2 {
            for (new_h, &old_h) in perm.iter().enumerate() {
                assert!((energy(&permuted, i, new_h) - energy(&att, i, old_h)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigma_min_examples() {
        assert!((sigma_min(&Tensor::identity(3).scale(2.0)).unwrap() - 2.0).abs() < 1e-14);
        let d = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 0.5]]);
        assert!((sigma_min(&d).unwrap() - 0.5).abs() < 1e-14);
        let singular = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(sigma_min(&singular).unwrap() < 1e-12);
    }

    #[test]
    fn sigma_min_matches_reference_svd() {
        let mut rng = SeededRng::new(11);
        for (p, q) in [(5, 5), (6, 3), (3, 6)] {
            let w = rng_normal(&mut rng, &[p, q]).unwrap();
            let reference = nalgebra::DMatrix::from_row_slice(p, q, w.data()).singular_values();
            let want = reference.iter().cloned().fold(f64::INFINITY, f64::min);
            let got = sigma_min(&w).unwrap();
            assert!((got - want).abs() <= 1e-7 * want.max(1e-3), "{p}x{q}: {got} vs {want}");
        }
    }
}
