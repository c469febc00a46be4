//! Trainable building blocks with hand-written backward passes.
//!
//! Layers cache what their backward pass needs during `forward` and
//! accumulate parameter gradients into [`Param::grad`] during `backward`.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros_like(&value);
        Self { value, grad }
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        Self::new(Tensor::from_fn(shape, |_| std * rng.normal()))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Named traversal of every trainable tensor, in a fixed order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }

    /// Plain gradient descent step.
    fn sgd_step(&mut self, lr: f64) {
        self.visit_mut("", &mut |_, p| {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        });
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Row-wise affine map `y = x·W + b` on `[rows × in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        Self {
            weight: Param::normal(&[inputs, outputs], std, rng),
            bias: Param::zeros(&[outputs]),
            input: None,
        }
    }

    pub fn zeroed(inputs: usize, outputs: usize) -> Self {
        Self { weight: Param::zeros(&[inputs, outputs]), bias: Param::zeros(&[outputs]), input: None }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Forward without caching.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, inputs) = x.dims2()?;
        if inputs != self.inputs() {
            return dim_err(format!(
                "linear expects {} inputs, got shape {:?}",
                self.inputs(),
                x.shape()
            ));
        }
        let n = self.outputs();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm_nn(x.data(), self.weight.value.data(), &mut out, rows, inputs, n);
        Tensor::new(&[rows, n], out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.apply(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor> {
        let x = self.input.as_ref().ok_or_else(|| Error::State("linear backward before forward".into()))?;
        let (rows, inputs) = x.dims2()?;
        let n = self.outputs();
        if grad_y.shape() != [rows, n] {
            return dim_err(format!("linear grad shape {:?}, expected [{rows}, {n}]", grad_y.shape()));
        }
        gemm_tn(x.data(), grad_y.data(), self.weight.grad.data_mut(), inputs, rows, n);
        let bg = self.bias.grad.data_mut();
        for row in grad_y.data().chunks(n) {
            for (b, g) in bg.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dx = vec![0.0; rows * inputs];
        gemm_nt(grad_y.data(), self.weight.value.data(), &mut dx, rows, n, inputs);
        Tensor::new(&[rows, inputs], dx)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// 3×3 convolution with zero padding 1 on `[B × C × H × W]`, computed as a
/// matrix product over unfolded patches.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    stride: usize,
    saved: Option<Unfolded>,
}

#[derive(Debug, Clone)]
struct Unfolded {
    shape: [usize; 4],
    /// Per sample, `[C·9 × OH·OW]`.
    cols: Vec<f64>,
}

const K: usize = 3;

/// Output columns whose tap `kx` lands inside a row of width `w`.
fn column_range(kx: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = usize::from(kx == 0);
    let hi = ow.min((w + 1 - kx).div_ceil(stride));
    (lo, hi.max(lo))
}

/// Visit every in-bounds (patch row, output position, input position) triple
/// of one channel plane.
fn for_each_tap(h: usize, w: usize, s: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (oh, ow) = ((h - 1) / s + 1, (w - 1) / s + 1);
    for ky in 0..K {
        for kx in 0..K {
            let (lo, hi) = column_range(kx, s, w, ow);
            for oy in 0..oh {
                let iy = oy * s + ky;
                if iy == 0 || iy > h {
                    continue;
                }
                f(ky * K + kx, oy * ow + lo, (iy - 1) * w + lo * s + kx - 1, hi - lo);
            }
        }
    }
}

impl Conv2d {
    pub fn new(inputs: usize, outputs: usize, stride: usize, rng: &mut SeededRng) -> Self {
        let std = (1.0 / (inputs * K * K) as f64).sqrt();
        Self {
            weight: Param::normal(&[outputs, inputs, K, K], std, rng),
            bias: Param::zeros(&[outputs]),
            stride,
            saved: None,
        }
    }

    fn channels(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[1], s[0])
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    fn unfold(&self, x: &Tensor) -> Vec<f64> {
        let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (oh, ow) = self.output_size(h, w);
        let n = oh * ow;
        let s = self.stride;
        let mut cols = vec![0.0; b * c * K * K * n];
        for (plane, dst) in x.data().chunks(h * w).zip(cols.chunks_mut(K * K * n)) {
            for_each_tap(h, w, s, |tap, o, i, len| {
                let row = &mut dst[tap * n + o..tap * n + o + len];
                for (d, &v) in row.iter_mut().zip(plane[i..].iter().step_by(s)) {
                    *d = v;
                }
            });
        }
        cols
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = dims4(x)?;
        let (cin, cout) = self.channels();
        if c != cin {
            return dim_err(format!("conv expects {cin} channels, got shape {:?}", x.shape()));
        }
        let (oh, ow) = self.output_size(h, w);
        let n = oh * ow;
        let kk = cin * K * K;
        let cols = self.unfold(x);
        let mut out = vec![0.0; b * cout * n];
        for (col, o) in cols.chunks(kk * n).zip(out.chunks_mut(cout * n)) {
            for (plane, &bias) in o.chunks_mut(n).zip(self.bias.value.data()) {
                plane.fill(bias);
            }
            gemm_nn(self.weight.value.data(), col, o, cout, kk, n);
        }
        self.saved = Some(Unfolded { shape: [b, c, h, w], cols });
        Tensor::new(&[b, cout, oh, ow], out)
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor> {
        let saved = self.saved.as_ref().ok_or_else(|| Error::State("conv backward before forward".into()))?;
        let [b, cin, h, w] = saved.shape;
        let (_, cout) = self.channels();
        let (oh, ow) = self.output_size(h, w);
        if grad_y.shape() != [b, cout, oh, ow] {
            return dim_err(format!("conv grad shape {:?} does not match output", grad_y.shape()));
        }
        let n = oh * ow;
        let kk = cin * K * K;
        let s = self.stride;
        let mut dx = vec![0.0; b * cin * h * w];
        let mut dcol = vec![0.0; kk * n];
        for ((col, gy), dxs) in saved.cols.chunks(kk * n).zip(grad_y.data().chunks(cout * n)).zip(dx.chunks_mut(cin * h * w)) {
            for (bg, plane) in self.bias.grad.data_mut().iter_mut().zip(gy.chunks(n)) {
                *bg += plane.iter().sum::<f64>();
            }
            gemm_nt(gy, col, self.weight.grad.data_mut(), cout, n, kk);
            dcol.fill(0.0);
            gemm_tn(self.weight.value.data(), gy, &mut dcol, kk, cout, n);
            for (src, plane) in dcol.chunks(K * K * n).zip(dxs.chunks_mut(h * w)) {
                for_each_tap(h, w, s, |tap, o, i, len| {
                    let row = &src[tap * n + o..tap * n + o + len];
                    for (d, &v) in plane[i..].iter_mut().step_by(s).zip(row) {
                        *d += v;
                    }
                });
            }
        }
        Tensor::new(&[b, cin, h, w], dx)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn dims4(x: &Tensor) -> Result<[usize; 4]> {
    match x.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => dim_err(format!("expected a rank-4 tensor, got shape {s:?}")),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

/// Gradient of SiLU given its pre-activation input.
pub fn silu_backward(pre: &Tensor, grad_y: &Tensor) -> Result<Tensor> {
    pre.zip_with(grad_y, "silu_backward", |x, g| {
        let s = sigmoid(x);
        g * s * (1.0 + x * (1.0 - s))
    })
}

/// Nearest-neighbour 2× upsampling of `[B × C × H × W]`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x)?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(p * oh + oy) * ow + ox] = x.data()[(p * h + oy / 2) * w + ox / 2];
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

pub fn upsample2x_backward(grad_y: &Tensor) -> Result<Tensor> {
    let [b, c, oh, ow] = dims4(grad_y)?;
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[(p * h + oy / 2) * w + ox / 2] += grad_y.data()[(p * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::new(&[b, c, h, w], dx)
}

/// Sinusoidal embedding of a diffusion timestep: `[sin(t·ω_i)…, cos(t·ω_i)…]`
/// with `ω_i = 10000^(-i/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}
