//! Forecast verification: thresholded CSI and friends, SSIM, and a paired
//! t-test.
//!
//! Field values live in `[0, 1]`; thresholds are on the 0–255 scale and a
//! pixel counts as an event when `255·value ≥ threshold`.

use serde::Serialize;

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdSet(Vec<f64>);

impl ThresholdSet {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return config_err("threshold set is empty");
        }
        if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return config_err(format!("thresholds must be strictly increasing: {thresholds:?}"));
        }
        Ok(Self(thresholds))
    }

    pub fn sevir() -> Self {
        Self(vec![16.0, 74.0, 133.0, 160.0, 181.0, 219.0])
    }

    pub fn meteonet() -> Self {
        Self(vec![12.0, 18.0, 24.0, 32.0])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ContingencyCounts {
    pub hits: u64,
    pub false_alarms: u64,
    pub misses: u64,
    pub correct_negatives: u64,
}

impl ContingencyCounts {
    pub fn total(&self) -> u64 {
        self.hits + self.false_alarms + self.misses + self.correct_negatives
    }

    pub fn merge(&self, o: &ContingencyCounts) -> ContingencyCounts {
        ContingencyCounts {
            hits: self.hits + o.hits,
            false_alarms: self.false_alarms + o.false_alarms,
            misses: self.misses + o.misses,
            correct_negatives: self.correct_negatives + o.correct_negatives,
        }
    }
}

fn same_shape(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return dim_err(format!("prediction {:?} and truth {:?} differ in shape", pred.shape(), truth.shape()));
    }
    Ok(())
}

fn is_event(v: f64, thr: f64) -> bool {
    v * 255.0 >= thr
}

fn count_slices(pred: &[f64], truth: &[f64], thr: f64) -> ContingencyCounts {
    let mut cc = ContingencyCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (is_event(p, thr), is_event(t, thr)) {
            (true, true) => cc.hits += 1,
            (true, false) => cc.false_alarms += 1,
            (false, true) => cc.misses += 1,
            (false, false) => cc.correct_negatives += 1,
        }
    }
    cc
}

pub fn contingency(pred: &Tensor, truth: &Tensor, thr: f64) -> Result<ContingencyCounts> {
    same_shape(pred, truth)?;
    Ok(count_slices(pred.data(), truth.data(), thr))
}

/// `a/(a+b+c)`, or `None` when the event is neither observed nor predicted.
pub fn csi(cc: &ContingencyCounts) -> Option<f64> {
    let denom = cc.hits + cc.false_alarms + cc.misses;
    (denom > 0).then(|| cc.hits as f64 / denom as f64)
}

/// Heidke skill score; 0 when the denominator vanishes.
pub fn hss(cc: &ContingencyCounts) -> f64 {
    let (a, b, c, d) = (cc.hits as f64, cc.false_alarms as f64, cc.misses as f64, cc.correct_negatives as f64);
    let denom = (a + c) * (c + d) + (a + b) * (b + d);
    if denom == 0.0 {
        0.0
    } else {
        2.0 * (a * d - b * c) / denom
    }
}

/// How counts are aggregated over the frames of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// One table over every pixel of every frame.
    #[default]
    Pooled,
    /// CSI per `[H×W]` frame, averaged over frames where it is defined.
    PerFrame,
}

fn frame_size(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [.., h, w] if t.ndim() >= 2 => Ok(h * w),
        s => dim_err(format!("fields must be at least [H×W], got {s:?}")),
    }
}

pub fn csi_at(pred: &Tensor, truth: &Tensor, thr: f64, mode: Aggregation) -> Result<Option<f64>> {
    same_shape(pred, truth)?;
    match mode {
        Aggregation::Pooled => Ok(csi(&count_slices(pred.data(), truth.data(), thr))),
        Aggregation::PerFrame => {
            let hw = frame_size(pred)?;
            let vals: Vec<f64> = pred
                .data()
                .chunks(hw)
                .zip(truth.data().chunks(hw))
                .filter_map(|(p, t)| csi(&count_slices(p, t, thr)))
                .collect();
            Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
        }
    }
}

/// CSI per threshold, `None` where undefined.
pub fn csi_per_threshold(pred: &Tensor, truth: &Tensor, thresholds: &ThresholdSet, mode: Aggregation) -> Result<Vec<Option<f64>>> {
    thresholds.values().iter().map(|&t| csi_at(pred, truth, t, mode)).collect()
}

/// Mean CSI over thresholds where it is defined; `None` if it never is.
pub fn csi_m(pred: &Tensor, truth: &Tensor, thresholds: &ThresholdSet) -> Result<Option<f64>> {
    csi_m_with(pred, truth, thresholds, Aggregation::Pooled)
}

pub fn csi_m_with(pred: &Tensor, truth: &Tensor, thresholds: &ThresholdSet, mode: Aggregation) -> Result<Option<f64>> {
    Ok(mean_defined(&csi_per_threshold(pred, truth, thresholds, mode)?))
}

pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Non-overlapping `pool×pool` max over the trailing two axes.
pub fn max_pool(x: &Tensor, pool: usize) -> Result<Tensor> {
    let hw = frame_size(x)?;
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if pool == 0 || h % pool != 0 || w % pool != 0 {
        return dim_err(format!("{h}×{w} fields are not divisible by pool size {pool}"));
    }
    let (ph, pw) = (h / pool, w / pool);
    let mut out = Vec::with_capacity(x.len() / (pool * pool));
    for frame in x.data().chunks(hw) {
        for by in 0..ph {
            for bx in 0..pw {
                let mut m = f64::NEG_INFINITY;
                for y in by * pool..(by + 1) * pool {
                    for xx in bx * pool..(bx + 1) * pool {
                        m = m.max(frame[y * w + xx]);
                    }
                }
                out.push(m);
            }
        }
    }
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend([ph, pw]);
    Tensor::new(&shape, out)
}

pub fn pooled_csi(pred: &Tensor, truth: &Tensor, thr: f64, pool: usize) -> Result<Option<f64>> {
    same_shape(pred, truth)?;
    let (p, t) = (max_pool(pred, pool)?, max_pool(truth, pool)?);
    Ok(csi(&count_slices(p.data(), t.data(), thr)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

/// Mean SSIM over all fully contained `window×window` patches with uniform
/// weights, averaged over frames for stacked input.
pub fn ssim(pred: &Tensor, truth: &Tensor, params: &SsimParams) -> Result<f64> {
    same_shape(pred, truth)?;
    let hw = frame_size(pred)?;
    let s = pred.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let k = params.window;
    if k == 0 || k > h || k > w {
        return dim_err(format!("SSIM window {k} does not fit {h}×{w} frames"));
    }
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for (fp, ft) in pred.data().chunks(hw).zip(truth.data().chunks(hw)) {
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let (a, b) = (fp[y * w + x], ft[y * w + x]);
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = (sxx / n - mx * mx).max(0.0);
                let vy = (syy / n - my * my).max(0.0);
                let cov = sxy / n - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TTest {
    Result { t: f64, df: f64, p: f64 },
    /// All paired differences are identical, so `t` is undefined.
    Degenerate,
}

/// Two-sided paired-sample t-test of `mean(a − b) = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return dim_err(format!("paired samples differ in length: {} vs {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return config_err("paired t-test needs at least 2 pairs");
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 || d.iter().all(|&v| v == d[0]) {
        return Ok(TTest::Degenerate);
    }
    let t = mean / (var / n).sqrt();
    let df = n - 1.0;
    Ok(TTest::Result { t, df, p: student_t_two_sided_p(t, df)? })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) || !t.is_finite() {
        return Err(Error::Config(format!("invalid t-test arguments t={t}, df={df}")));
    }
    regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5)
}

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` via the modified Lentz continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || !(a > 0.0) || !(b > 0.0) {
        return Err(Error::Config(format!("incomplete beta outside its domain: x={x}, a={a}, b={b}")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    // The fraction converges fast only below the mean; use the symmetry otherwise.
    if x > (a + 1.0) / (a + b + 2.0) {
        return Ok(1.0 - ln_front.exp() * beta_fraction(1.0 - x, b, a)? / b);
    }
    Ok(ln_front.exp() * beta_fraction(x, a, b)? / a)
}

fn beta_fraction(x: f64, a: f64, b: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(Error::Degenerate(format!("incomplete beta fraction did not converge at x={x}, a={a}, b={b}")))
}

/// Everything `eval` reports for one prediction/truth pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub thresholds: Vec<f64>,
    pub csi: Vec<Option<f64>>,
    pub csi_m: Option<f64>,
    pub csi_pool4: Vec<Option<f64>>,
    pub csi_pool16: Vec<Option<f64>>,
    pub hss: Vec<f64>,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(pred: &Tensor, truth: &Tensor, thresholds: &ThresholdSet) -> Result<Self> {
        let csi = csi_per_threshold(pred, truth, thresholds, Aggregation::Pooled)?;
        let pool = |p| thresholds.values().iter().map(|&t| pooled_csi(pred, truth, t, p)).collect::<Result<Vec<_>>>();
        Ok(Self {
            thresholds: thresholds.values().to_vec(),
            csi_m: mean_defined(&csi),
            csi,
            csi_pool4: pool(4)?,
            csi_pool16: pool(16)?,
            hss: thresholds.values().iter().map(|&t| contingency(pred, truth, t).map(|c| hss(&c))).collect::<Result<_>>()?,
            ssim: ssim(pred, truth, &SsimParams::default())?,
        })
    }
}
