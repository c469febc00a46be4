//! Deterministic toy precipitation events: advecting, growing or decaying
//! Gaussian blobs seen by a radar and a blurred, offset pseudo-satellite.

use std::collections::HashSet;

use crate::archive;
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{splitmix64, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Radar,
    Satellite,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Radar => "radar",
            Modality::Satellite => "satellite",
        }
    }
}

/// `[T×H×W]` frames with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Tensor,
    pub modality: Modality,
    pub dt_minutes: f64,
}

impl FrameSequence {
    pub fn new(frames: Tensor, modality: Modality, dt_minutes: f64) -> Result<Self> {
        if frames.ndim() != 3 || frames.is_empty() {
            return dim_err(format!("frame sequence must be non-empty [T×H×W], got {:?}", frames.shape()));
        }
        if !(dt_minutes > 0.0) {
            return config_err(format!("dt_minutes must be positive, got {dt_minutes}"));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return config_err(format!("frame values must lie in [0, 1], found {v}"));
        }
        Ok(Self { frames, modality, dt_minutes })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let hw = self.height() * self.width();
        &self.frames.data()[t * hw..(t + 1) * hw]
    }

    /// Frames `start..end` as a new sequence.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return dim_err(format!("window {start}..{end} outside sequence of length {}", self.len()));
        }
        let hw = self.height() * self.width();
        let data = self.frames.data()[start * hw..end * hw].to_vec();
        let frames = Tensor::new(&[end - start, self.height(), self.width()], data)?;
        Ok(Self { frames, ..self.clone() })
    }

    /// The last `k` frames.
    pub fn tail(&self, k: usize) -> Result<Self> {
        if k > self.len() {
            return dim_err(format!("cannot take {k} frames from {}", self.len()));
        }
        self.window(self.len() - k, self.len())
    }

    pub fn concat(&self, other: &FrameSequence) -> Result<Self> {
        if other.height() != self.height() || other.width() != self.width() {
            return dim_err(format!(
                "cannot join {}×{} frames with {}×{}",
                self.height(),
                self.width(),
                other.height(),
                other.width()
            ));
        }
        let mut data = self.frames.data().to_vec();
        data.extend_from_slice(other.frames.data());
        let frames = Tensor::new(&[self.len() + other.len(), self.height(), self.width()], data)?;
        Ok(Self { frames, ..self.clone() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    /// `(x, y)` in pixels at `t = 0`; `x` runs along columns.
    pub center: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    pub amplitude: f64,
    pub radius: f64,
    /// Amplitude at frame `t` is `amplitude·exp(growth·t)`.
    pub growth: f64,
}

impl Blob {
    pub fn value(&self, t: f64, x: f64, y: f64) -> f64 {
        let cx = self.center.0 + t * self.velocity.0;
        let cy = self.center.1 + t * self.velocity.1;
        let r2 = (x - cx).powi(2) + (y - cy).powi(2);
        self.amplitude * (self.growth * t).exp() * (-r2 / (2.0 * self.radius * self.radius)).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSpec {
    pub blobs: Vec<Blob>,
    pub seed: u64,
}

impl EventSpec {
    pub fn new(blobs: Vec<Blob>, seed: u64) -> Self {
        Self { blobs, seed }
    }

    /// Random event drawn from `cfg` with its own seed.
    pub fn random(seed: u64, cfg: &EventConfig) -> Self {
        let mut rng = SeededRng::new(seed);
        let count = cfg.min_blobs + rng.below(cfg.max_blobs - cfg.min_blobs + 1);
        let blobs = (0..count)
            .map(|_| {
                let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
                let speed = rng.uniform_in(0.0, cfg.max_speed);
                Blob {
                    center: (rng.uniform_in(0.0, (cfg.width - 1) as f64), rng.uniform_in(0.0, (cfg.height - 1) as f64)),
                    velocity: (speed * angle.cos(), speed * angle.sin()),
                    amplitude: cfg.amplitude_scale * rng.uniform_in(cfg.amplitude.0, cfg.amplitude.1),
                    radius: rng.uniform_in(cfg.radius.0, cfg.radius.1),
                    growth: rng.uniform_in(cfg.growth.0, cfg.growth.1),
                }
            })
            .collect();
        Self { blobs, seed }
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        for (i, b) in self.blobs.iter().enumerate() {
            let (x, y) = b.center;
            if !(0.0..=(width - 1) as f64).contains(&x) || !(0.0..=(height - 1) as f64).contains(&y) {
                return config_err(format!("blob {i} center ({x}, {y}) outside the {height}×{width} domain"));
            }
            if !(b.radius > 0.0) || b.amplitude < 0.0 {
                return config_err(format!("blob {i} needs positive radius and nonnegative amplitude"));
            }
        }
        Ok(())
    }
}

/// Fixed radar-to-satellite transform: Gaussian blur then integer shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatelliteView {
    pub blur_sigma: f64,
    pub blur_radius: usize,
    /// `(dx, dy)` pixels; vacated pixels are zero.
    pub offset: (isize, isize),
}

impl Default for SatelliteView {
    fn default() -> Self {
        Self { blur_sigma: 1.0, blur_radius: 2, offset: (2, 1) }
    }
}

impl SatelliteView {
    fn kernel(&self) -> Vec<f64> {
        let r = self.blur_radius as isize;
        let mut k: Vec<f64> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .map(|(dx, dy)| (-((dx * dx + dy * dy) as f64) / (2.0 * self.blur_sigma * self.blur_sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }

    pub fn apply(&self, frame: &[f64], height: usize, width: usize) -> Vec<f64> {
        let k = self.kernel();
        let r = self.blur_radius as isize;
        let side = 2 * r + 1;
        let (h, w) = (height as isize, width as isize);
        let mut out = vec![0.0; frame.len()];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x - self.offset.0, y - self.offset.1);
                if sx < 0 || sy < 0 || sx >= w || sy >= h {
                    continue;
                }
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (px, py) = (sx + dx, sy + dy);
                        if px >= 0 && py >= 0 && px < w && py < h {
                            acc += k[((dy + r) * side + dx + r) as usize] * frame[(py * w + px) as usize];
                        }
                    }
                }
                out[(y * w + x) as usize] = acc.clamp(0.0, 1.0);
            }
        }
        out
    }
}

pub const DEFAULT_DT_MINUTES: f64 = 5.0;

/// Radar and satellite sequences of length `t` on an `h×w` grid.
pub fn generate_event(spec: &EventSpec, t: usize, h: usize, w: usize) -> Result<(FrameSequence, FrameSequence)> {
    generate_event_with(spec, t, h, w, &SatelliteView::default())
}

pub fn generate_event_with(
    spec: &EventSpec,
    t: usize,
    h: usize,
    w: usize,
    view: &SatelliteView,
) -> Result<(FrameSequence, FrameSequence)> {
    if t == 0 || h == 0 || w == 0 {
        return config_err(format!("event dimensions must be positive, got T={t} H={h} W={w}"));
    }
    spec.validate(h, w)?;
    let mut radar = Vec::with_capacity(t * h * w);
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = spec.blobs.iter().map(|b| b.value(ti as f64, x as f64, y as f64)).sum();
                radar.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let sat: Vec<f64> = radar.chunks(h * w).flat_map(|f| view.apply(f, h, w)).collect();
    Ok((
        FrameSequence::new(Tensor::new(&[t, h, w], radar)?, Modality::Radar, DEFAULT_DT_MINUTES)?,
        FrameSequence::new(Tensor::new(&[t, h, w], sat)?, Modality::Satellite, DEFAULT_DT_MINUTES)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventConfig {
    pub height: usize,
    pub width: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub amplitude: (f64, f64),
    /// Multiplies every sampled amplitude.
    pub amplitude_scale: f64,
    pub radius: (f64, f64),
    pub max_speed: f64,
    pub growth: (f64, f64),
}

impl Default for EventConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            t_in: 5,
            t_out: 20,
            min_blobs: 1,
            max_blobs: 3,
            amplitude: (0.4, 1.0),
            amplitude_scale: 1.0,
            radius: (2.5, 6.0),
            max_speed: 1.0,
            growth: (-0.04, 0.04),
        }
    }
}

impl EventConfig {
    pub fn frames(&self) -> usize {
        self.t_in + self.t_out
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.t_in == 0 || self.t_out == 0 {
            return config_err("event grid and horizons must be positive");
        }
        if self.min_blobs > self.max_blobs {
            return config_err("min_blobs exceeds max_blobs");
        }
        Ok(())
    }
}

/// An event materialized into context and target windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub spec: EventSpec,
    pub radar: FrameSequence,
    pub satellite: FrameSequence,
}

impl Event {
    pub fn generate(spec: EventSpec, cfg: &EventConfig) -> Result<Self> {
        let (radar, satellite) = generate_event(&spec, cfg.frames(), cfg.height, cfg.width)?;
        Ok(Self { spec, radar, satellite })
    }

    pub fn context(&self, t_in: usize) -> Result<(FrameSequence, FrameSequence)> {
        Ok((self.radar.window(0, t_in)?, self.satellite.window(0, t_in)?))
    }

    pub fn future(&self, t_in: usize) -> Result<FrameSequence> {
        self.radar.window(t_in, self.radar.len())
    }

    pub fn to_archive(&self) -> Vec<u8> {
        let dt = Tensor::new(&[1], vec![self.radar.dt_minutes]).unwrap();
        archive::encode_tensors(&[("radar", self.radar.frames()), ("satellite", self.satellite.frames()), ("dt_minutes", &dt)])
    }

    /// Sequences back from [`Event::to_archive`]; the `EventSpec` is not stored.
    pub fn sequences_from_archive(bytes: &[u8]) -> Result<(FrameSequence, FrameSequence)> {
        let tensors = archive::read_tensors(bytes)?;
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("event archive lacks '{name}'")))
        };
        let dt = get("dt_minutes")?.data().first().copied().unwrap_or(DEFAULT_DT_MINUTES);
        Ok((
            FrameSequence::new(get("radar")?, Modality::Radar, dt)?,
            FrameSequence::new(get("satellite")?, Modality::Satellite, dt)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<EventSpec>,
    pub val: Vec<EventSpec>,
    pub test: Vec<EventSpec>,
}

impl Split {
    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        self.train.iter().chain(&self.val).chain(&self.test).map(|e| e.seed)
    }
}

/// Event specs for three splits; every event seed is distinct.
pub fn make_split(seed: u64, n_train: usize, n_val: usize, n_test: usize, cfg: &EventConfig) -> Result<Split> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return config_err(format!("split counts must be positive, got {n_train}/{n_val}/{n_test}"));
    }
    cfg.validate()?;
    let mut used = HashSet::new();
    let mut state = seed;
    let mut draw = |n: usize| -> Vec<EventSpec> {
        (0..n)
            .map(|_| loop {
                state = splitmix64(state);
                if used.insert(state) {
                    break EventSpec::random(state, cfg);
                }
            })
            .collect()
    };
    let train = draw(n_train);
    let val = draw(n_val);
    let test = draw(n_test);
    Ok(Split { train, val, test })
}
