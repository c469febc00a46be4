use super::*;
use crate::hare::HareConfig;
use crate::nn::Module;
use crate::synth::{make_split, Event, EventConfig, FrameSequence, Modality};
use crate::{SeededRng, Tensor};

fn micro_events(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<Event> {
    let ecfg = EventConfig {
        height: cfg.encoder.height,
        width: cfg.encoder.width,
        t_in: cfg.encoder.t_in,
        t_out: cfg.t_out,
        ..EventConfig::default()
    };
    make_split(seed, n, 1, 1, &ecfg).unwrap().train.into_iter().map(|s| Event::generate(s, &ecfg).unwrap()).collect()
}

fn params(m: &HareCast) -> Vec<Tensor> {
    m.named_params().into_iter().map(|(_, t)| t).collect()
}

fn bits(ts: &[Tensor]) -> Vec<u64> {
    ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn conditioner_gradient_matches_finite_differences() {
    let cfg = ModelConfig::micro();
    let mut rng = SeededRng::new(1);
    let mut c = model::Conditioner::new(cfg.encoder, 3, &mut rng);
    let f = Tensor::from_fn(&[2, cfg.encoder.tokens(), cfg.encoder.dim], |_| rng.normal());
    let out = c.forward(&f).unwrap();
    assert_eq!(out.shape(), &[2, 3, 16, 16]);
    let probe = Tensor::from_fn(out.shape(), |_| rng.normal());
    let g = c.backward(&probe).unwrap();
    let h = 1e-5;
    for k in [0, 7, 100, f.len() - 1] {
        let mut fp = f.clone();
        fp.data_mut()[k] += h;
        let mut fm = f.clone();
        fm.data_mut()[k] -= h;
        let lp = c.clone().forward(&fp).unwrap().mul(&probe).unwrap().sum();
        let lm = c.clone().forward(&fm).unwrap().mul(&probe).unwrap().sum();
        let fd = (lp - lm) / (2.0 * h);
        assert!((fd - g.data()[k]).abs() < 1e-7 * (1.0 + fd.abs()));
    }
}

#[test]
fn lambda_hare_zero_matches_disabled_module_bitwise() {
    let cfg = ModelConfig::micro();
    let data = micro_events(6, &cfg, 3);
    let base = HareCast::new(cfg, &mut SeededRng::new(4)).unwrap();
    let weights = LossWeights { hare: 0.0, ..Default::default() };
    let on = TrainConfig { steps: 6, batch_size: 2, lr: 0.01, weights, hare: Some(HareConfig::default()), seed: 9 };
    let off = TrainConfig { hare: None, ..on.clone() };
    let (mut a, mut b) = (base.clone(), base);
    let log_a = train(&mut a, &data, &on).unwrap();
    train(&mut b, &data, &off).unwrap();
    assert_eq!(bits(&params(&a)), bits(&params(&b)));
    assert!(log_a.iter().all(|r| r.stats.l_hare.is_some()));
}

#[test]
fn training_is_deterministic_and_changes_params() {
    let cfg = ModelConfig::micro();
    let data = micro_events(6, &cfg, 5);
    let base = HareCast::new(cfg, &mut SeededRng::new(6)).unwrap();
    let tc = TrainConfig { steps: 4, batch_size: 3, lr: 0.01, weights: LossWeights::default(), hare: Some(HareConfig::default()), seed: 2 };
    let (mut a, mut b) = (base.clone(), base.clone());
    let la = train(&mut a, &data, &tc).unwrap();
    let lb = train(&mut b, &data, &tc).unwrap();
    assert_eq!(a.checkpoint_bytes(), b.checkpoint_bytes());
    assert_ne!(a.checkpoint_bytes(), base.checkpoint_bytes());
    let totals = |l: &[StepRecord]| l.iter().map(|r| r.stats.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(totals(&la), totals(&lb));
    assert_eq!(la[0].stats.layers.len(), 1);
    assert_eq!(la[0].stats.layers[0].energies.batch(), 3);
}

#[test]
fn batch_of_one_with_hare_is_rejected() {
    let cfg = ModelConfig::micro();
    let data = micro_events(3, &cfg, 7);
    let mut m = HareCast::new(cfg, &mut SeededRng::new(0)).unwrap();
    let tc = TrainConfig { steps: 1, batch_size: 1, lr: 0.01, weights: LossWeights::default(), hare: Some(HareConfig::default()), seed: 0 };
    assert!(matches!(train(&mut m, &data, &tc), Err(crate::Error::Config(_))));
    let ok = TrainConfig { weights: LossWeights { hare: 0.0, ..Default::default() }, ..tc };
    assert!(train(&mut m, &data, &ok).is_ok());
}

#[test]
fn hare_descends_on_a_frozen_batch() {
    let cfg = ModelConfig::micro();
    let data = micro_events(4, &cfg, 8);
    let mut m = HareCast::new(cfg, &mut SeededRng::new(3)).unwrap();
    let refs: Vec<&Event> = data.iter().collect();
    let batch = Batch::from_events(&refs, &cfg).unwrap();
    let draw = DiffusionDraw::sample(batch.target.shape(), &m.schedule, &mut SeededRng::new(1));
    let w = LossWeights { recon: 0.0, hare: 1.0, diff: 0.0 };
    let hc = HareConfig::default();
    let mut prev = f64::INFINITY;
    for _ in 0..8 {
        let s = m.step(&batch, &draw, &w, Some(&hc), true).unwrap();
        let l = s.l_hare.unwrap();
        assert!(l <= prev + 1e-12, "{l} > {prev}");
        prev = l;
        m.sgd_step(1e-3);
    }
}

#[test]
fn forecaster_never_touches_decoders() {
    let cfg = ModelConfig::micro();
    let data = micro_events(1, &cfg, 10);
    let mut m = HareCast::new(cfg, &mut SeededRng::new(2)).unwrap();
    let refs: Vec<&Event> = data.iter().collect();
    let batch = Batch::from_events(&refs, &cfg).unwrap();
    let clean = m.forecaster(5).predict(&batch.radar, None).unwrap();
    for d in &mut m.decoders {
        d.visit_mut("", &mut |_, p| p.value.fill(f64::NAN));
    }
    let poisoned = m.forecaster(5).predict(&batch.radar, None).unwrap();
    assert_eq!(clean, poisoned);
    assert!(poisoned.all_finite());
    assert_eq!(poisoned.shape(), &[1, 2, 16, 16]);
    assert!(poisoned.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = ModelConfig::micro();
    let a = HareCast::new(cfg, &mut SeededRng::new(1)).unwrap();
    let mut b = HareCast::new(cfg, &mut SeededRng::new(2)).unwrap();
    let loaded = crate::archive::read_tensors(a.checkpoint_bytes().as_slice()).unwrap();
    b.load_params(&loaded).unwrap();
    assert_eq!(a.checkpoint_bytes(), b.checkpoint_bytes());
    assert!(b.load_params(&loaded[1..]).is_err());
}

#[test]
fn multimodal_model_trains() {
    let mut cfg = ModelConfig::micro();
    cfg.encoder.mode = ModalityMode::Multimodal;
    let data = micro_events(4, &cfg, 12);
    let mut m = HareCast::new(cfg, &mut SeededRng::new(1)).unwrap();
    assert_eq!(m.decoders.len(), 2);
    let tc = TrainConfig { steps: 2, batch_size: 2, lr: 0.01, weights: LossWeights::default(), hare: Some(HareConfig::default()), seed: 0 };
    let log = train(&mut m, &data, &tc).unwrap();
    assert!(log.iter().all(|r| r.stats.total.is_finite()));
}

fn seq(frames: Vec<f64>, t: usize) -> FrameSequence {
    FrameSequence::new(Tensor::new(&[t, 1, 2], frames).unwrap(), Modality::Radar, 5.0).unwrap()
}

/// Emits the mean of its context's last frame as a constant chunk, logging
/// every context it sees.
struct Recorder {
    seen: Vec<Vec<f64>>,
    chunk: usize,
}

impl ChunkPredictor for Recorder {
    fn context_len(&self) -> usize {
        2
    }
    fn chunk_len(&self) -> usize {
        self.chunk
    }
    fn predict_chunk(&mut self, radar: &FrameSequence, _: Option<&FrameSequence>) -> crate::Result<FrameSequence> {
        self.seen.push(radar.frames().data().to_vec());
        let last = radar.frame(radar.len() - 1);
        let v = (last.iter().sum::<f64>() / 2.0 + 0.1).min(1.0);
        Ok(seq(vec![v; 2 * self.chunk], self.chunk))
    }
}

#[test]
fn rollout_wiring() {
    let ctx = seq(vec![0.0, 0.0, 0.2, 0.4], 2);
    let mut one = Recorder { seen: vec![], chunk: 3 };
    let direct = one.predict_chunk(&ctx, None).unwrap();
    let mut r = Recorder { seen: vec![], chunk: 3 };
    assert_eq!(rollout(&mut r, &ctx, None, 3).unwrap(), direct);

    let mut r = Recorder { seen: vec![], chunk: 3 };
    let out = rollout(&mut r, &ctx, None, 6).unwrap();
    assert_eq!(out.len(), 6);
    // Second context is the last two frames of the first chunk.
    let first = out.window(0, 3).unwrap();
    assert_eq!(r.seen[1], first.tail(2).unwrap().frames().data().to_vec());

    assert!(matches!(rollout(&mut r, &ctx, None, 4), Err(crate::Error::Config(_))));
}

#[test]
fn constant_predictor_rolls_out_constant() {
    struct Constant;
    impl ChunkPredictor for Constant {
        fn context_len(&self) -> usize {
            1
        }
        fn chunk_len(&self) -> usize {
            2
        }
        fn predict_chunk(&mut self, _: &FrameSequence, _: Option<&FrameSequence>) -> crate::Result<FrameSequence> {
            Ok(seq(vec![0.25; 4], 2))
        }
    }
    let out = rollout(&mut Constant, &seq(vec![0.9, 0.1], 1), None, 8).unwrap();
    assert!(out.frames().data().iter().all(|&v| v == 0.25));
}

#[test]
fn forecaster_rollout_runs_multimodal() {
    let mut cfg = ModelConfig::micro();
    cfg.encoder.mode = ModalityMode::Multimodal;
    let data = micro_events(1, &cfg, 4);
    let m = HareCast::new(cfg, &mut SeededRng::new(3)).unwrap();
    let mut f = m.forecaster(1);
    let (r, s) = data[0].context(2).unwrap();
    let out = rollout(&mut f, &r, Some(&s), 4).unwrap();
    assert_eq!(out.len(), 4);
    assert!(rollout(&mut f, &r, None, 4).is_err());
}
