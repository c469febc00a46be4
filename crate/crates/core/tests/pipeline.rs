use harecast_core::archive::{pgm_stack, read_pgm_stack};
use harecast_core::hare::{evaluate_block, partition_heads};
use harecast_core::metrics::{ssim, MetricReport, SsimParams};
use harecast_core::nowcast::{train, Batch};
use harecast_core::synth::make_split;
use harecast_core::theory::check_theorem1;
use harecast_core::verify::analytic_setup;
use harecast_core::{
    AttentionConfig, EnergyBatch, Event, EventConfig, HareCast, HareConfig, LossWeights, ModelConfig, MultiHeadAttention,
    SeededRng, Tensor, ThresholdSet, TrainConfig,
};
use proptest::prelude::*;

fn toy_events(seed: u64, n: usize) -> (ModelConfig, EventConfig, Vec<Event>) {
    let cfg = ModelConfig::toy();
    let ecfg = EventConfig {
        height: cfg.encoder.height,
        width: cfg.encoder.width,
        t_in: cfg.encoder.t_in,
        t_out: cfg.t_out,
        ..EventConfig::default()
    };
    let split = make_split(seed, n, 1, 1, &ecfg).unwrap();
    let events = split.train.iter().map(|s| Event::generate(s.clone(), &ecfg).unwrap()).collect();
    (cfg, ecfg, events)
}

fn short_run(model_seed: u64, train_seed: u64, events: &[Event]) -> Vec<u8> {
    let mut model = HareCast::new(ModelConfig::toy(), &mut SeededRng::new(model_seed)).unwrap();
    let tc = TrainConfig {
        steps: 3,
        batch_size: 4,
        lr: 1e-3,
        weights: LossWeights::default(),
        hare: Some(HareConfig::default()),
        seed: train_seed,
    };
    let log = train(&mut model, events, &tc).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|r| r.stats.total.is_finite() && r.stats.l_hare.is_some()));
    model.checkpoint_bytes()
}

#[test]
fn training_is_reproducible_and_seed_sensitive() {
    let (_, _, events) = toy_events(4, 8);
    let a = short_run(0, 1, &events);
    assert_eq!(a, short_run(0, 1, &events));
    assert_ne!(a, short_run(0, 2, &events));
    assert_ne!(a, short_run(5, 1, &events));
}

#[test]
fn event_archive_round_trips() {
    let (_, _, events) = toy_events(9, 2);
    for e in &events {
        let (radar, satellite) = Event::sequences_from_archive(&e.to_archive()).unwrap();
        assert_eq!(radar, e.radar);
        assert_eq!(satellite, e.satellite);
    }
}

#[test]
fn pgm_stack_quantizes_to_nearest_level() {
    let (_, _, events) = toy_events(2, 1);
    let frames = events[0].radar.frames();
    let back = read_pgm_stack(&pgm_stack(frames).unwrap()).unwrap();
    assert_eq!(back.shape(), frames.shape());
    let worst = back.data().iter().zip(frames.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
}

#[test]
fn identical_fields_score_perfectly() {
    let (_, ecfg, events) = toy_events(6, 1);
    let truth = events[0].future(ecfg.t_in).unwrap();
    let r = MetricReport::compute(truth.frames(), truth.frames(), &ThresholdSet::sevir()).unwrap();
    assert_eq!(r.csi_m, Some(1.0));
    assert!(r.csi_pool4.iter().chain(&r.csi_pool16).flatten().all(|&v| v == 1.0));
    assert_eq!(ssim(truth.frames(), truth.frames(), &SsimParams::default()).unwrap(), 1.0);
}

#[test]
fn probe_batches_feed_the_model() {
    let (cfg, _, events) = toy_events(8, 4);
    let batch = Batch::from_events(&events.iter().collect::<Vec<_>>(), &cfg).unwrap();
    let mut model = HareCast::new(cfg, &mut SeededRng::new(0)).unwrap();
    let layers = model.probe_energies(&batch.radar, batch.satellite.as_ref(), false).unwrap();
    assert_eq!(layers.len(), model.config().encoder.layers);
    for eb in &layers {
        assert_eq!((eb.batch(), eb.heads()), (4, model.config().encoder.heads));
    }
}

#[test]
fn analytic_theorem_setup_holds() {
    let r = check_theorem1(&analytic_setup(0, 200_000).unwrap()).unwrap();
    assert!(r.all_hold(), "{r:?}");
    assert!(r.bounds.iter().any(|b| b.name == "theorem1.unbiased.input_form"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn block_partition_covers_heads(seed in 0u64..1000, heads in prop::sample::select(vec![1usize, 2, 4, 8]), batch in 2usize..5) {
        let mut rng = SeededRng::new(seed);
        let mut mha = MultiHeadAttention::new(AttentionConfig::new(16, heads).unwrap(), &mut rng);
        let x = Tensor::from_fn(&[batch, 6, 16], |_| rng.normal());
        mha.forward(&x).unwrap();
        let block = evaluate_block(mha.activations().unwrap(), &HareConfig::default(), &vec![1.0; batch]).unwrap();
        let mut all: Vec<usize> = block.partition.strong.iter().chain(&block.partition.contextual).chain(&block.partition.weak).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..heads).collect::<Vec<_>>());
        prop_assert!(block.loss.loss.is_finite() && block.loss.loss >= 0.0);
        prop_assert_eq!(block.grad_o.shape(), mha.activations().unwrap().responses.shape());
    }

    #[test]
    fn scaling_energies_keeps_the_partition(e in prop::collection::vec(0.0f64..100.0, 12), k in 0.01f64..100.0) {
        let base = EnergyBatch::from_energies(Tensor::new(&[3, 4], e.clone()).unwrap()).unwrap();
        let scaled = EnergyBatch::from_energies(Tensor::new(&[3, 4], e.iter().map(|v| v * k).collect()).unwrap()).unwrap();
        let (p, q) = (partition_heads(&base, 0.75).unwrap(), partition_heads(&scaled, 0.75).unwrap());
        prop_assert_eq!(p.strong, q.strong);
    }
}
