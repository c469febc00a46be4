use criterion::{criterion_group, criterion_main, Criterion};
use harecast_core::nowcast::diffusion::{DiffusionDraw, DiffusionSchedule};
use harecast_core::nowcast::Batch;
use harecast_core::synth::make_split;
use harecast_core::{Event, EventConfig, HareCast, HareConfig, LossWeights, ModelConfig, SeededRng};

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig::toy();
    let ecfg = EventConfig {
        height: cfg.encoder.height,
        width: cfg.encoder.width,
        t_in: cfg.encoder.t_in,
        t_out: cfg.t_out,
        ..EventConfig::default()
    };
    let split = make_split(3, 4, 1, 1, &ecfg).unwrap();
    let events: Vec<Event> = split.train.iter().map(|s| Event::generate(s.clone(), &ecfg).unwrap()).collect();
    let batch = Batch::from_events(&events.iter().collect::<Vec<_>>(), &cfg).unwrap();
    let mut rng = SeededRng::new(0);
    let mut model = HareCast::new(cfg, &mut rng).unwrap();
    let sched = DiffusionSchedule::standard();
    let draw = DiffusionDraw::sample(batch.target.shape(), &sched, &mut rng);
    let hare = HareConfig::default();
    let weights = LossWeights::default();
    c.bench_function("toy_step_forward_backward_b4", |b| {
        b.iter(|| model.step(&batch, &draw, &weights, Some(&hare), true).unwrap())
    });
    c.bench_function("toy_step_forward_only_b4", |b| b.iter(|| model.step(&batch, &draw, &weights, Some(&hare), false).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = train_step
}
criterion_main!(benches);
