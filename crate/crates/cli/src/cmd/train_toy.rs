//! Toy training run with probe-set energy traces.

use std::path::Path;

use serde_json::json;

use harecast_core::metrics::csi_m;
use harecast_core::nowcast::{train_with, Batch, StepRecord};
use harecast_core::synth::make_split;
use harecast_core::{Event, HareCast, SeededRng, ThresholdSet};

use crate::cmd::event_config;
use crate::config::ToyConfig;
use crate::error::{write_file, CliResult};
use crate::trace::{write_trace, TraceRecord};

pub struct TrainOutput {
    pub checkpoint: Vec<u8>,
    pub trace: Vec<TraceRecord>,
    pub log: String,
    pub final_total: f64,
}

fn probe_records(model: &mut HareCast, cfg: &ToyConfig, probes: &[Batch], step: u64) -> CliResult<Vec<TraceRecord>> {
    let mut out = Vec::new();
    let thresholds = ThresholdSet::sevir();
    for (b, batch) in probes.iter().enumerate() {
        let batch_csi_m = if cfg.probe_csi {
            let mut f = model.forecaster(cfg.seed ^ step.wrapping_mul(0x9e37_79b9) ^ b as u64);
            let pred = f.predict(&batch.radar, batch.satellite.as_ref())?;
            csi_m(&pred, &batch.target, &thresholds)?
        } else {
            None
        };
        let layers = model.probe_energies(&batch.radar, batch.satellite.as_ref(), cfg.normalize_by_tokens)?;
        for (l, eb) in layers.iter().enumerate() {
            for i in 0..eb.batch() {
                for h in 0..eb.heads() {
                    out.push(TraceRecord {
                        run_id: cfg.run_id.clone(),
                        step,
                        batch_id: b as u64,
                        layer: l as u32,
                        head: h as u32,
                        sample: i as u32,
                        energy: eb.energy(i, h),
                        batch_csi_m,
                    });
                }
            }
        }
    }
    Ok(out)
}

fn log_line(rec: &StepRecord) -> String {
    let s = &rec.stats;
    let partitions: Vec<_> = s
        .layers
        .iter()
        .map(|l| json!({"strong": l.partition.strong, "contextual": l.partition.contextual, "weak": l.partition.weak}))
        .collect();
    let v = json!({
        "step": rec.step,
        "events": rec.events,
        "l_recon": s.l_recon,
        "l_hare": s.l_hare,
        "l_diff": s.l_diff,
        "total": s.total,
        "partitions": partitions,
    });
    let mut line = v.to_string();
    line.push('\n');
    line
}

pub fn run(cfg: &ToyConfig) -> CliResult<TrainOutput> {
    cfg.validate()?;
    let mcfg = cfg.model_config();
    let ecfg = event_config(&mcfg);
    let n_probe = (cfg.probe_batches * cfg.probe_batch_size).max(1);
    let split = make_split(cfg.data_seed, cfg.n_train, 1, n_probe, &ecfg)?;
    let train: Vec<Event> = split.train.iter().map(|s| Event::generate(s.clone(), &ecfg)).collect::<Result<_, _>>()?;
    let probe_events: Vec<Event> = split.test.iter().map(|s| Event::generate(s.clone(), &ecfg)).collect::<Result<_, _>>()?;
    let probes: Vec<Batch> = probe_events
        .chunks(cfg.probe_batch_size.max(1))
        .take(cfg.probe_batches)
        .map(|c| Batch::from_events(&c.iter().collect::<Vec<_>>(), &mcfg))
        .collect::<Result<_, _>>()?;

    let mut model = HareCast::new(mcfg, &mut SeededRng::new(cfg.seed))?;
    let mut trace = probe_records(&mut model, cfg, &probes, 0)?;
    let mut log = String::new();
    let mut failure = None;
    let every = cfg.trace_every;
    let steps = cfg.steps;
    let records = train_with(&mut model, &train, &cfg.train_config(), |m, rec| {
        log.push_str(&log_line(rec));
        let done = rec.step as u64 + 1;
        if done % every as u64 == 0 || rec.step + 1 == steps {
            match probe_records(m, cfg, &probes, done) {
                Ok(r) => trace.extend(r),
                Err(e) => {
                    failure = Some(e);
                    return Err(harecast_core::Error::State("probe failed".into()));
                }
            }
        }
        Ok(())
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let records = records?;
    Ok(TrainOutput {
        checkpoint: model.checkpoint_bytes(),
        trace,
        log,
        final_total: records.last().map_or(f64::NAN, |r| r.stats.total),
    })
}

pub fn write(out_dir: &Path, cfg: &ToyConfig, out: &TrainOutput) -> CliResult<()> {
    write_file(&out_dir.join("checkpoint.hcta"), &out.checkpoint)?;
    write_file(&out_dir.join("config.txt"), cfg.to_text())?;
    write_file(&out_dir.join("trace.jsonl"), write_trace(&out.trace))?;
    write_file(&out_dir.join("log.jsonl"), &out.log)
}
