//! Forecasts from a trained run directory.

use std::path::Path;

use harecast_core::archive::{encode_tensors, pgm_stack, read_tensors};
use harecast_core::nowcast::rollout;
use harecast_core::{Event, HareCast, SeededRng};

use crate::cmd::{list_files, stem};
use crate::config::ToyConfig;
use crate::error::{read_file, read_text, write_file, CliError, CliResult};

pub fn load_run(run: &Path) -> CliResult<(ToyConfig, HareCast)> {
    let cfg = ToyConfig::resolve(Some(&read_text(&run.join("config.txt"))?), &[])?;
    let mut model = HareCast::new(cfg.model_config(), &mut SeededRng::new(cfg.seed))?;
    let params = read_tensors(read_file(&run.join("checkpoint.hcta"))?.as_slice())?;
    model.load_params(&params)?;
    Ok((cfg, model))
}

/// One prediction per event archive, covering the event's frames after the
/// context window. Longer horizons are rolled out chunk by chunk.
pub fn run(run_dir: &Path, events: &Path, out: &Path, seed: u64) -> CliResult<usize> {
    let (_, model) = load_run(run_dir)?;
    let files = list_files(events, &["hcta"])?;
    if files.is_empty() {
        return Err(CliError::usage(format!("no .hcta events in {}", events.display())));
    }
    let t_in = model.config().encoder.t_in;
    for (i, path) in files.iter().enumerate() {
        let (radar, sat) = Event::sequences_from_archive(&read_file(path)?)?;
        let horizon = radar.len().saturating_sub(t_in);
        let ctx = radar.window(0, t_in)?;
        let sat_ctx = sat.window(0, t_in)?;
        let mut f = model.forecaster(seed.wrapping_add(i as u64));
        let pred = rollout(&mut f, &ctx, Some(&sat_ctx), horizon)?;
        let name = stem(path);
        write_file(&out.join(format!("{name}.hcta")), encode_tensors(&[("radar", pred.frames())]))?;
        write_file(&out.join(format!("{name}.pgm")), pgm_stack(pred.frames())?)?;
    }
    Ok(files.len())
}
