//! Writes synthetic events and their future frames.

use std::path::Path;

use harecast_core::archive::{encode_tensors, pgm_stack};
use harecast_core::synth::make_split;
use harecast_core::{Event, ModelConfig};

use crate::cmd::event_config;
use crate::error::{write_file, CliError, CliResult};

/// `events/event_NNNN.hcta` holds full radar and satellite sequences;
/// `truth/event_NNNN.{hcta,pgm}` holds the frames after the context window.
pub fn run(seed: u64, count: usize, model: &ModelConfig, out: &Path) -> CliResult<()> {
    if count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let ecfg = event_config(model);
    let split = make_split(seed, count, 1, 1, &ecfg)?;
    for (i, spec) in split.train.iter().enumerate() {
        let ev = Event::generate(spec.clone(), &ecfg)?;
        let name = format!("event_{i:04}");
        write_file(&out.join("events").join(format!("{name}.hcta")), ev.to_archive())?;
        let future = ev.future(ecfg.t_in)?;
        write_file(&out.join("truth").join(format!("{name}.hcta")), encode_tensors(&[("radar", future.frames())]))?;
        write_file(&out.join("truth").join(format!("{name}.pgm")), pgm_stack(future.frames())?)?;
    }
    Ok(())
}
