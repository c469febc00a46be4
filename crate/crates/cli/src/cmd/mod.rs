pub mod eval;
pub mod forecast;
pub mod gradcheck;
pub mod synth;
pub mod train_toy;
pub mod verify_theory;

use std::path::{Path, PathBuf};

use harecast_core::{EventConfig, ModelConfig};

use crate::error::{CliError, CliResult};

/// Events on the grid and horizons of `cfg`.
pub fn event_config(cfg: &ModelConfig) -> EventConfig {
    EventConfig {
        height: cfg.encoder.height,
        width: cfg.encoder.width,
        t_in: cfg.encoder.t_in,
        t_out: cfg.t_out,
        ..EventConfig::default()
    }
}

/// Files in `dir` with one of `exts`, sorted by name.
pub fn list_files(dir: &Path, exts: &[&str]) -> CliResult<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
