//! Autoregressive extension of a fixed-length forecaster.

use crate::error::{config_err, Result};
use crate::synth::{FrameSequence, Modality, SatelliteView};
use crate::tensor::Tensor;

/// Predicts `chunk_len` radar frames from the last `context_len` frames.
pub trait ChunkPredictor {
    fn context_len(&self) -> usize;
    fn chunk_len(&self) -> usize;
    fn uses_satellite(&self) -> bool {
        false
    }
    fn predict_chunk(&mut self, radar: &FrameSequence, satellite: Option<&FrameSequence>) -> Result<FrameSequence>;
}

/// Predicts `horizon` frames chunk by chunk, re-encoding the most recent
/// `context_len` frames each time. Satellite context for predicted frames is
/// synthesized from the predicted radar with [`SatelliteView::default`].
pub fn rollout<P: ChunkPredictor + ?Sized>(
    predictor: &mut P,
    radar: &FrameSequence,
    satellite: Option<&FrameSequence>,
    horizon: usize,
) -> Result<FrameSequence> {
    let chunk = predictor.chunk_len();
    if chunk == 0 || horizon == 0 || horizon % chunk != 0 {
        return config_err(format!("horizon {horizon} is not a positive multiple of the chunk length {chunk}"));
    }
    let k = predictor.context_len();
    if radar.len() < k {
        return config_err(format!("rollout needs {k} context frames, got {}", radar.len()));
    }
    let wants_sat = predictor.uses_satellite();
    if wants_sat && satellite.is_none() {
        return config_err("this predictor needs satellite context");
    }
    let view = SatelliteView::default();
    let mut history = radar.clone();
    let mut sat_history = satellite.filter(|_| wants_sat).cloned();
    let mut out: Option<FrameSequence> = None;
    for _ in 0..horizon / chunk {
        let ctx = history.tail(k)?;
        let sat_ctx = sat_history.as_ref().map(|s| s.tail(k)).transpose()?;
        let pred = predictor.predict_chunk(&ctx, sat_ctx.as_ref())?;
        if let Some(s) = sat_history.as_mut() {
            let (h, w) = (pred.height(), pred.width());
            let frames: Vec<f64> = (0..pred.len()).flat_map(|t| view.apply(pred.frame(t), h, w)).collect();
            let synth = FrameSequence::new(Tensor::new(&[pred.len(), h, w], frames)?, Modality::Satellite, pred.dt_minutes)?;
            *s = s.concat(&synth)?;
        }
        history = history.concat(&pred)?;
        out = Some(match out {
            None => pred,
            Some(o) => o.concat(&pred)?,
        });
    }
    Ok(out.expect("at least one chunk"))
}
