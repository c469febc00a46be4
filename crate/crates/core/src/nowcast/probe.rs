//! Held-out measurements of the encoder's head energies.

use crate::error::{config_err, Result};
use crate::hare::{cross_sample_variance, EnergyBatch};
use crate::nowcast::model::{Batch, HareCast};

/// Cross-sample energy variance of each head divided by the square of its
/// batch-mean energy, averaged over probe batches.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeVariance {
    /// `[layer][head]`.
    pub normalized: Vec<Vec<f64>>,
    pub mean: f64,
    pub batches: usize,
}

fn normalized_variance(eb: &EnergyBatch) -> Result<Vec<f64>> {
    let var = cross_sample_variance(eb)?;
    Ok(var
        .iter()
        .zip(eb.head_means())
        .map(|(&v, &mu)| if v == 0.0 { 0.0 } else { v / (mu * mu) })
        .collect())
}

pub fn probe_variance(model: &mut HareCast, batches: &[Batch]) -> Result<ProbeVariance> {
    if batches.is_empty() {
        return config_err("probe set is empty");
    }
    let e = model.config().encoder;
    let mut acc = vec![vec![0.0; e.heads]; e.layers];
    for b in batches {
        let per_layer = model.probe_energies(&b.radar, b.satellite.as_ref(), false)?;
        for (row, eb) in acc.iter_mut().zip(&per_layer) {
            for (a, v) in row.iter_mut().zip(normalized_variance(eb)?) {
                *a += v;
            }
        }
    }
    let n = batches.len() as f64;
    acc.iter_mut().flatten().for_each(|a| *a /= n);
    let mean = acc.iter().flatten().sum::<f64>() / (e.layers * e.heads) as f64;
    Ok(ProbeVariance { normalized: acc, mean, batches: batches.len() })
}
