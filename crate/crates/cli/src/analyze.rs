//! Cross-sample energy variance per (layer, head), grouped by batch accuracy.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{CliError, CliResult};
use crate::trace::TraceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Accurate,
    Inaccurate,
    All,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Accurate => "accurate",
            Group::Inaccurate => "inaccurate",
            Group::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    /// Every batch in one group.
    All,
    /// Accurate when the batch CSI-M is strictly above the mean over batches.
    SplitByCsi,
    /// One batch on its own.
    Batch(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub run_id: Option<String>,
    /// Defaults to the last step in the trace.
    pub step: Option<u64>,
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub group: Group,
    /// `[layer][head]`, averaged over the group's batches.
    pub variance: Vec<Vec<f64>>,
    pub batches: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub run_id: String,
    pub step: u64,
    pub layers: usize,
    pub heads: usize,
    pub heatmaps: Vec<Heatmap>,
}

/// Unbiased (n − 1) variance, the `VAR.S` of spreadsheets.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

struct BatchCells {
    csi: Option<f64>,
    /// `(layer, head) → (sample, energy)`.
    cells: BTreeMap<(u32, u32), Vec<(u32, f64)>>,
}

fn select_run(records: &[TraceRecord], run_id: Option<&str>) -> CliResult<String> {
    if let Some(r) = run_id {
        if !records.iter().any(|x| x.run_id == r) {
            return Err(CliError::usage(format!("trace has no records for run `{r}`")));
        }
        return Ok(r.to_string());
    }
    let mut ids: Vec<&str> = records.iter().map(|r| r.run_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    match ids.as_slice() {
        [] => Err(CliError::usage("trace is empty")),
        [one] => Ok(one.to_string()),
        many => Err(CliError::usage(format!("trace holds several runs ({}); pick one with --run-id", many.join(", ")))),
    }
}

pub fn analyze(records: &[TraceRecord], opts: &AnalyzeOptions) -> CliResult<Analysis> {
    let run_id = select_run(records, opts.run_id.as_deref())?;
    let run: Vec<&TraceRecord> = records.iter().filter(|r| r.run_id == run_id).collect();
    let step = match opts.step {
        Some(s) => s,
        None => run.iter().map(|r| r.step).max().expect("run has records"),
    };
    let mut batches: BTreeMap<u64, BatchCells> = BTreeMap::new();
    for r in run.iter().filter(|r| r.step == step) {
        let b = batches.entry(r.batch_id).or_insert_with(|| BatchCells { csi: r.batch_csi_m, cells: BTreeMap::new() });
        if b.csi != r.batch_csi_m {
            return Err(CliError::usage(format!("batch {} carries inconsistent batch_csi_m values", r.batch_id)));
        }
        b.cells.entry((r.layer, r.head)).or_default().push((r.sample, r.energy));
    }
    if batches.is_empty() {
        return Err(CliError::usage(format!("run `{run_id}` has no records at step {step}")));
    }
    let layers = batches.values().flat_map(|b| b.cells.keys().map(|k| k.0)).max().unwrap() as usize + 1;
    let heads = batches.values().flat_map(|b| b.cells.keys().map(|k| k.1)).max().unwrap() as usize + 1;

    let mut grids: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();
    for (&id, b) in batches.iter_mut() {
        if b.cells.len() != layers * heads {
            return Err(CliError::usage(format!(
                "batch {id} covers {} of the {layers}×{heads} (layer, head) cells",
                b.cells.len()
            )));
        }
        let mut grid = vec![vec![0.0; heads]; layers];
        for (&(l, h), samples) in b.cells.iter_mut() {
            if samples.len() < 2 {
                return Err(CliError::usage(format!("batch {id}, layer {l}, head {h}: need at least 2 samples")));
            }
            samples.sort_unstable_by(|a, b| a.0.cmp(&b.0));
            let values: Vec<f64> = samples.iter().map(|s| s.1).collect();
            grid[l as usize][h as usize] = sample_variance(&values);
        }
        grids.insert(id, grid);
    }

    let groups: Vec<(Group, Vec<u64>)> = match &opts.selection {
        Selection::All => vec![(Group::All, grids.keys().copied().collect())],
        Selection::Batch(id) => {
            if !grids.contains_key(id) {
                return Err(CliError::usage(format!("batch {id} is not in run `{run_id}` at step {step}")));
            }
            vec![(Group::All, vec![*id])]
        }
        Selection::SplitByCsi => {
            let mut csi = Vec::with_capacity(batches.len());
            for (&id, b) in &batches {
                match b.csi {
                    Some(c) => csi.push((id, c)),
                    None => {
                        return Err(CliError::usage(format!("batch {id} has no batch_csi_m, which a CSI split requires")))
                    }
                }
            }
            let mean = csi.iter().map(|c| c.1).sum::<f64>() / csi.len() as f64;
            let (acc, inacc): (Vec<(u64, f64)>, Vec<(u64, f64)>) = csi.iter().partition(|c| c.1 > mean);
            vec![
                (Group::Accurate, acc.iter().map(|c| c.0).collect()),
                (Group::Inaccurate, inacc.iter().map(|c| c.0).collect()),
            ]
        }
    };

    let heatmaps = groups
        .into_iter()
        .filter(|(_, ids)| !ids.is_empty())
        .map(|(group, ids)| {
            let mut variance = vec![vec![0.0; heads]; layers];
            for id in &ids {
                for (row, g) in variance.iter_mut().zip(&grids[id]) {
                    row.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
            let n = ids.len() as f64;
            variance.iter_mut().flatten().for_each(|a| *a /= n);
            Heatmap { group, variance, batches: ids }
        })
        .collect();
    Ok(Analysis { run_id, step, layers, heads, heatmaps })
}

/// `group,layer,head,variance,batches` with shortest round-trip floats.
pub fn to_csv(a: &Analysis) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group", "layer", "head", "variance", "batches"]).expect("in-memory write");
    for hm in &a.heatmaps {
        for (l, row) in hm.variance.iter().enumerate() {
            for (h, v) in row.iter().enumerate() {
                w.write_record([hm.group.to_string(), l.to_string(), h.to_string(), format!("{v:?}"), hm.batches.len().to_string()])
                    .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
}
