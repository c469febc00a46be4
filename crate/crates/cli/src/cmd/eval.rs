//! Forecast verification over matched prediction and truth files.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use harecast_core::archive::{read_pgm_stack, read_tensors};
use harecast_core::metrics::MetricReport;
use harecast_core::{Tensor, ThresholdSet};

use crate::cmd::{list_files, stem};
use crate::error::{read_file, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    SevirLike,
    MeteonetLike,
}

impl Profile {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "sevir-like" => Ok(Profile::SevirLike),
            "meteonet-like" => Ok(Profile::MeteonetLike),
            _ => Err(CliError::usage(format!("unknown profile `{s}`: sevir-like or meteonet-like"))),
        }
    }

    pub fn thresholds(self) -> ThresholdSet {
        match self {
            Profile::SevirLike => ThresholdSet::sevir(),
            Profile::MeteonetLike => ThresholdSet::meteonet(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub report: MetricReport,
}

/// A tensor archive's first tensor, or an 8-bit PGM stack.
pub fn load_field(path: &Path) -> CliResult<Tensor> {
    let bytes = read_file(path)?;
    let field = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm_stack(&bytes)?,
        _ => read_tensors(bytes.as_slice())?
            .into_iter()
            .next()
            .map(|(_, t)| t)
            .ok_or_else(|| CliError::usage(format!("{}: archive holds no tensors", path.display())))?,
    };
    Ok(field)
}

/// Files are paired by stem; `.hcta` wins over `.pgm` when both exist.
fn by_stem(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for p in list_files(dir, &["pgm", "hcta"])? {
        let is_archive = p.extension().is_some_and(|e| e == "hcta");
        let slot = out.entry(stem(&p)).or_insert_with(|| p.clone());
        if is_archive {
            *slot = p;
        }
    }
    Ok(out)
}

pub fn run(pred: &Path, truth: &Path, profile: Profile) -> CliResult<(Vec<EvalRow>, MetricReport)> {
    let (p, t) = (by_stem(pred)?, by_stem(truth)?);
    let unmatched: Vec<String> = p
        .keys()
        .filter(|k| !t.contains_key(*k))
        .map(|k| format!("{k} (prediction only)"))
        .chain(t.keys().filter(|k| !p.contains_key(*k)).map(|k| format!("{k} (truth only)")))
        .collect();
    if !unmatched.is_empty() {
        return Err(CliError::usage(format!("unmatched files: {}", unmatched.join(", "))));
    }
    if p.is_empty() {
        return Err(CliError::usage("no prediction files found"));
    }
    let thresholds = profile.thresholds();
    let mut rows = Vec::new();
    let (mut all_p, mut all_t) = (Vec::new(), Vec::new());
    for (name, pp) in &p {
        let (fp, ft) = (load_field(pp)?, load_field(&t[name])?);
        let report = MetricReport::compute(&fp, &ft, &thresholds).map_err(|e| CliError::usage(format!("{name}: {e}")))?;
        rows.push(EvalRow { name: name.clone(), report });
        let frames = |x: &Tensor| -> CliResult<Tensor> {
            let s = x.shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            Ok(x.clone().reshape(&[x.len() / (h * w), h, w])?)
        };
        all_p.push(frames(&fp)?);
        all_t.push(frames(&ft)?);
    }
    let cat = |parts: &[Tensor]| -> CliResult<Tensor> {
        let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
        if parts.iter().any(|x| x.shape()[1..] != [h, w]) {
            return Err(CliError::usage("files differ in frame size"));
        }
        let data: Vec<f64> = parts.iter().flat_map(|x| x.data().iter().copied()).collect();
        Ok(Tensor::new(&[data.len() / (h * w), h, w], data)?)
    };
    let overall = MetricReport::compute(&cat(&all_p)?, &cat(&all_t)?, &thresholds)?;
    Ok((rows, overall))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

fn row_fields(name: &str, r: &MetricReport) -> Vec<String> {
    let mut f = vec![name.to_string(), fmt_opt(r.csi_m)];
    f.extend(r.csi.iter().map(|&c| fmt_opt(c)));
    f.extend(r.csi_pool4.iter().map(|&c| fmt_opt(c)));
    f.extend(r.csi_pool16.iter().map(|&c| fmt_opt(c)));
    f.extend(r.hss.iter().map(|h| format!("{h:?}")));
    f.push(format!("{:?}", r.ssim));
    f
}

/// Undefined scores (no event predicted or observed) are empty cells.
pub fn to_csv(rows: &[EvalRow], overall: &MetricReport) -> String {
    let thr = &overall.thresholds;
    let mut header = vec!["name".to_string(), "csi_m".to_string()];
    for prefix in ["csi", "csi_pool4", "csi_pool16", "hss"] {
        header.extend(thr.iter().map(|t| format!("{prefix}_{t}")));
    }
    header.push("ssim".into());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        w.write_record(row_fields(&r.name, &r.report)).expect("in-memory write");
    }
    w.write_record(row_fields("overall", overall)).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 output")
}

pub fn table(rows: &[EvalRow], overall: &MetricReport) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut s = format!("{:<24} {:>8} {:>8} {:>8}", "name", "CSI-M", "HSS", "SSIM");
    for t in &overall.thresholds {
        let _ = write!(s, " {:>8}", format!("CSI-{t}"));
    }
    s.push('\n');
    let mut line = |name: &str, r: &MetricReport| {
        let hss = r.hss.iter().sum::<f64>() / r.hss.len() as f64;
        let _ = write!(s, "{name:<24} {:>8} {:>8.4} {:>8.4}", cell(r.csi_m), hss, r.ssim);
        for &c in &r.csi {
            let _ = write!(s, " {:>8}", cell(c));
        }
        s.push('\n');
    };
    for r in rows {
        line(&r.name, &r.report);
    }
    line("overall", overall);
    s
}
