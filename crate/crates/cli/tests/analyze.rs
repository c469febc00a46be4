mod common;

use common::{code, csv_cells, harecast, read, read_str, stderr};
use harecast_cli::trace::{write_trace, TraceRecord};
use proptest::prelude::*;
use statrs::statistics::Statistics;

fn rec(batch: u64, layer: u32, head: u32, sample: u32, energy: f64, csi: Option<f64>) -> TraceRecord {
    TraceRecord { run_id: "t".into(), step: 5, batch_id: batch, layer, head, sample, energy, batch_csi_m: csi }
}

fn analyze(records: &[TraceRecord], extra: &[&str]) -> (tempfile::TempDir, std::process::Output) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("trace.jsonl"), write_trace(records)).unwrap();
    let mut args = vec!["analyze", "--trace", "trace.jsonl", "--csv", "out.csv", "--svg", "out.svg"];
    args.extend_from_slice(extra);
    let out = harecast(dir.path(), &args);
    (dir, out)
}

#[test]
fn constant_energies_have_zero_variance() {
    let rs: Vec<_> = (0..2).flat_map(|h| (0..4).map(move |i| rec(0, 0, h, i, 3.25, None))).collect();
    let (dir, out) = analyze(&rs, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cells = csv_cells(&read_str(dir.path(), "out.csv"));
    assert_eq!(cells.len(), 2);
    assert!(cells.iter().all(|c| c.0 == "all" && c.3 == 0.0));
}

#[test]
fn csi_split_uses_the_batch_mean() {
    // batch 1 csi 0.4, batch 2 csi 0.2, mean 0.3
    let mut rs = Vec::new();
    for (b, csi, energies) in [(1u64, 0.4, [1.0, 3.0]), (2, 0.2, [0.0, 10.0])] {
        for (i, e) in energies.iter().enumerate() {
            rs.push(rec(b, 0, 0, i as u32, *e, Some(csi)));
        }
    }
    let (dir, out) = analyze(&rs, &["--split-by-csi"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cells = csv_cells(&read_str(dir.path(), "out.csv"));
    assert_eq!(cells, vec![("accurate".into(), 0, 0, 2.0, 1), ("inaccurate".into(), 0, 0, 50.0, 1)]);
    let svg = read_str(dir.path(), "out.svg");
    assert!(svg.contains(r#"data-group="accurate" data-layer="0" data-head="0" data-value="2.0""#));
    assert!(svg.contains(r#"data-group="inaccurate" data-layer="0" data-head="0" data-value="50.0""#));
}

/// Two layers, two heads, three batches of three samples.
fn hand_built() -> Vec<TraceRecord> {
    let energies = [
        [[[0.5, 1.25, 2.0], [10.0, 10.5, 9.75]], [[0.1, 0.2, 0.7], [3.0, 1.0, 2.0]]],
        [[[4.0, 4.0, 4.5], [7.25, 6.0, 8.5]], [[1.5, 0.25, 0.75], [2.5, 2.5, 0.5]]],
        [[[0.0, 6.0, 3.0], [1.125, 2.375, 0.5]], [[9.0, 8.0, 7.5], [0.3, 0.6, 0.9]]],
    ];
    let mut rs = Vec::new();
    for (b, layers) in energies.iter().enumerate() {
        for (l, heads) in layers.iter().enumerate() {
            for (h, samples) in heads.iter().enumerate() {
                for (i, &e) in samples.iter().enumerate() {
                    rs.push(rec(b as u64, l as u32, h as u32, i as u32, e, Some([0.5, 0.25, 0.125][b])));
                }
            }
        }
    }
    rs
}

/// `AVERAGE` of `VAR.S` over batches, computed independently.
fn oracle(rs: &[TraceRecord], batches: &[u64], layer: u32, head: u32) -> f64 {
    let per_batch: Vec<f64> = batches
        .iter()
        .map(|&b| {
            rs.iter()
                .filter(|r| r.batch_id == b && r.layer == layer && r.head == head)
                .map(|r| r.energy)
                .collect::<Vec<f64>>()
                .variance()
        })
        .collect();
    per_batch.mean()
}

#[test]
fn hand_built_trace_matches_variance_oracle() {
    let rs = hand_built();
    let (dir, out) = analyze(&rs, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cells = csv_cells(&read_str(dir.path(), "out.csv"));
    assert_eq!(cells.len(), 4);
    for (group, l, h, v, n) in cells {
        assert_eq!((group.as_str(), n), ("all", 3));
        let want = oracle(&rs, &[0, 1, 2], l as u32, h as u32);
        assert!((v - want).abs() <= 1e-12 * want.abs().max(1.0), "({l},{h}): {v} vs {want}");
    }
    // csi mean 0.2917: batch 0 accurate; batches 1, 2 inaccurate
    let (dir, out) = analyze(&rs, &["--split-by-csi"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for (group, l, h, v, _) in csv_cells(&read_str(dir.path(), "out.csv")) {
        let ids: &[u64] = if group == "accurate" { &[0] } else { &[1, 2] };
        let want = oracle(&rs, ids, l as u32, h as u32);
        assert!((v - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
    let (dir, out) = analyze(&rs, &["--batch", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cells = csv_cells(&read_str(dir.path(), "out.csv"));
    assert_eq!(cells[0].3, vec![0.0, 6.0, 3.0].variance());
}

#[test]
fn malformed_line_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_trace(&[rec(0, 0, 0, 0, 1.0, None)]);
    std::fs::write(dir.path().join("trace.jsonl"), format!("{good}{{\"run_id\": 3}}\n")).unwrap();
    let out = harecast(dir.path(), &["analyze", "--trace", "trace.jsonl", "--csv", "o.csv", "--svg", "o.svg"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("trace line 2"), "{}", stderr(&out));
}

#[test]
fn split_without_csi_is_a_config_error() {
    let rs = vec![rec(0, 0, 0, 0, 1.0, None), rec(0, 0, 0, 1, 2.0, None)];
    let (_dir, out) = analyze(&rs, &["--split-by-csi"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("batch_csi_m"), "{}", stderr(&out));
}

#[test]
fn missing_trace_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = harecast(dir.path(), &["analyze", "--trace", "absent.jsonl", "--csv", "o.csv", "--svg", "o.svg"]);
    assert_eq!(code(&out), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn output_ignores_record_order(perm in Just((0..36usize).collect::<Vec<_>>()).prop_shuffle()) {
        let rs = hand_built();
        let shuffled: Vec<TraceRecord> = perm.iter().map(|&i| rs[i].clone()).collect();
        let (a, oa) = analyze(&rs, &["--split-by-csi", "--threads", "3"]);
        let (b, ob) = analyze(&shuffled, &["--split-by-csi"]);
        prop_assert_eq!(code(&oa), 0);
        prop_assert_eq!(code(&ob), 0);
        prop_assert_eq!(read(a.path(), "out.csv"), read(b.path(), "out.csv"));
        prop_assert_eq!(read(a.path(), "out.svg"), read(b.path(), "out.svg"));
    }
}
