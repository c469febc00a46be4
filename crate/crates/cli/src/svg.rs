//! Self-contained SVG heatmaps: one panel per group on a shared linear scale.

use std::fmt::Write;

use crate::analyze::Analysis;

const CELL: f64 = 48.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_TOP: f64 = 56.0;
const PANEL_GAP: f64 = 40.0;
const BAR_WIDTH: f64 = 16.0;
const BAR_STEPS: usize = 32;

/// White to dark red.
fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 153.0), lerp(255.0, 0.0), lerp(255.0, 13.0))
}

fn label(v: f64) -> String {
    format!("{v:.3e}")
}

pub fn render(a: &Analysis) -> String {
    let (lo, hi) = a
        .heatmaps
        .iter()
        .flat_map(|h| h.variance.iter().flatten())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let span = hi - lo;
    let scale = |v: f64| if span > 0.0 { (v - lo) / span } else { 0.0 };

    let panel_w = a.heads as f64 * CELL;
    let panel_h = a.layers as f64 * CELL;
    let n = a.heatmaps.len().max(1) as f64;
    let bar_x = MARGIN_LEFT + n * panel_w + (n - 1.0) * PANEL_GAP + PANEL_GAP;
    let width = bar_x + BAR_WIDTH + 96.0;
    let height = MARGIN_TOP + panel_h.max(CELL * 2.0) + 56.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN_LEFT}" y="18" font-size="13">cross-sample energy variance, run {} step {}</text>"#,
        escape(&a.run_id),
        a.step
    );
    for (p, hm) in a.heatmaps.iter().enumerate() {
        let x0 = MARGIN_LEFT + p as f64 * (panel_w + PANEL_GAP);
        let _ = writeln!(
            s,
            r#"<g data-group="{}" data-batches="{}">"#,
            hm.group,
            hm.batches.len()
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{} ({} batches)</text>"#,
            x0 + panel_w / 2.0,
            MARGIN_TOP - 22.0,
            hm.group,
            hm.batches.len()
        );
        for (l, row) in hm.variance.iter().enumerate() {
            for (h, &v) in row.iter().enumerate() {
                let _ = writeln!(
                    s,
                    r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}" stroke="#888" stroke-width="0.5" data-group="{}" data-layer="{l}" data-head="{h}" data-value="{v:?}"/>"##,
                    x0 + h as f64 * CELL,
                    MARGIN_TOP + l as f64 * CELL,
                    color(scale(v)),
                    hm.group
                );
            }
        }
        for h in 0..a.heads {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{h}</text>"#,
                x0 + (h as f64 + 0.5) * CELL,
                MARGIN_TOP - 6.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">head</text>"#,
            x0 + panel_w / 2.0,
            MARGIN_TOP + panel_h + 18.0
        );
        if p == 0 {
            for l in 0..a.layers {
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="end" dominant-baseline="middle">{l}</text>"#,
                    MARGIN_LEFT - 6.0,
                    MARGIN_TOP + (l as f64 + 0.5) * CELL
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">layer</text>"#,
                MARGIN_TOP + panel_h / 2.0,
                MARGIN_TOP + panel_h / 2.0
            );
        }
        s.push_str("</g>\n");
    }

    let bar_h = panel_h.max(CELL * 2.0);
    let step_h = bar_h / BAR_STEPS as f64;
    let _ = writeln!(s, r#"<g data-scale-min="{lo:?}" data-scale-max="{hi:?}">"#);
    for i in 0..BAR_STEPS {
        let t = 1.0 - (i as f64 + 0.5) / BAR_STEPS as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{bar_x}" y="{}" width="{BAR_WIDTH}" height="{}" fill="{}"/>"#,
            MARGIN_TOP + i as f64 * step_h,
            step_h + 0.2,
            color(t)
        );
    }
    let tx = bar_x + BAR_WIDTH + 4.0;
    for (frac, v) in [(0.0, hi), (0.5, lo + span / 2.0), (1.0, lo)] {
        let _ = writeln!(
            s,
            r#"<text x="{tx}" y="{}" dominant-baseline="middle">{}</text>"#,
            MARGIN_TOP + frac * bar_h,
            label(v)
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyze::{Group, Heatmap};

    fn analysis() -> Analysis {
        Analysis {
            run_id: "a<b".into(),
            step: 9,
            layers: 2,
            heads: 2,
            heatmaps: vec![
                Heatmap { group: Group::Accurate, variance: vec![vec![0.0, 1.0], vec![2.0, 3.0]], batches: vec![0] },
                Heatmap { group: Group::Inaccurate, variance: vec![vec![4.0, 0.5], vec![0.25, 1.0]], batches: vec![1, 2] },
            ],
        }
    }

    #[test]
    fn cells_carry_their_values() {
        let svg = render(&analysis());
        assert!(svg.starts_with("<svg") && svg.contains("viewBox"));
        assert_eq!(svg.matches("data-layer=").count(), 8);
        assert!(svg.contains(r#"data-group="inaccurate" data-layer="0" data-head="0" data-value="4.0""#));
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("@import") && !svg.contains("url("));
    }

    #[test]
    fn shared_scale_spans_all_panels() {
        let svg = render(&analysis());
        assert!(svg.contains(r#"data-scale-min="0.0" data-scale-max="4.0""#));
        // the largest value gets the darkest color, the smallest white
        assert!(svg.contains(r##"fill="#99000d" stroke="#888" stroke-width="0.5" data-group="inaccurate" data-layer="0" data-head="0""##));
        assert!(svg.contains(r##"fill="#ffffff" stroke="#888" stroke-width="0.5" data-group="accurate" data-layer="0" data-head="0""##));
    }

    #[test]
    fn color_endpoints() {
        assert_eq!(color(0.0), "#ffffff");
        assert_eq!(color(1.0), "#99000d");
    }
}
