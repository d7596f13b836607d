//! Minimal SVG bar charts: one panel per metric, one bar per method.

use std::fmt::Write;

use crate::report::MethodReport;

const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

type Metric = (&'static str, fn(&MethodReport) -> f64);

const METRICS: [Metric; 3] = [
    ("Acc", |r| r.acc),
    ("Tok", |r| r.tok_mean),
    ("Lat (s)", |r| r.lat_mean_s),
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_value(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders accuracy, mean tokens and mean latency side by side.
pub fn render_bars(title: &str, reports: &[MethodReport]) -> String {
    let width = MARGIN + METRICS.len() as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 3.0 * MARGIN + 18.0 * reports.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="20" font-size="15">{}</text>"#,
        escape(title)
    );

    for (p, (name, get)) in METRICS.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (PANEL_W + MARGIN);
        let y0 = 2.0 * MARGIN;
        let values: Vec<f64> = reports.iter().map(get).collect();
        let max = values.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { PANEL_H / max } else { 0.0 };
        let _ = writeln!(
            s,
            r#"<text x="{x0}" y="{}" font-weight="bold">{}</text>"#,
            y0 - 8.0,
            escape(name)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{}" x2="{}" y2="{}" stroke="#333"/>"##,
            y0 + PANEL_H,
            x0 + PANEL_W,
            y0 + PANEL_H
        );
        let slot = PANEL_W / values.len().max(1) as f64;
        for (i, v) in values.iter().enumerate() {
            let h = v * scale;
            let x = x0 + i as f64 * slot + slot * 0.15;
            let y = y0 + PANEL_H - h;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
                slot * 0.7,
                COLORS[i % COLORS.len()]
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                x + slot * 0.35,
                y - 4.0,
                fmt_value(*v)
            );
        }
    }

    // legend
    let ly = 2.0 * MARGIN + PANEL_H + MARGIN;
    for (i, r) in reports.iter().enumerate() {
        let y = ly + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            COLORS[i % COLORS.len()],
            MARGIN + 18.0,
            y,
            escape(&r.method)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, acc: f64, tok: f64) -> MethodReport {
        MethodReport {
            method: method.into(),
            acc,
            tok_mean: tok,
            lat_mean_s: 0.01,
            accept_len_mean: 2.0,
            exit_rate: 0.0,
            target_forwards: 5,
            reasoning_tok_mean: tok,
            runs: 1,
            failures: 0,
        }
    }

    #[test]
    fn one_bar_per_method_and_metric() {
        let svg = render_bars(
            "a<b",
            &[report("target_only", 1.0, 100.0), report("specexit", 1.0, 50.0)],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        // 3 panels x 2 bars + background + 2 legend swatches
        assert_eq!(svg.matches("<rect").count(), 9);
    }

    #[test]
    fn empty_and_zero_reports_render() {
        assert!(render_bars("empty", &[]).contains("</svg>"));
        let svg = render_bars("zeros", &[report("x", 0.0, 0.0)]);
        assert!(!svg.contains("NaN"));
    }
}
