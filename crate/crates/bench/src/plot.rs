//! SVG charts drawn from the CSV outputs alone.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Result;
use minidisc::distiller::EvalRecord;
use minidisc::scheduler::{MaxidiscEntry, TradeoffRecord};

use crate::report::{read_csv, StructureRow, CANDIDATES_CSV, MAXIDISC_CSV, STRUCTURES_CSV, TRADEOFFS_CSV};

pub const METRIC_SVG: &str = "scale_vs_metric.svg";
pub const TRADEOFF_SVG: &str = "scale_vs_tradeoff.svg";
pub const STUDENT_SVG: &str = "scale_vs_student.svg";
pub const STRUCTURES_SVG: &str = "structures.svg";

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#2ca02c", "#d62728", "#ff7f0e"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, width / 2.0, esc(title));
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Line chart with one polyline and point markers per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts = || series.iter().flat_map(|s| s.points.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (x0, x1) = range(pts().map(|p| p.0));
    let (y0, y1) = range(pts().map(|p| p.1));
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
    let mut out = String::new();
    header(&mut out, W, H, title);
    let _ = writeln!(out, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
    for i in 0..=4 {
        let f = f64::from(i) / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            out,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.2}</text>"##,
            sx(xv),
            TOP + ph + 18.0
        );
        let _ = writeln!(out, r##"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"##, LEFT - 6.0, sy(yv) + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 18.0, esc(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(y_label)
    );
    if pts().next().is_none() {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">no data</text>"#, LEFT + pw / 2.0, TOP + ph / 2.0);
    }
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if coords.len() > 1 {
            let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, coords.join(" "));
        }
        for c in &coords {
            let (cx, cy) = c.split_once(',').expect("coordinate pair");
            let _ = writeln!(out, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = TOP + 14.0 + 16.0 * k as f64;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{}</text>"#, LEFT + 10.0, esc(&s.label));
    }
    out.push_str("</svg>\n");
    out
}

/// One bar panel per named series, layers along x.
pub fn bar_chart(title: &str, panels: &[(&str, Vec<usize>)]) -> String {
    let panel_h = 160.0;
    let height = TOP + panel_h * panels.len().max(1) as f64 + 20.0;
    let mut out = String::new();
    header(&mut out, W, height, title);
    for (k, (name, values)) in panels.iter().enumerate() {
        let top = TOP + k as f64 * panel_h;
        let ph = panel_h - 50.0;
        let pw = W - LEFT - RIGHT;
        let max = values.iter().copied().max().unwrap_or(0).max(1) as f64;
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(out, r#"<text x="{LEFT}" y="{:.1}">{}</text>"#, top + 10.0, esc(name));
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#333"/>"##,
            top + 20.0 + ph,
            LEFT + pw,
            top + 20.0 + ph
        );
        let slot = pw / values.len().max(1) as f64;
        for (i, &v) in values.iter().enumerate() {
            let h = v as f64 / max * ph;
            let x = LEFT + i as f64 * slot + slot * 0.15;
            let y = top + 20.0 + ph - h;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{color}"/>"#,
                slot * 0.7
            );
            let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v}</text>"#, x + slot * 0.35, y - 3.0);
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">L{i}</text>"#,
                x + slot * 0.35,
                top + 34.0 + ph
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Charts for one run directory, from whichever CSVs it holds. Returns the
/// files written.
pub fn plot_run_dir(dir: &Path) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let mut emit = |name: &str, svg: String| -> Result<()> {
        fs::write(dir.join(name), svg)?;
        written.push(name.to_string());
        Ok(())
    };
    if dir.join(CANDIDATES_CSV).exists() {
        let evals: Vec<EvalRecord> = read_csv(&dir.join(CANDIDATES_CSV))?;
        let series = Series {
            label: "candidate metric m_a".into(),
            points: evals.iter().map(|e| (e.target_scale, e.metric)).collect(),
        };
        emit(METRIC_SVG, line_chart("Candidate metric by scale", "scale", "dev accuracy", &[series]))?;
    }
    if dir.join(TRADEOFFS_CSV).exists() {
        let recs: Vec<TradeoffRecord> = read_csv(&dir.join(TRADEOFFS_CSV))?;
        let lambda = recs.first().map_or(0.0, |r| r.lambda);
        let series = Series {
            label: format!("t_lambda (lambda = {lambda})"),
            points: recs.iter().map(|r| (r.scale, r.t_lambda)).collect(),
        };
        emit(TRADEOFF_SVG, line_chart("Tradeoff by scale", "scale", "t_lambda", &[series]))?;
    }
    if dir.join(MAXIDISC_CSV).exists() {
        let entries: Vec<MaxidiscEntry> = read_csv(&dir.join(MAXIDISC_CSV))?;
        let series = [
            Series {
                label: "assistant metric".into(),
                points: entries.iter().map(|e| (e.target_scale, e.ta_metric)).collect(),
            },
            Series {
                label: "student metric".into(),
                points: entries.iter().map(|e| (e.target_scale, e.student_metric)).collect(),
            },
        ];
        emit(STUDENT_SVG, line_chart("Student metric by assistant scale", "assistant scale", "dev accuracy", &series))?;
    }
    if dir.join(STRUCTURES_CSV).exists() {
        let rows: Vec<StructureRow> = read_csv(&dir.join(STRUCTURES_CSV))?;
        let panels = [
            ("heads", rows.iter().map(|r| r.heads).collect()),
            ("neurons", rows.iter().map(|r| r.neurons).collect()),
        ];
        emit(STRUCTURES_SVG, bar_chart("Surviving structures of the chosen assistant", &panels))?;
    }
    Ok(written)
}

/// Plots every `<task>/<seed>` run directory below `out`.
pub fn plot_dir(out: &Path) -> Result<usize> {
    let mut count = 0;
    let mut tasks: Vec<_> = fs::read_dir(out)?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    tasks.sort();
    for task in tasks {
        let mut runs: Vec<_> = fs::read_dir(&task)?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
        runs.sort();
        for run in runs {
            count += plot_run_dir(&run)?.len();
        }
    }
    Ok(count)
}
