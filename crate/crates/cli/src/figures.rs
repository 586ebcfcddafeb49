//! Static SVG figures: corner-style posterior panels and sweep curves.

use std::fmt::Write as _;

use hnpe::metrics::SweepRow;

const PANEL: f64 = 180.0;
const GAP: f64 = 50.0;
const MARGIN: f64 = 60.0;
const BINS: usize = 40;
const MAX_POINTS: usize = 3000;
const LEARNED: &str = "#1f77b4";
const REFERENCE: &str = "#d62728";

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Self {
            body: String::new(),
            width,
            height,
        }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="{width}"/>"#
        );
    }

    #[allow(clippy::too_many_arguments)]
    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, opacity: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}" fill-opacity="{opacity}" stroke="{stroke}"/>"#
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"/>"#,
            p.join(" ")
        );
    }

    fn polygon(&mut self, pts: &[(f64, f64)], fill: &str, opacity: f64) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polygon points="{}" fill="{fill}" fill-opacity="{opacity}"/>"#,
            p.join(" ")
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{fill}" fill-opacity="{opacity}"/>"#
        );
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let s = s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="{size}" text-anchor="{anchor}">{s}</text>"#
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn short(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Axis limits over every column `k` of the given sample sets.
fn limits<'a>(sets: impl Iterator<Item = &'a Vec<Vec<f64>>>, k: usize) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in sets {
        for r in s {
            lo = lo.min(r[k]);
            hi = hi.max(r[k]);
        }
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.02 * (hi - lo);
    (lo - pad, hi + pad)
}

fn histogram(samples: &[Vec<f64>], k: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    let mut counts = vec![0.0; BINS];
    for r in samples {
        let b = (((r[k] - lo) / (hi - lo)) * BINS as f64).floor();
        if b >= 0.0 && (b as usize) < BINS {
            counts[b as usize] += 1.0;
        }
    }
    let width = (hi - lo) / BINS as f64;
    let total = samples.len().max(1) as f64;
    counts.iter().map(|c| c / (total * width)).collect()
}

fn frame(svg: &mut Svg, x: f64, y: f64, (lo, hi): (f64, f64), label: &str) {
    svg.rect(x, y, PANEL, PANEL, "none", 0.0, "black");
    svg.text(x, y + PANEL + 14.0, 10.0, "start", &short(lo));
    svg.text(x + PANEL, y + PANEL + 14.0, 10.0, "end", &short(hi));
    svg.text(x + PANEL / 2.0, y + PANEL + 28.0, 12.0, "middle", label);
}

/// One row of a corner figure.
pub struct PosteriorRow {
    pub title: String,
    pub names: Vec<String>,
    pub learned: Vec<Vec<f64>>,
    pub reference: Option<Vec<Vec<f64>>>,
}

/// Rows of marginal histograms followed by a joint scatter of the first
/// and last parameter. Learned samples in blue, reference samples in red.
pub fn corner_figure(rows: &[PosteriorRow]) -> String {
    let d = rows.iter().map(|r| r.names.len()).max().unwrap_or(1);
    let panels = d + usize::from(d > 1);
    let width = 2.0 * MARGIN + panels as f64 * PANEL + (panels - 1) as f64 * GAP;
    let row_h = PANEL + GAP + 20.0;
    let height = MARGIN + rows.len() as f64 * row_h + 20.0;
    let mut svg = Svg::new(width, height);
    svg.rect(MARGIN, 8.0, 12.0, 12.0, LEARNED, 0.6, "none");
    svg.text(MARGIN + 16.0, 18.0, 12.0, "start", "learned");
    svg.rect(MARGIN + 90.0, 8.0, 12.0, 12.0, REFERENCE, 0.6, "none");
    svg.text(MARGIN + 106.0, 18.0, 12.0, "start", "reference");
    for (i, row) in rows.iter().enumerate() {
        let y = MARGIN + i as f64 * row_h;
        svg.text(MARGIN, y - 8.0, 13.0, "start", &row.title);
        let sets: Vec<&Vec<Vec<f64>>> = std::iter::once(&row.learned).chain(row.reference.as_ref()).collect();
        let lims: Vec<(f64, f64)> = (0..row.names.len()).map(|k| limits(sets.iter().copied(), k)).collect();
        for k in 0..row.names.len() {
            let x = MARGIN + k as f64 * (PANEL + GAP);
            let hists: Vec<(Vec<f64>, &str)> = sets
                .iter()
                .zip([LEARNED, REFERENCE])
                .map(|(s, c)| (histogram(s, k, lims[k]), c))
                .collect();
            let top = hists
                .iter()
                .flat_map(|(h, _)| h.iter().copied())
                .fold(0.0, f64::max)
                .max(1e-300);
            for (h, color) in &hists {
                let bw = PANEL / BINS as f64;
                for (b, v) in h.iter().enumerate() {
                    let bh = PANEL * v / top;
                    if bh > 0.0 {
                        svg.rect(x + b as f64 * bw, y + PANEL - bh, bw, bh, color, 0.45, "none");
                    }
                }
            }
            frame(&mut svg, x, y, lims[k], &row.names[k]);
        }
        if row.names.len() > 1 {
            let (a, b) = (0, row.names.len() - 1);
            let x = MARGIN + row.names.len() as f64 * (PANEL + GAP);
            for (s, color) in sets.iter().zip([LEARNED, REFERENCE]) {
                let step = (s.len() / MAX_POINTS).max(1);
                for r in s.iter().step_by(step) {
                    let px = x + PANEL * (r[a] - lims[a].0) / (lims[a].1 - lims[a].0);
                    let py = y + PANEL - PANEL * (r[b] - lims[b].0) / (lims[b].1 - lims[b].0);
                    svg.circle(px, py, 1.2, color, 0.35);
                }
            }
            frame(
                &mut svg,
                x,
                y,
                lims[a],
                &format!("{} vs {}", row.names[a], row.names[b]),
            );
            svg.text(x - 4.0, y + 10.0, 10.0, "end", &short(lims[b].1));
            svg.text(x - 4.0, y + PANEL, 10.0, "end", &short(lims[b].0));
        }
    }
    svg.finish()
}

/// Median curve with an interquartile band on log-log axes. Non-positive
/// sweep values are shifted to half the smallest positive one.
pub fn sweep_figure(sweep_name: &str, value_name: &str, rows: &[SweepRow]) -> String {
    let (w, h) = (PANEL * 2.5, PANEL * 1.8);
    let mut svg = Svg::new(w + 2.0 * MARGIN, h + 2.0 * MARGIN);
    let min_pos = rows
        .iter()
        .map(|r| r.sweep)
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let min_pos = if min_pos.is_finite() { min_pos } else { 1.0 };
    let xs: Vec<f64> = rows
        .iter()
        .map(|r| if r.sweep > 0.0 { r.sweep } else { min_pos / 2.0 })
        .collect();
    let floor = 1e-300;
    let ys = |f: fn(&SweepRow) -> f64| -> Vec<f64> { rows.iter().map(|r| f(r).max(floor)).collect() };
    let (med, q1, q3) = (ys(|r| r.median), ys(|r| r.q1), ys(|r| r.q3));
    let log_range = |v: &[f64]| {
        let lo = v.iter().fold(f64::INFINITY, |a, &b| a.min(b)).log10().floor();
        let hi = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)).log10().ceil();
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, hi + 1.0)
        }
    };
    let (xl, xh) = log_range(&xs);
    let all: Vec<f64> = q1.iter().chain(&q3).chain(&med).copied().collect();
    let (yl, yh) = log_range(&all);
    let px = |v: f64| MARGIN + w * (v.log10() - xl) / (xh - xl);
    let py = |v: f64| MARGIN + h - h * (v.log10() - yl) / (yh - yl);
    svg.rect(MARGIN, MARGIN, w, h, "none", 0.0, "black");
    for e in (xl as i32)..=(xh as i32) {
        let x = px(10f64.powi(e));
        svg.line(x, MARGIN + h, x, MARGIN + h + 5.0, "black", 1.0);
        svg.text(x, MARGIN + h + 18.0, 10.0, "middle", &format!("1e{e}"));
    }
    for e in (yl as i32)..=(yh as i32) {
        let y = py(10f64.powi(e));
        svg.line(MARGIN - 5.0, y, MARGIN, y, "black", 1.0);
        svg.text(MARGIN - 8.0, y + 4.0, 10.0, "end", &format!("1e{e}"));
    }
    let mut band: Vec<(f64, f64)> = xs.iter().zip(&q3).map(|(&x, &y)| (px(x), py(y))).collect();
    band.extend(xs.iter().zip(&q1).rev().map(|(&x, &y)| (px(x), py(y))));
    svg.polygon(&band, LEARNED, 0.25);
    let line: Vec<(f64, f64)> = xs.iter().zip(&med).map(|(&x, &y)| (px(x), py(y))).collect();
    svg.polyline(&line, LEARNED, 2.0);
    for &(x, y) in &line {
        svg.circle(x, y, 3.0, LEARNED, 1.0);
    }
    svg.text(MARGIN + w / 2.0, MARGIN + h + 40.0, 13.0, "middle", sweep_name);
    svg.text(
        MARGIN,
        MARGIN - 12.0,
        13.0,
        "start",
        &format!("{value_name} (median, interquartile band)"),
    );
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_has_one_frame_per_panel() {
        let rows: Vec<PosteriorRow> = (0..3)
            .map(|i| PosteriorRow {
                title: format!("N = {i}"),
                names: vec!["alpha".into(), "beta".into()],
                learned: (0..50).map(|j| vec![j as f64 / 50.0, 1.0 - j as f64 / 50.0]).collect(),
                reference: Some(vec![vec![0.5, 0.5]; 10]),
            })
            .collect();
        let svg = corner_figure(&rows);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("stroke=\"black\"/>").count(), 9);
        assert!(svg.contains("N = 2"));
    }

    #[test]
    fn sweep_handles_zero_abscissa() {
        let rows = vec![
            SweepRow {
                sweep: 0.0,
                median: 0.1,
                q1: 0.05,
                q3: 0.2,
                n_ok: 9,
            },
            SweepRow {
                sweep: 10.0,
                median: 0.01,
                q1: 0.005,
                q3: 0.02,
                n_ok: 9,
            },
            SweepRow {
                sweep: 100.0,
                median: 0.001,
                q1: 0.0005,
                q3: 0.002,
                n_ok: 9,
            },
        ];
        let svg = sweep_figure("N", "divergence", &rows);
        assert!(svg.contains("<polygon") && svg.contains("<polyline"));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
