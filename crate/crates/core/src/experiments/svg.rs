//! Minimal SVG emitters for report figures.

use std::fmt::Write;

use super::report::{CellStats, MetricGrid};

const CELL: f64 = 56.0;
const LEFT: f64 = 70.0;
const TOP: f64 = 40.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Blue-to-yellow ramp over t in [0, 1].
fn color(t: f64) -> String {
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let stops = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];
    let x = t * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let f = x - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    let mix = |p: f64, q: f64| (p + (q - p) * f).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(a.0, b.0),
        mix(a.1, b.1),
        mix(a.2, b.2)
    )
}

fn k(n: usize) -> String {
    if n >= 10_000 {
        format!("{:.0}k", n as f64 / 1000.0)
    } else if n >= 1000 {
        format!("{:.1}k", n as f64 / 1000.0)
    } else {
        n.to_string()
    }
}

fn value_range(values: impl Iterator<Item = f64>, fixed: Option<(f64, f64)>) -> (f64, f64) {
    if let Some(r) = fixed {
        return r;
    }
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn open(w: f64, h: f64, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="18" font-size="13">{}</text>"#,
        LEFT,
        esc(title)
    );
    s
}

fn axes_labels(s: &mut String, grid: &MetricGrid, cw: f64, ch: f64) {
    for (c, sc) in grid.scales.iter().enumerate() {
        let x = LEFT + (c as f64 + 0.5) * cw;
        let y = TOP + grid.bits.len() as f64 * ch + 14.0;
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="middle">{}</text>"#,
            k(sc.param_count)
        );
    }
    for (r, b) in grid.bits.iter().enumerate() {
        let y = TOP + (r as f64 + 0.5) * ch + 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">l={b}</text>"#,
            LEFT - 6.0
        );
    }
    let y = TOP + grid.bits.len() as f64 * ch + 30.0;
    let _ = writeln!(s, r#"<text x="{LEFT:.1}" y="{y:.1}">parameters</text>"#);
}

/// Heatmap of one statistic; rows are latent bits and columns parameter
/// counts, both ascending.
pub fn heatmap(
    grid: &MetricGrid,
    pick: fn(&CellStats) -> f64,
    title: &str,
    fixed: Option<(f64, f64)>,
) -> String {
    let (lo, hi) = value_range(grid.cells.iter().flatten().flatten().map(pick), fixed);
    let w = LEFT + grid.scales.len() as f64 * CELL + 20.0;
    let h = TOP + grid.bits.len() as f64 * CELL + 44.0;
    let mut s = open(w, h, title);
    for (r, row) in grid.cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let (x, y) = (LEFT + c as f64 * CELL, TOP + r as f64 * CELL);
            match cell {
                Some(cs) => {
                    let v = pick(cs);
                    let t = (v - lo) / (hi - lo);
                    let ink = if t > 0.6 { "black" } else { "white" };
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x:.1}" y="{y:.1}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                        color(t)
                    );
                    let _ = writeln!(
                        s,
                        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="{ink}">{v:.3}</text>"#,
                        x + CELL / 2.0,
                        y + CELL / 2.0 + 4.0
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        r##"<rect x="{x:.1}" y="{y:.1}" width="{CELL}" height="{CELL}" fill="#eeeeee"/>"##
                    );
                }
            }
        }
    }
    axes_labels(&mut s, grid, CELL, CELL);
    s.push_str("</svg>\n");
    s
}

/// One small histogram of the per-seed values in each cell, laid out like
/// the heatmap and sharing a value axis.
pub fn histograms(grid: &MetricGrid, title: &str, fixed: Option<(f64, f64)>) -> String {
    const BINS: usize = 10;
    let (pw, ph) = (90.0, 60.0);
    let (lo, hi) = value_range(
        grid.cells
            .iter()
            .flatten()
            .flatten()
            .flat_map(|c| c.values.iter().copied()),
        fixed,
    );
    let w = LEFT + grid.scales.len() as f64 * pw + 20.0;
    let h = TOP + grid.bits.len() as f64 * ph + 44.0;
    let mut s = open(w, h, &format!("{title} [{lo:.3}, {hi:.3}]"));
    for (r, row) in grid.cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let (x0, y0) = (LEFT + c as f64 * pw, TOP + r as f64 * ph);
            let _ = writeln!(
                s,
                r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#cccccc"/>"##,
                x0 + 2.0,
                y0 + 2.0,
                pw - 4.0,
                ph - 4.0
            );
            let Some(cs) = cell else { continue };
            let mut counts = [0usize; BINS];
            for &v in &cs.values {
                let b = (((v - lo) / (hi - lo)) * BINS as f64).floor();
                counts[(b.max(0.0) as usize).min(BINS - 1)] += 1;
            }
            let top = *counts.iter().max().unwrap_or(&1) as f64;
            let bw = (pw - 8.0) / BINS as f64;
            for (i, &n) in counts.iter().enumerate() {
                if n == 0 {
                    continue;
                }
                let bh = (ph - 10.0) * n as f64 / top;
                let _ = writeln!(
                    s,
                    r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{bh:.1}" fill="#3b528b"/>"##,
                    x0 + 4.0 + i as f64 * bw,
                    y0 + ph - 4.0 - bh,
                    bw - 1.0
                );
            }
        }
    }
    axes_labels(&mut s, grid, pw, ph);
    s.push_str("</svg>\n");
    s
}

/// Scatter plot of (x, y) points.
pub fn scatter(points: &[(f64, f64)], title: &str, xlabel: &str, ylabel: &str) -> String {
    let (pw, ph) = (360.0, 260.0);
    let (xlo, xhi) = value_range(points.iter().map(|p| p.0), None);
    let (ylo, yhi) = value_range(points.iter().map(|p| p.1), None);
    let mut s = open(LEFT + pw + 20.0, TOP + ph + 44.0, title);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for &(x, y) in points {
        let cx = LEFT + (x - xlo) / (xhi - xlo) * pw;
        let cy = TOP + ph - (y - ylo) / (yhi - ylo) * ph;
        let _ = writeln!(
            s,
            r##"<circle cx="{cx:.1}" cy="{cy:.1}" r="3" fill="#21918c" fill-opacity="0.7"/>"##
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{:.1}">{xlo:.3}</text>"#,
        TOP + ph + 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{xhi:.3}</text>"#,
        LEFT + pw,
        TOP + ph + 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        TOP + ph + 30.0,
        esc(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yhi:.3}</text>"#,
        LEFT - 4.0,
        TOP + 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{ylo:.3}</text>"#,
        LEFT - 4.0,
        TOP + ph
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})" text-anchor="middle">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(ylabel)
    );
    s.push_str("</svg>\n");
    s
}
