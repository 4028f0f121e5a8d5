//! Static SVG figures on a fixed 960x540 canvas.

use std::fmt::Write;

pub const WIDTH: f64 = 960.0;
pub const HEIGHT: f64 = 540.0;

const TRUTH_STYLE: &str = r##"stroke="#000000" stroke-dasharray="6 4""##;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    /// Dashed black.
    Truth,
    /// Solid, coloured by index.
    Line(usize),
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub style: Style,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
    pub log_y: bool,
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" font-size="15" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (1e-2..1e4).contains(&v.abs()) {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

/// Draw one panel into the box `(x, y, w, h)`.
fn panel(out: &mut String, p: &Panel, x: f64, y: f64, w: f64, h: f64) {
    let (ml, mr, mt, mb) = (58.0, 8.0, 18.0, 20.0);
    let (px, py, pw, ph) = (x + ml, y + mt, w - ml - mr, h - mt - mb);
    let ty = |v: f64| if p.log_y { v.max(1e-300).log10() } else { v };
    let xs = bounds(p.series.iter().flat_map(|s| s.points.iter().map(|q| q.0))).unwrap_or((0.0, 1.0));
    let ys = bounds(p.series.iter().flat_map(|s| s.points.iter().map(|q| ty(q.1)))).unwrap_or((0.0, 1.0));
    let sx = |v: f64| px + (v - xs.0) / (xs.1 - xs.0) * pw;
    let sy = |v: f64| py + ph - (ty(v) - ys.0) / (ys.1 - ys.0) * ph;

    let _ = writeln!(
        out,
        r#"<g class="panel"><text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        px + pw / 2.0,
        y + 13.0,
        escape(&p.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{px:.1}" y="{py:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#999999"/>"##
    );
    let untick = |v: f64| if p.log_y { 10f64.powf(v) } else { v };
    for (v, yy) in [(ys.0, py + ph), (ys.1, py + 8.0)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{yy:.1}" font-size="9" text-anchor="end">{}</text>"#,
            px - 3.0,
            fmt_tick(untick(v))
        );
    }
    for (v, anchor) in [(xs.0, "start"), (xs.1, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="{anchor}">{}</text>"#,
            sx(v),
            py + ph + 12.0,
            fmt_tick(v)
        );
    }
    for s in &p.series {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(a, b)| a.is_finite() && ty(*b).is_finite())
            .map(|&(a, b)| format!("{:.2},{:.2}", sx(a), sy(b)))
            .collect();
        let (class, style) = match s.style {
            Style::Truth => ("truth", TRUTH_STYLE.to_string()),
            Style::Line(i) => ("prediction", format!(r#"stroke="{}""#, PALETTE[i % PALETTE.len()])),
        };
        let _ = writeln!(
            out,
            r#"<polyline class="{class}" fill="none" stroke-width="1.6" {style} points="{}"><title>{}</title></polyline>"#,
            pts.join(" "),
            escape(&s.label)
        );
    }
    out.push_str("</g>\n");
}

fn legend(out: &mut String, entries: &[(&str, Style)]) {
    let mut x = 12.0;
    for (label, style) in entries {
        let stroke = match style {
            Style::Truth => TRUTH_STYLE.to_string(),
            Style::Line(i) => format!(r#"stroke="{}""#, PALETTE[i % PALETTE.len()]),
        };
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="14" x2="{}" y2="14" stroke-width="1.6" {stroke}/><text x="{}" y="18" font-size="11">{}</text>"#,
            x + 24.0,
            x + 28.0,
            escape(label)
        );
        x += 40.0 + 7.0 * label.len() as f64;
    }
}

/// Panels on a near-square grid below a title and legend.
pub fn panel_figure(title: &str, panels: &[Panel], legend_entries: &[(&str, Style)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    legend(&mut out, legend_entries);
    let n = panels.len().max(1);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (top, w) = (28.0, WIDTH / cols as f64);
    let h = (HEIGHT - top) / rows as f64;
    for (i, p) in panels.iter().enumerate() {
        panel(&mut out, p, (i % cols) as f64 * w, top + (i / cols) as f64 * h, w, h);
    }
    out.push_str("</svg>\n");
    out
}

/// Piecewise-linear blue-green-yellow ramp.
fn ramp(f: f64) -> String {
    const STOPS: [(f64, [f64; 3]); 4] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.35, [49.0, 104.0, 142.0]),
        (0.7, [53.0, 183.0, 121.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let f = if f.is_finite() { f.clamp(0.0, 1.0) } else { 0.0 };
    let k = STOPS.iter().position(|s| s.0 >= f).unwrap_or(3).max(1);
    let (a, b) = (STOPS[k - 1], STOPS[k]);
    let u = (f - a.0) / (b.0 - a.0);
    let c: Vec<u8> = (0..3).map(|i| (a.1[i] + u * (b.1[i] - a.1[i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// `values` is row-major `[rows.len()][cols.len()]`.
pub fn heatmap(title: &str, rows: &[String], cols: &[String], values: &[f64]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let (left, top, right, bottom) = (110.0, 36.0, 90.0, 30.0);
    let cw = (WIDTH - left - right) / cols.len().max(1) as f64;
    let rh = (HEIGHT - top - bottom) / rows.len().max(1) as f64;
    let (lo, hi) = bounds(values.iter().copied()).unwrap_or((0.0, 1.0));
    for (r, name) in rows.iter().enumerate() {
        let y = top + r as f64 * rh;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
            left - 4.0,
            y + rh / 2.0 + 3.0,
            escape(name)
        );
        for c in 0..cols.len() {
            let v = values[r * cols.len() + c];
            let _ = writeln!(
                out,
                r#"<rect class="cell" x="{:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {}: {v:e}</title></rect>"#,
                left + c as f64 * cw,
                cw + 0.3,
                rh + 0.3,
                ramp((v - lo) / (hi - lo)),
                escape(name),
                escape(&cols[c])
            );
        }
    }
    for (c, name) in cols.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
            left + (c as f64 + 0.5) * cw,
            HEIGHT - bottom + 14.0,
            escape(name)
        );
    }
    let bx = WIDTH - right + 20.0;
    let bh = HEIGHT - top - bottom;
    for i in 0..20 {
        let f = 1.0 - i as f64 / 19.0;
        let _ = writeln!(
            out,
            r#"<rect x="{bx}" y="{:.1}" width="16" height="{:.1}" fill="{}"/>"#,
            top + i as f64 * bh / 20.0,
            bh / 20.0 + 0.3,
            ramp(f)
        );
    }
    for (v, y) in [(hi, top + 8.0), (lo, top + bh)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y:.1}" font-size="9">{}</text>"#,
            bx + 20.0,
            fmt_tick(v)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#440154");
        assert_eq!(ramp(1.0), "#fde725");
        assert_eq!(ramp(f64::NAN), "#440154");
    }

    #[test]
    fn ticks() {
        assert_eq!(fmt_tick(0.5), "0.5");
        assert_eq!(fmt_tick(0.0), "0");
        assert_eq!(fmt_tick(12345.0), "1.23e4");
    }

    #[test]
    fn flat_series_still_has_a_range() {
        let (lo, hi) = bounds([2.0, 2.0].into_iter()).unwrap();
        assert!(lo < 2.0 && hi > 2.0);
        assert_eq!(bounds([f64::NAN].into_iter()), None);
    }
}
