//! SVG charts of a stream report: error and restore-ratio curves, and a
//! heat strip of per-layer expert weights.

use std::fmt::Write;

use crate::report::ReportRow;

const W: f64 = 800.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 60.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 40.0;

#[derive(Debug, Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
}

impl Scale {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            return Self { lo: lo - 0.5, hi: hi + 0.5 };
        }
        Self { lo, hi }
    }

    fn y(&self, v: f64) -> f64 {
        TOP + (H - TOP - BOTTOM) * (1.0 - (v - self.lo) / (self.hi - self.lo))
    }
}

fn x_of(i: usize, n: usize) -> f64 {
    let span = (n.max(2) - 1) as f64;
    LEFT + (W - LEFT - RIGHT) * i as f64 / span
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(out, r#"<text x="{}" y="18" text-anchor="middle">{title}</text>"#, W / 2.0);
}

fn axes(out: &mut String, left: Scale, right: Option<Scale>, n: usize) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = write!(out, r#"<g stroke="black" fill="none"><line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    if right.is_some() {
        let _ = write!(out, r#"<line x1="{x1}" y1="{y0}" x2="{x1}" y2="{y1}"/>"#);
    }
    out.push_str("</g>");
    let _ = write!(out, r#"<text x="{x0}" y="{}">0</text>"#, y1 + 16.0);
    let _ = write!(out, r#"<text x="{x1}" y="{}" text-anchor="end">{}</text>"#, y1 + 16.0, n.saturating_sub(1));
    let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="middle">instance</text>"#, W / 2.0, H - 6.0);
    let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y0 + 4.0, left.hi);
    let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y1, left.lo);
    if let Some(r) = right {
        let _ = write!(out, r#"<text x="{}" y="{}">{:.3}</text>"#, x1 + 4.0, y0 + 4.0, r.hi);
        let _ = write!(out, r#"<text x="{}" y="{}">{:.3}</text>"#, x1 + 4.0, y1, r.lo);
    }
}

fn polyline(out: &mut String, name: &str, color: &str, dash: bool, values: &[f64], scale: Scale) {
    let n = values.len();
    let pts: Vec<String> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, v)| format!("{:.2},{:.2}", x_of(i, n), scale.y(*v)))
        .collect();
    let dash = if dash { r#" stroke-dasharray="6 3""# } else { "" };
    let _ = write!(
        out,
        r#"<polyline data-series="{name}" fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
        pts.join(" ")
    );
}

/// ADE and FDE against the left axis; restore ratio, with its zero (base)
/// line, against the right axis when the report carries it.
pub fn curves_svg(rows: &[ReportRow]) -> String {
    let n = rows.len();
    let ade: Vec<f64> = rows.iter().map(|r| r.ade).collect();
    let fde: Vec<f64> = rows.iter().map(|r| r.fde).collect();
    let has_rr = rows.iter().any(|r| r.rr.is_some());
    let left = Scale::fit(ade.iter().chain(&fde).copied());
    let rr: Vec<f64> = rows.iter().map(|r| r.rr.unwrap_or(f64::NAN)).collect();
    let right = has_rr.then(|| Scale::fit(rr.iter().copied().chain([0.0])));
    let mut out = String::new();
    header(&mut out, "ADE / FDE and restore ratio");
    axes(&mut out, left, right, n);
    if n > 0 {
        polyline(&mut out, "ade", "#1f77b4", false, &ade, left);
        polyline(&mut out, "fde", "#ff7f0e", false, &fde, left);
    }
    if let Some(r) = right {
        let y = r.y(0.0);
        let _ = write!(
            out,
            r##"<line data-series="base" x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#888" stroke-dasharray="2 2"/>"##,
            W - RIGHT
        );
        polyline(&mut out, "rr", "#2ca02c", true, &rr, r);
    }
    let legend = [("ADE", "#1f77b4"), ("FDE", "#ff7f0e"), ("rr", "#2ca02c")];
    for (i, (label, color)) in legend.iter().enumerate().take(if has_rr { 3 } else { 2 }) {
        let x = LEFT + 10.0 + 60.0 * i as f64;
        let _ = write!(out, r#"<text x="{x}" y="{}" fill="{color}">{label}</text>"#, TOP + 14.0);
    }
    out.push_str("</svg>\n");
    out
}

/// One row per layer and one column per instance; darker green marks a
/// larger expert weight.
pub fn heat_strip_svg(rows: &[ReportRow]) -> String {
    let layers = rows.iter().map(|r| r.expert.len()).max().unwrap_or(0);
    let scale = Scale::fit(rows.iter().flat_map(|r| r.expert.iter().flatten().copied()));
    let mut out = String::new();
    header(&mut out, "expert weights per layer");
    let n = rows.len();
    let cell_w = (W - LEFT - RIGHT) / n.max(1) as f64;
    let cell_h = (H - TOP - BOTTOM) / layers.max(1) as f64;
    for l in 0..layers {
        let y = TOP + cell_h * l as f64;
        let _ = write!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">e_{}</text>"#, LEFT - 4.0, y + cell_h / 2.0 + 4.0, l + 1);
        for (i, r) in rows.iter().enumerate() {
            let Some(v) = r.expert.get(l).copied().flatten().filter(|v| v.is_finite()) else {
                continue;
            };
            let t = (v - scale.lo) / (scale.hi - scale.lo);
            let _ = write!(
                out,
                r#"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{cell_h:.2}" fill="rgb(0,{},0)" fill-opacity="{:.3}"/>"#,
                LEFT + cell_w * i as f64,
                cell_w,
                (160.0 - 80.0 * t).round(),
                0.1 + 0.9 * t
            );
        }
    }
    axes(&mut out, scale, None, n);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::HealthKind;

    fn rows(n: usize, rr: bool) -> Vec<ReportRow> {
        (0..n)
            .map(|i| ReportRow {
                instance_idx: i,
                ade: 1.0 / (1.0 + i as f64),
                fde: 2.0 / (1.0 + i as f64),
                rr: rr.then_some(0.5 - 0.1 * i as f64),
                loss: 0.0,
                grad_norm: 1.0,
                health: HealthKind::Normal,
                expert: vec![Some(0.1 * i as f64), Some(0.5)],
                alpha: vec![None, None],
            })
            .collect()
    }

    fn points(svg: &str, series: &str) -> usize {
        let doc = roxmltree::Document::parse(svg).unwrap();
        doc.descendants()
            .find(|n| n.attribute("data-series") == Some(series))
            .map(|n| n.attribute("points").unwrap_or("").split_whitespace().count())
            .unwrap_or(0)
    }

    #[test]
    fn curves_are_well_formed() {
        let svg = curves_svg(&rows(7, true));
        assert_eq!(points(&svg, "ade"), 7);
        assert_eq!(points(&svg, "rr"), 7);
        assert!(svg.contains(r#"data-series="base""#));
        let svg = curves_svg(&rows(3, false));
        assert!(!svg.contains("data-series=\"base\""));
        roxmltree::Document::parse(&curves_svg(&[])).unwrap();
    }

    #[test]
    fn heat_strip_is_well_formed() {
        let svg = heat_strip_svg(&rows(5, false));
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let cells = doc.descendants().filter(|n| n.has_tag_name("rect")).count();
        assert_eq!(cells, 1 + 10);
        roxmltree::Document::parse(&heat_strip_svg(&[])).unwrap();
    }
}
