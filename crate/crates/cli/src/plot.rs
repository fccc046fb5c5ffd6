//! Minimal SVG charts for run reports.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(ys);
        Self { x0, x1, y0, y1 }
    }

    fn x(&self, v: f64) -> f64 {
        LEFT + (v - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (bx, by) = (H - BOTTOM, W - RIGHT);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{bx}" x2="{by}" y2="{bx}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{bx}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let y = f.y(v);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, tick(v));
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{by}" y2="{y:.1}" stroke="#ddd"/>"##);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == 0.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// One polyline per named series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let f = Frame::new(pts.clone().map(|p| p.0), pts.map(|p| p.1));
    let mut s = open(title, xlabel, ylabel, &f);
    for i in 0..=4 {
        let v = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, f.x(v), H - BOTTOM + 16.0, tick(v));
    }
    for (k, (name, points)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", f.x(x), f.y(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = TOP + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" text-anchor="end" fill="{color}">{}</text>"#,
            W - RIGHT - 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One box (quartiles, whiskers at the extremes) per labelled group.
pub fn box_chart(title: &str, xlabel: &str, ylabel: &str, groups: &[(String, Vec<f64>)]) -> String {
    let all = groups.iter().flat_map(|(_, v)| v.iter().copied());
    let f = Frame::new([0.0, groups.len() as f64].into_iter(), all);
    let mut s = open(title, xlabel, ylabel, &f);
    let slot = (W - LEFT - RIGHT) / groups.len().max(1) as f64;
    for (i, (label, values)) in groups.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{}</text>"#, H - BOTTOM + 16.0, escape(label));
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let (lo, q1, med, q3, hi) = (v[0], quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75), v[v.len() - 1]);
        let half = (slot * 0.25).min(30.0);
        let color = COLORS[0];
        let _ = writeln!(s, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="{color}"/>"#, f.y(lo), f.y(hi));
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="white" stroke="{color}"/>"#,
            cx - half,
            f.y(q3),
            2.0 * half,
            (f.y(q1) - f.y(q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
            cx - half,
            f.y(med),
            cx + half,
            f.y(med)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let line = line_chart("loss", "step", "value", &[("total".into(), vec![(0.0, 2.0), (1.0, 1.5), (2.0, 1.0)])]);
        assert!(line.starts_with("<svg") && line.trim_end().ends_with("</svg>"));
        assert!(line.contains("<polyline"));
        let boxes = box_chart("auroc", "n", "AUROC", &[("1".into(), vec![0.5, 0.6, 0.7]), ("2".into(), vec![0.8])]);
        assert_eq!(boxes.matches("<rect").count(), 3);
    }

    #[test]
    fn quartiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn labels_are_escaped() {
        let s = line_chart("a<b", "x", "y", &[]);
        assert!(s.contains("a&lt;b"));
    }
}
