//! Minimal SVG line plots: polylines and filled bands, fixed palette.

use std::fmt::Write;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

pub struct Line {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Band {
    pub lo: Vec<(f64, f64)>,
    pub hi: Vec<(f64, f64)>,
    pub opacity: f64,
}

#[derive(Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub lines: Vec<Line>,
    pub bands: Vec<Band>,
    pub scatter: Vec<(f64, f64)>,
    pub log_x: bool,
    pub log_y: bool,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

impl Plot {
    fn tx(&self, v: f64) -> f64 {
        if self.log_x { v.log10() } else { v }
    }
    fn ty(&self, v: f64) -> f64 {
        if self.log_y { v.log10() } else { v }
    }

    pub fn render(&self) -> String {
        let pts = self
            .lines
            .iter()
            .flat_map(|l| l.points.iter())
            .chain(self.bands.iter().flat_map(|b| b.lo.iter().chain(b.hi.iter())))
            .chain(self.scatter.iter())
            .map(|&(x, y)| (self.tx(x), self.ty(y)))
            .filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let sx = |x: f64| PAD + (self.tx(x) - x0) / (x1 - x0) * (W - 2.0 * PAD);
        let sy = |y: f64| H - PAD - (self.ty(y) - y0) / (y1 - y0) * (H - 2.0 * PAD);
        let path = |p: &[(f64, f64)]| {
            p.iter()
                .filter(|(x, y)| self.tx(*x).is_finite() && self.ty(*y).is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        for b in &self.bands {
            let mut poly = b.lo.clone();
            poly.extend(b.hi.iter().rev());
            let _ = writeln!(s, r#"<polygon points="{}" fill="{}" fill-opacity="{:.2}" stroke="none"/>"#, path(&poly), PALETTE[0], b.opacity);
        }
        for &(x, y) in &self.scatter {
            if self.tx(x).is_finite() && self.ty(y).is_finite() {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="black"/>"#, sx(x), sy(y));
            }
        }
        for (i, l) in self.lines.iter().enumerate() {
            let c = PALETTE[i % PALETTE.len()];
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, path(&l.points));
            let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{}</text>"#, W - PAD - 150.0, PAD + 15.0 * i as f64, escape(&l.label));
        }
        let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#, W - 2.0 * PAD, H - 2.0 * PAD);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(&self.title));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(&self.x_label));
        let _ = writeln!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{}</text>"#, H / 2.0, H / 2.0, escape(&self.y_label));
        let lx = |v: f64| if self.log_x { format!("1e{v:.1}") } else { format!("{v:.3}") };
        let ly = |v: f64| if self.log_y { format!("1e{v:.1}") } else { format!("{v:.3}") };
        let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{}</text>"#, H - PAD + 15.0, lx(x0));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, W - PAD, H - PAD + 15.0, lx(x1));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD - 3.0, H - PAD, ly(y0));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD - 3.0, PAD + 10.0, ly(y1));
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_well_formed_document() {
        let p = Plot {
            title: "a<b".into(),
            lines: vec![Line { label: "l".into(), points: vec![(0.0, 1.0), (1.0, 2.0)] }],
            bands: vec![Band { lo: vec![(0.0, 0.0), (1.0, 1.0)], hi: vec![(0.0, 2.0), (1.0, 3.0)], opacity: 0.2 }],
            log_y: true,
            ..Plot::default()
        };
        let s = p.render();
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        assert_eq!(s.matches("<polyline").count(), 1);
        assert!(!s.contains("NaN"));
    }
}
