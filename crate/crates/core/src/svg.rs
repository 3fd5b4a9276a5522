//! Minimal SVG emitters for selection curves, per-tumor bars and PMF strips.

use std::fmt::Write;

use crate::lpm::LpmModel;
use crate::selection::SelectionCurve;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }

    fn draw(&self, out: &mut String, xlabel: &str, ylabel: &str, yticks: usize) {
        let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
        let _ = writeln!(out, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#);
        for i in 0..=yticks {
            let v = self.y0 + (self.y1 - self.y0) * i as f64 / yticks as f64;
            let y = self.py(v);
            let _ = writeln!(
                out,
                r#"<line x1="{}" y1="{y:.2}" x2="{l}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                l - 4.0,
                l - 6.0,
                y + 4.0,
                format_tick(v)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            W / 2.0,
            H - 14.0,
            escape(xlabel)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e4) {
        format!("{:.2}", v)
    } else {
        format!("{:.1e}", v)
    }
}

/// Chi-squared per degree of freedom against component count, chosen count marked.
pub fn selection_curve(curve: &SelectionCurve) -> String {
    let mut out = String::new();
    open(&mut out, W, H, &format!("{} components", curve.phase));
    if curve.points.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let kmin = curve.points.first().map_or(0, |p| p.n_components) as f64;
    let kmax = curve.points.last().map_or(1, |p| p.n_components) as f64;
    let ymax = curve.points.iter().map(|p| p.chi2_per_dof).fold(1.0f64, f64::max) * 1.1;
    let ax = Axes {
        x0: kmin - 0.5,
        x1: kmax + 0.5,
        y0: 0.0,
        y1: ymax,
    };
    ax.draw(&mut out, "number of components", "chi2 per dof", 5);
    let _ = writeln!(
        out,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 4"/>"#,
        ax.px(ax.x0),
        ax.py(1.0),
        ax.px(ax.x1),
        ax.py(1.0)
    );
    let path: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", ax.px(p.n_components as f64), ax.py(p.chi2_per_dof)))
        .collect();
    let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, path.join(" "));
    for p in &curve.points {
        let (x, y) = (ax.px(p.n_components as f64), ax.py(p.chi2_per_dof));
        let fill = if p.flagged_degenerate { "white" } else { "steelblue" };
        let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{fill}" stroke="steelblue"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            H - MARGIN + 16.0,
            p.n_components
        );
        if p.n_components == curve.chosen {
            let _ = writeln!(
                out,
                r#"<path d="M{x:.2} {:.2} L{x:.2} {:.2} M{:.2} {:.2} L{x:.2} {:.2} L{:.2} {:.2}" stroke="crimson" stroke-width="2" fill="none"/>"#,
                y - 40.0,
                y - 10.0,
                x - 5.0,
                y - 16.0,
                y - 10.0,
                x + 5.0,
                y - 16.0
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bars with symmetric error bars, one per label.
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64, f64)]) -> String {
    let mut out = String::new();
    open(&mut out, W, H, title);
    let top = bars.iter().map(|b| b.1 + b.2.abs()).fold(0.0f64, f64::max);
    let bottom = bars.iter().map(|b| b.1 - b.2.abs()).fold(0.0f64, f64::min);
    let span = if top > bottom { top - bottom } else { 1.0 };
    let ax = Axes {
        x0: 0.0,
        x1: bars.len().max(1) as f64,
        y0: bottom - 0.05 * span * (bottom < 0.0) as u8 as f64,
        y1: top + 0.1 * span,
    };
    ax.draw(&mut out, "", ylabel, 5);
    let slot = (W - 2.0 * MARGIN) / bars.len().max(1) as f64;
    for (i, (label, value, err)) in bars.iter().enumerate() {
        let x = ax.px(i as f64) + 0.15 * slot;
        let (y_top, y_zero) = (ax.py(value.max(0.0)), ax.py(value.min(0.0)));
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{y_top:.2}" width="{:.2}" height="{:.2}" fill="steelblue"/>"#,
            0.7 * slot,
            (y_zero - y_top).max(0.0)
        );
        let cx = x + 0.35 * slot;
        let (e0, e1) = (ax.py(value - err.abs()), ax.py(value + err.abs()));
        let _ = writeln!(
            out,
            r#"<path d="M{cx:.2} {e0:.2} L{cx:.2} {e1:.2} M{:.2} {e0:.2} L{:.2} {e0:.2} M{:.2} {e1:.2} L{:.2} {e1:.2}" stroke="black"/>"#,
            cx - 4.0,
            cx + 4.0,
            cx - 4.0,
            cx + 4.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            H - MARGIN + 16.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One row of cells per component and timepoint, shaded by probability.
pub fn pmf_heat_strips(model: &LpmModel) -> String {
    let n_bins = model.binning.n_adc_bins;
    let cell_w = ((W - 2.0 * MARGIN) / n_bins as f64).floor().max(2.0);
    let row_h = 14.0;
    let rows = model.components.len() * 2;
    let height = 2.0 * MARGIN + rows as f64 * (row_h + 2.0) + model.components.len() as f64 * 6.0;
    let width = 2.0 * MARGIN + cell_w * n_bins as f64 + 60.0;
    let mut out = String::new();
    open(&mut out, width, height, "component PMFs by timepoint");
    let peak = model
        .components
        .iter()
        .flat_map(|c| c.probs.iter())
        .fold(0.0f64, |m, &v| m.max(v))
        .max(f64::MIN_POSITIVE);
    let mut y = MARGIN;
    for c in &model.components {
        for (t, label) in ["0h", "72h"].iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}{} {}</text>"#,
                MARGIN + 46.0,
                y + row_h - 3.0,
                if c.phase == crate::lpm::Phase::Control { "C" } else { "T" },
                c.index,
                label
            );
            for b in 0..n_bins {
                let v = c.probs[b * 2 + t] / peak;
                let shade = (255.0 * (1.0 - v.sqrt())).round().clamp(0.0, 255.0) as u8;
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.2}" y="{y:.2}" width="{cell_w:.2}" height="{row_h}" fill="rgb({shade},{shade},255)"/>"#,
                    MARGIN + 52.0 + b as f64 * cell_w
                );
            }
            y += row_h + 2.0;
        }
        y += 6.0;
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}">ADC {:.1e} to {:.1e} mm2/s</text>"#,
        MARGIN + 52.0,
        y + 14.0,
        model.binning.adc_min,
        model.binning.adc_max
    );
    out.push_str("</svg>\n");
    out
}
