//! Plain-text SVG plots of sweep curves.
//!
//! Output depends only on the curves and the manifest, so repeated runs give
//! identical bytes.

use std::fmt::Write;

use weightscope::metrics::{BarrierReport, RegimeVerdict};
use weightscope::SweepCurve;

const WIDTH: f64 = 640.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 36.0;
const GAP: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series<'a> {
    pub label: String,
    pub curve: &'a SweepCurve,
    pub barrier: BarrierReport,
    pub verdict: RegimeVerdict,
}

struct Panel {
    top: f64,
    lo: f64,
    hi: f64,
}

impl Panel {
    fn new(top: f64, values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !(hi > lo) {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        Self {
            top,
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn x(alpha: f64) -> f64 {
        MARGIN_L + alpha * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        self.top + PANEL_H * (self.hi - v) / (self.hi - self.lo)
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, panel: &Panel, ylabel: &str) {
    let right = WIDTH - MARGIN_R;
    let bottom = panel.top + PANEL_H;
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN_L:.1}" y="{:.1}" width="{:.1}" height="{PANEL_H:.1}" fill="none" stroke="#444"/>"##,
        panel.top,
        right - MARGIN_L
    );
    for k in 0..=4 {
        let a = k as f64 / 4.0;
        let x = Panel::x(a);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{bottom:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/><text x="{x:.1}" y="{:.1}" font-size="11" text-anchor="middle">{a:.2}</text>"##,
            bottom + 4.0,
            bottom + 16.0
        );
        let v = panel.lo + (panel.hi - panel.lo) * k as f64 / 4.0;
        let y = panel.y(v);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{MARGIN_L:.1}" y2="{y:.1}" stroke="#444"/><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.3}</text>"##,
            MARGIN_L - 4.0,
            MARGIN_L - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="14" y="{:.1}" font-size="12" transform="rotate(-90 14 {:.1})" text-anchor="middle">{ylabel}</text>"##,
        panel.top + PANEL_H / 2.0,
        panel.top + PANEL_H / 2.0
    );
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">α (1 = theta0)</text>"##,
        (MARGIN_L + right) / 2.0,
        bottom + 32.0
    );
}

fn polyline(out: &mut String, panel: &Panel, alphas: &[f64], values: &[f64], color: &str) {
    let points: Vec<String> = alphas
        .iter()
        .zip(values)
        .map(|(&a, &v)| format!("{:.2},{:.2}", Panel::x(a), panel.y(v)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
        points.join(" ")
    );
}

/// Two stacked panels (loss, accuracy against α) with the loss-barrier depth
/// and the best-accuracy α marked for each series.
pub fn render(title: &str, series: &[Series<'_>], manifest_json: &str) -> String {
    let loss = Panel::new(MARGIN_T, series.iter().flat_map(|s| s.curve.loss.iter().copied()));
    let acc = Panel::new(
        MARGIN_T + PANEL_H + GAP,
        series.iter().flat_map(|s| s.curve.acc.iter().copied()),
    );
    let height = MARGIN_T + 2.0 * PANEL_H + GAP + 48.0;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" font-family="sans-serif">"#
    );
    // XML comments may not contain "--"; the \u002d escape is the same JSON.
    let _ = writeln!(out, "<!-- manifest: {} -->", manifest_json.replace("--", "-\\u002d"));
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#fff"/>"##);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        escape(title)
    );
    axes(&mut out, &loss, "loss");
    axes(&mut out, &acc, "accuracy");

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let alphas = s.curve.alphas();
        polyline(&mut out, &loss, alphas, &s.curve.loss, color);
        polyline(&mut out, &acc, alphas, &s.curve.acc, color);

        // depth: from L(theta0) up to the loss maximum, at its α
        let (l0, _) = s.curve.theta0_end();
        let xb = Panel::x(s.barrier.arg_sup_alpha);
        let top = l0 + s.barrier.depth;
        let _ = writeln!(
            out,
            r#"<line x1="{xb:.2}" y1="{:.2}" x2="{xb:.2}" y2="{:.2}" stroke="{color}" stroke-dasharray="4 3"/><text x="{:.2}" y="{:.2}" font-size="10" fill="{color}">depth {:.4}</text>"#,
            loss.y(l0),
            loss.y(top),
            xb + 3.0,
            loss.y(top) - 3.0,
            s.barrier.depth
        );
        let xa = Panel::x(s.verdict.alpha_star);
        let best = s.curve.acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            out,
            r#"<circle cx="{xa:.2}" cy="{:.2}" r="3.5" fill="{color}"/><text x="{:.2}" y="{:.2}" font-size="10" fill="{color}">α★ {:.3}</text>"#,
            acc.y(best),
            xa + 4.0,
            acc.y(best) - 5.0,
            s.verdict.alpha_star
        );

        let ly = MARGIN_T + 14.0 + 44.0 * k as f64;
        let lx = WIDTH - MARGIN_R + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text><text x="{lx:.1}" y="{:.1}" font-size="10">{} gain {:.4}</text><text x="{lx:.1}" y="{:.1}" font-size="10">instability {:.4}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            escape(&s.label),
            ly + 18.0,
            s.verdict.regime,
            s.verdict.max_gain,
            ly + 30.0,
            s.barrier.instability
        );
    }
    out.push_str("</svg>\n");
    out
}
