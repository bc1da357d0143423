//! Minimal standalone SVG charts.

use std::fmt::Write as _;

use super::ap::PrCurve;
use super::stats::Summary;

const W: f64 = 420.0;
const H: f64 = 320.0;
const M: f64 = 40.0;

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>
<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{x_label}</text>
<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{y_label}</text>
"#,
        W / 2.0,
        escape(title),
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 8.0,
        H / 2.0,
        H / 2.0,
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v}</text>"#, px(v), H - M + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v}</text>"#, M - 4.0, py(v) + 4.0);
    }
    s
}

fn px(v: f64) -> f64 {
    M + v * (W - 2.0 * M)
}

fn py(v: f64) -> f64 {
    H - M - v * (H - 2.0 * M)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Precision over recall, stepping at each operating point.
pub fn pr_curve(name: &str, curve: &PrCurve) -> String {
    let mut s = frame(&format!("{name} (AP {:.4})", curve.ap), "recall", "precision");
    let mut pts = vec![format!("{},{}", px(0.0), py(1.0))];
    for p in &curve.points {
        pts.push(format!("{:.2},{:.2}", px(p.recall), py(p.precision)));
    }
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
    s.push_str("</svg>\n");
    s
}

/// One box per population; an optional dashed threshold line.
pub fn box_plot(rows: &[(String, Summary)], threshold: Option<f64>) -> String {
    let mut s = frame("detection probability", "class", "probability");
    let n = rows.len().max(1) as f64;
    let slot = (W - 2.0 * M) / n;
    for (i, (name, q)) in rows.iter().enumerate() {
        let cx = M + slot * (i as f64 + 0.5);
        let half = (slot * 0.3).min(20.0);
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>
<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="lightsteelblue" stroke="black"/>
<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>
<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            py(q.min),
            py(q.max),
            cx - half,
            py(q.q3),
            2.0 * half,
            (py(q.q1) - py(q.q3)).max(0.5),
            cx - half,
            py(q.median),
            cx + half,
            py(q.median),
            M + 12.0,
            escape(name),
        );
    }
    if let Some(t) = threshold {
        let _ = writeln!(
            s,
            r#"<line x1="{M}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="crimson" stroke-dasharray="4 3"/>"#,
            W - M,
            y = py(t)
        );
    }
    s.push_str("</svg>\n");
    s
}
