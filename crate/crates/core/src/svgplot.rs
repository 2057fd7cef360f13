//! Hand-rolled SVG emission for heatmaps, line plots and grouped bars.
//! Output is a pure function of the inputs (fixed float formatting, no
//! timestamps), so regenerated files are byte-identical.

use crate::analysis::{LayerContour, SimilarityMatrix};

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn f(v: f64) -> String {
    format!("{v:.2}")
}

/// Blue-to-yellow ramp over [0, 100].
fn heat_color(v: f64) -> String {
    let t = (v / 100.0).clamp(0.0, 1.0);
    let r = (40.0 + 215.0 * t) as u32;
    let g = (40.0 + 180.0 * t) as u32;
    let b = (140.0 * (1.0 - t) + 40.0) as u32;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Square heatmap with row/column labels and cell values.
pub fn heatmap_svg(m: &SimilarityMatrix, title: &str, provenance: &str) -> String {
    let n = m.n();
    let cell = 46.0;
    let margin_left = 150.0;
    let margin_top = 60.0;
    let width = margin_left + cell * n as f64 + 20.0;
    let height = margin_top + cell * n as f64 + 130.0;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         viewBox=\"0 0 {} {}\">\n",
        f(width),
        f(height),
        f(width),
        f(height)
    ));
    s.push_str(&format!("<!-- config_digest={} -->\n", esc(provenance)));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        f(margin_left),
        esc(title)
    ));
    for (i, row_label) in m.labels.iter().enumerate() {
        let y = margin_top + cell * i as f64 + cell / 2.0 + 4.0;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"11\">{}</text>\n",
            f(margin_left - 6.0),
            f(y),
            esc(row_label)
        ));
        for j in 0..n {
            let v = m.get(i, j);
            let x = margin_left + cell * j as f64;
            let y = margin_top + cell * i as f64;
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
                f(x),
                f(y),
                f(cell),
                f(cell),
                heat_color(v)
            ));
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
                 font-size=\"10\" fill=\"#111111\">{}</text>\n",
                f(x + cell / 2.0),
                f(y + cell / 2.0 + 3.0),
                format!("{v:.1}")
            ));
        }
    }
    for (j, col_label) in m.labels.iter().enumerate() {
        let x = margin_left + cell * j as f64 + cell / 2.0;
        let y = margin_top + cell * n as f64 + 10.0;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             transform=\"rotate(45 {} {})\">{}</text>\n",
            f(x),
            f(y),
            f(x),
            f(y),
            esc(col_label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Line plot of one or more layer contours.
pub fn contour_svg(series: &[(String, &LayerContour)], title: &str, provenance: &str) -> String {
    let width = 640.0;
    let height = 420.0;
    let ml = 70.0;
    let mr = 170.0;
    let mt = 50.0;
    let mb = 50.0;
    let pw = width - ml - mr;
    let ph = height - mt - mb;

    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut x_max = 1.0f64;
    for (_, c) in series {
        for &(l, v) in &c.points {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
            x_max = x_max.max(l as f64);
        }
    }
    if !y_min.is_finite() || y_min == y_max {
        y_min -= 1.0;
        y_max += 1.0;
    }
    let pad = (y_max - y_min) * 0.08;
    let (y_min, y_max) = (y_min - pad, y_max + pad);

    let sx = |l: f64| ml + pw * l / x_max;
    let sy = |v: f64| mt + ph * (1.0 - (v - y_min) / (y_max - y_min));

    const COLORS: [&str; 9] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
        "#7f7f7f", "#bcbd22",
    ];

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         viewBox=\"0 0 {} {}\">\n",
        f(width),
        f(height),
        f(width),
        f(height)
    ));
    s.push_str(&format!("<!-- config_digest={} -->\n", esc(provenance)));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        f(ml),
        esc(title)
    ));
    // axes
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
        f(ml),
        f(mt),
        f(ml),
        f(mt + ph)
    ));
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
        f(ml),
        f(mt + ph),
        f(ml + pw),
        f(mt + ph)
    ));
    // y ticks
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = sy(v);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ccc\"/>\n",
            f(ml),
            f(y),
            f(ml + pw),
            f(y)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"10\">{}</text>\n",
            f(ml - 6.0),
            f(y + 3.0),
            format!("{v:.3}")
        ));
    }
    // x ticks at integer layers
    for l in 0..=(x_max as usize) {
        let x = sx(l as f64);
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"10\">{l}</text>\n",
            f(x),
            f(mt + ph + 16.0)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"11\">layer</text>\n",
        f(ml + pw / 2.0),
        f(height - 14.0)
    ));
    for (si, (label, c)) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let pts: Vec<String> =
            c.points.iter().map(|&(l, v)| format!("{},{}", f(sx(l as f64)), f(sy(v)))).collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"/>\n",
            pts.join(" "),
            color
        ));
        for &(l, v) in &c.points {
            s.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"2.4\" fill=\"{}\"/>\n",
                f(sx(l as f64)),
                f(sy(v)),
                color
            ));
        }
        let ly = mt + 16.0 * si as f64;
        s.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
            f(ml + pw + 10.0),
            f(ly),
            color
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
            f(ml + pw + 24.0),
            f(ly + 9.0),
            esc(label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart: one group per label, one bar per series.
pub fn grouped_bars_svg(
    groups: &[String],
    series: &[(String, Vec<f64>)],
    title: &str,
    provenance: &str,
) -> String {
    let width = 760.0;
    let height = 420.0;
    let ml = 70.0;
    let mr = 150.0;
    let mt = 50.0;
    let mb = 120.0;
    let pw = width - ml - mr;
    let ph = height - mt - mb;

    let mut v_max = 1e-12f64;
    for (_, vals) in series {
        for &v in vals {
            v_max = v_max.max(v);
        }
    }
    let sy = |v: f64| mt + ph * (1.0 - (v / v_max).clamp(0.0, 1.0));
    const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         viewBox=\"0 0 {} {}\">\n",
        f(width),
        f(height),
        f(width),
        f(height)
    ));
    s.push_str(&format!("<!-- config_digest={} -->\n", esc(provenance)));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        f(ml),
        esc(title)
    ));
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
        f(ml),
        f(mt),
        f(ml),
        f(mt + ph)
    ));
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
        f(ml),
        f(mt + ph),
        f(ml + pw),
        f(mt + ph)
    ));
    for i in 0..=4 {
        let v = v_max * i as f64 / 4.0;
        let y = sy(v);
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"10\">{}</text>\n",
            f(ml - 6.0),
            f(y + 3.0),
            format!("{v:.2}")
        ));
    }
    let gw = pw / groups.len().max(1) as f64;
    let bw = (gw * 0.8) / series.len().max(1) as f64;
    for (gi, group) in groups.iter().enumerate() {
        let gx = ml + gw * gi as f64 + gw * 0.1;
        for (si, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(gi).copied().unwrap_or(0.0);
            let x = gx + bw * si as f64;
            let y = sy(v);
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
                f(x),
                f(y),
                f(bw * 0.92),
                f(mt + ph - y),
                COLORS[si % COLORS.len()]
            ));
        }
        let lx = gx + gw * 0.4;
        let ly = mt + ph + 12.0;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             transform=\"rotate(45 {} {})\">{}</text>\n",
            f(lx),
            f(ly),
            f(lx),
            f(ly),
            esc(group)
        ));
    }
    for (si, (label, _)) in series.iter().enumerate() {
        let ly = mt + 16.0 * si as f64;
        s.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
            f(ml + pw + 10.0),
            f(ly),
            COLORS[si % COLORS.len()]
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
            f(ml + pw + 24.0),
            f(ly + 9.0),
            esc(label)
        ));
    }
    s.push_str("</svg>\n");
    s
}
