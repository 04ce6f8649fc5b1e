//! Minimal SVG line charts: forecasts, Murphy curves and density overlays.

use std::fmt::Write;

const PALETTE: [&str; 10] =
    ["#000000", "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#7f7f7f"];

/// One polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

/// A single axes panel.
#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e5).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn draw_panel(out: &mut String, p: &Panel, ox: f64, oy: f64, w: f64, h: f64) {
    let (ml, mr, mt, mb) = (60.0, 120.0, 30.0, 45.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let (x0, x1) = bounds(p.series.iter().flat_map(|s| s.xs.iter().copied()));
    let (y0, y1) = bounds(p.series.iter().flat_map(|s| s.ys.iter().copied()));
    let sx = |x: f64| ox + ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| oy + mt + ph - (y - y0) / (y1 - y0) * ph;
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="14" text-anchor="middle">{}</text>"#, ox + ml + pw / 2.0, oy + 18.0, esc(&p.title));
    let _ = writeln!(out, r#"<rect x="{:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="dimgray"/>"#, ox + ml, oy + mt);
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#, sx(fx), oy + mt + ph + 14.0, tick(fx));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#, ox + ml - 4.0, sy(fy) + 3.0, tick(fy));
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#, ox + ml + pw / 2.0, oy + h - 8.0, esc(&p.x_label));
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
        ox + 14.0,
        oy + mt + ph / 2.0,
        ox + 14.0,
        oy + mt + ph / 2.0,
        esc(&p.y_label)
    );
    if y0 < 0.0 && y1 > 0.0 {
        let _ = writeln!(out, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="darkgray" stroke-dasharray="4 3"/>"#, ox + ml, sy(0.0), ox + ml + pw, sy(0.0));
    }
    for (i, s) in p.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = String::new();
        for (x, y) in s.xs.iter().zip(&s.ys) {
            if x.is_finite() && y.is_finite() {
                let _ = write!(pts, "{:.2},{:.2} ", sx(*x), sy(*y));
            }
        }
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.3" points="{}"/>"#, pts.trim_end());
        let ly = oy + mt + 12.0 + 16.0 * i as f64;
        let lx = ox + ml + pw + 10.0;
        let _ = writeln!(out, r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#, lx + 22.0, ly + 4.0, esc(&s.label));
    }
}

/// Panels laid out in a grid with `cols` columns.
pub fn render(panels: &[Panel], cols: usize) -> String {
    let (w, h) = (560.0, 320.0);
    let cols = cols.max(1).min(panels.len().max(1));
    let rows = panels.len().div_ceil(cols).max(1);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif">"#,
        w * cols as f64,
        h * rows as f64
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut out, p, w * (i % cols) as f64, h * (i / cols) as f64, w, h);
    }
    out.push_str("</svg>\n");
    out
}

/// Silverman's rule-of-thumb bandwidth.
pub fn silverman_bandwidth(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 1.0;
    }
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (n - 1.0);
        let (i, f) = (h.floor() as usize, h - h.floor());
        s[i] + f * (s[(i + 1).min(s.len() - 1)] - s[i])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bw = 0.9 * spread * n.powf(-0.2);
    if bw > 0.0 {
        bw
    } else {
        1.0
    }
}

/// Gaussian kernel density estimate on `grid`.
pub fn kde(v: &[f64], grid: &[f64]) -> Vec<f64> {
    let h = silverman_bandwidth(v);
    let c = 1.0 / (v.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter().map(|g| c * v.iter().map(|x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum::<f64>()).collect()
}

/// One panel per model overlaying its forecast density on the actuals'.
pub fn density_panels(actuals: &[f64], models: &[(String, Vec<f64>)]) -> Vec<Panel> {
    let (lo, hi) = bounds(actuals.iter().chain(models.iter().flat_map(|m| m.1.iter())).copied());
    let grid: Vec<f64> = (0..200).map(|i| lo + (hi - lo) * i as f64 / 199.0).collect();
    let ya = kde(actuals, &grid);
    models
        .iter()
        .map(|(name, v)| Panel {
            title: name.clone(),
            x_label: "GHI (W/m²)".into(),
            y_label: "density".into(),
            series: vec![
                Series { label: "GHI".into(), xs: grid.clone(), ys: ya.clone() },
                Series { label: name.clone(), xs: grid.clone(), ys: kde(v, &grid) },
            ],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kde_integrates_to_one() {
        let v: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64).collect();
        let grid: Vec<f64> = (0..4001).map(|i| -100.0 + i as f64 * 0.075).collect();
        let d = kde(&v, &grid);
        let area: f64 = d.iter().sum::<f64>() * 0.075;
        assert!((area - 1.0).abs() < 1e-3, "{area}");
    }

    #[test]
    fn silverman_on_known_sample() {
        // sd = 1.5811, IQR/1.34 = 1.4925 for 1..=5, n^-0.2 = 0.72478.
        let bw = silverman_bandwidth(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!((bw - 0.9 * (2.0 / 1.34) * 5f64.powf(-0.2)).abs() < 1e-12);
    }

    #[test]
    fn render_is_well_formed() {
        let p = Panel {
            title: "a<b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series { label: "s".into(), xs: vec![0.0, 1.0], ys: vec![0.0, f64::NAN] }],
        };
        let s = render(&[p.clone(), p], 2);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        assert_eq!(s.matches("<polyline").count(), 2);
    }
}
