//! Minimal SVG renderers for the vector-field grid and V-surface contours.

use std::fmt::Write as _;

const SIZE: f64 = 600.0;
const PAD: f64 = 40.0;

/// Affine map from data coordinates to the drawing area, `y` pointing up.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        };
        Frame { x: span(&mut xs.clone()), y: span(&mut ys.clone()) }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (SIZE - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        SIZE - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (SIZE - 2.0 * PAD)
    }

    fn open(&self, title: &str, s: &mut String) {
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<title>{title}</title>"#);
        let (l, r, t, b) = (PAD, SIZE - PAD, PAD, SIZE - PAD);
        let _ = writeln!(s, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t);
        let _ = writeln!(s, r#"<text x="{l}" y="{}" >{:.4}</text>"#, b + 14.0, self.x.0);
        let _ = writeln!(s, r#"<text x="{r}" y="{}" text-anchor="end">{:.4}</text>"#, b + 14.0, self.x.1);
        let _ = writeln!(s, r#"<text x="{}" y="{b}" text-anchor="end">{:.4}</text>"#, l - 4.0, self.y.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.4}</text>"#, l - 4.0, t + 8.0, self.y.1);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">x1</text>"#, SIZE / 2.0, SIZE - 8.0);
        let _ = writeln!(s, r#"<text x="12" y="{}" text-anchor="middle">x2</text>"#, SIZE / 2.0);
    }
}

/// Blue-to-red ramp for `u` in `[0, 1]`.
fn ramp(u: f64) -> String {
    let u = u.clamp(0.0, 1.0);
    let r = (255.0 * u).round() as u8;
    let b = (255.0 * (1.0 - u)).round() as u8;
    format!("rgb({r},64,{b})")
}

/// Unit arrows on each grid point, coloured by `log10 |f|`, with an optional
/// solution path overlaid.
pub fn vector_field(grid: &[(f64, f64, f64, f64)], nx: usize, path: &[(f64, f64)]) -> String {
    let frame = Frame::new(grid.iter().map(|g| g.0), grid.iter().map(|g| g.1));
    let mut s = String::new();
    frame.open("vector field", &mut s);
    let cell = (SIZE - 2.0 * PAD) / nx.max(2) as f64 * 0.8;
    let logs: Vec<f64> = grid.iter().map(|g| g.2.hypot(g.3).max(1e-300).log10()).collect();
    let (lo, hi) = logs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    for (g, l) in grid.iter().zip(&logs) {
        let norm = g.2.hypot(g.3);
        let (x, y) = (frame.px(g.0), frame.py(g.1));
        if norm == 0.0 {
            let _ = writeln!(s, r#"<circle cx="{x:.3}" cy="{y:.3}" r="2" fill="black"/>"#);
            continue;
        }
        let (dx, dy) = (g.2 / norm * cell, -g.3 / norm * cell);
        let u = if hi > lo { (l - lo) / (hi - lo) } else { 0.5 };
        let (ex, ey) = (x + dx, y + dy);
        // Arrow head as two short strokes back from the tip.
        let back = |sgn: f64| {
            let (c, sn) = (0.5f64.cos(), sgn * 0.5f64.sin());
            (ex - 0.3 * (dx * c - dy * sn), ey - 0.3 * (dx * sn + dy * c))
        };
        let (h1, h2) = (back(1.0), back(-1.0));
        let _ = writeln!(
            s,
            r#"<path d="M{x:.3},{y:.3} L{ex:.3},{ey:.3} M{:.3},{:.3} L{ex:.3},{ey:.3} L{:.3},{:.3}" stroke="{}" fill="none"/>"#,
            h1.0,
            h1.1,
            h2.0,
            h2.1,
            ramp(u)
        );
    }
    if path.len() > 1 {
        let pts: Vec<String> = path
            .iter()
            .filter(|p| p.0 >= frame.x.0 && p.0 <= frame.x.1 && p.1 >= frame.y.0 && p.1 <= frame.y.1)
            .map(|p| format!("{:.3},{:.3}", frame.px(p.0), frame.py(p.1)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="black" stroke-width="2"/>"#, pts.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

/// Heat map of `log10 V` on a regular grid plus marching-squares contours at
/// `levels` evenly spaced values. `z` is row-major with rows along `ys`.
pub fn contours(xs: &[f64], ys: &[f64], z: &[f64], levels: usize) -> String {
    let frame = Frame::new(xs.iter().copied(), ys.iter().copied());
    let mut s = String::new();
    frame.open("log10 V", &mut s);
    let nx = xs.len();
    let (lo, hi) = z.iter().filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let u = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let half = |a: &[f64], i: usize| {
        let l = if i > 0 { (a[i] - a[i - 1]) / 2.0 } else { 0.0 };
        let r = if i + 1 < a.len() { (a[i + 1] - a[i]) / 2.0 } else { 0.0 };
        (a[i] - l, a[i] + r)
    };
    for (j, _) in ys.iter().enumerate() {
        for (i, _) in xs.iter().enumerate() {
            let (x0, x1) = half(xs, i);
            let (y0, y1) = half(ys, j);
            let (px, py) = (frame.px(x0), frame.py(y1));
            let (w, h) = (frame.px(x1) - px, frame.py(y0) - py);
            let _ = writeln!(
                s,
                r#"<rect x="{px:.3}" y="{py:.3}" width="{w:.3}" height="{h:.3}" fill="{}" fill-opacity="0.6"/>"#,
                ramp(u(z[j * nx + i]))
            );
        }
    }
    for k in 1..=levels {
        let level = lo + (hi - lo) * k as f64 / (levels + 1) as f64;
        let mut d = String::new();
        for j in 0..ys.len().saturating_sub(1) {
            for i in 0..nx.saturating_sub(1) {
                let corner = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
                let vals = corner.map(|(a, b)| z[b * nx + a]);
                let mut cuts = Vec::with_capacity(4);
                for e in 0..4 {
                    let (p, q) = (corner[e], corner[(e + 1) % 4]);
                    let (vp, vq) = (vals[e], vals[(e + 1) % 4]);
                    if (vp < level) != (vq < level) {
                        let t = (level - vp) / (vq - vp);
                        let x = xs[p.0] + t * (xs[q.0] - xs[p.0]);
                        let y = ys[p.1] + t * (ys[q.1] - ys[p.1]);
                        cuts.push((frame.px(x), frame.py(y)));
                    }
                }
                for pair in cuts.chunks_exact(2) {
                    let _ = write!(d, "M{:.3},{:.3} L{:.3},{:.3} ", pair[0].0, pair[0].1, pair[1].0, pair[1].1);
                }
            }
        }
        if !d.is_empty() {
            let _ = writeln!(s, r#"<path d="{}" stroke="black" stroke-width="0.8" fill="none"><title>{level:.6}</title></path>"#, d.trim_end());
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contours_cross_a_linear_ramp() {
        let xs: Vec<f64> = (0..5).map(f64::from).collect();
        let z: Vec<f64> = (0..25).map(|k| (k % 5) as f64).collect();
        let svg = contours(&xs, &xs, &z, 3);
        assert_eq!(svg.matches("<path").count(), 3);
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn field_draws_one_mark_per_point() {
        let grid = [(0.0, 0.0, 1.0, 0.0), (1.0, 0.0, 0.0, 0.0), (0.0, 1.0, 0.0, 2.0), (1.0, 1.0, -1.0, -1.0)];
        let svg = vector_field(&grid, 2, &[]);
        assert_eq!(svg.matches("<path").count() + svg.matches("<circle").count(), 4);
    }
}
