//! Minimal SVG line and box plots.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 90.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>", W / 2.0, esc(title));
    s
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        Axis {
            lo: lo - pad,
            hi: hi + pad,
            log,
        }
    }

    /// Fraction along the axis, or `None` for values that cannot be drawn.
    fn frac(&self, v: f64) -> Option<f64> {
        let v = if self.log {
            (v > 0.0).then(|| v.log10())?
        } else {
            v
        };
        v.is_finite().then(|| (v - self.lo) / (self.hi - self.lo))
    }

    fn label(&self, f: f64) -> String {
        let v = self.lo + f * (self.hi - self.lo);
        if self.log {
            format!("{:.2e}", 10f64.powf(v))
        } else {
            format!("{v:.3}")
        }
    }
}

fn px(f: f64) -> f64 {
    LEFT + f * (W - LEFT - RIGHT)
}

fn py(f: f64) -> f64 {
    H - BOTTOM - f * (H - TOP - BOTTOM)
}

fn frame(s: &mut String, y: &Axis, ylabel: &str) {
    let _ = writeln!(
        s,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            LEFT - 4.0,
            py(f) + 4.0,
            y.label(f)
        );
    }
    let _ = writeln!(
        s,
        "<text transform=\"translate(14,{:.1}) rotate(-90)\" text-anchor=\"middle\">{}</text>",
        (TOP + H - BOTTOM) / 2.0,
        esc(ylabel)
    );
}

/// Lines over a shared x axis; `log_y` plots positive values on a log scale.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], log_y: bool) -> String {
    let mut s = header(title);
    let x = Axis::fit(series.iter().flat_map(|c| c.points.iter().map(|p| p.0)), false);
    let y = Axis::fit(series.iter().flat_map(|c| c.points.iter().map(|p| p.1)), log_y);
    frame(&mut s, &y, ylabel);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", px(f), H - BOTTOM + 14.0, x.label(f));
    }
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", px(0.5), H - BOTTOM + 30.0, esc(xlabel));
    for (k, c) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .filter_map(|&(a, b)| Some(format!("{:.2},{:.2}", px(x.frac(a)?), py(y.frac(b)?))))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let ly = H - BOTTOM + 46.0 + 12.0 * (k / 3) as f64;
        let lx = LEFT + 190.0 * (k % 3) as f64;
        let _ = writeln!(s, "<rect x=\"{lx}\" y=\"{:.1}\" width=\"10\" height=\"3\" fill=\"{color}\"/>", ly - 4.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly:.1}\">{}</text>", lx + 14.0, esc(&c.label));
    }
    s.push_str("</svg>\n");
    s
}

/// Quartiles by linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> Option<[f64; 5]> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let r = p * (v.len() - 1) as f64;
        let (i, f) = (r.floor() as usize, r.fract());
        if i + 1 < v.len() {
            v[i] + f * (v[i + 1] - v[i])
        } else {
            v[i]
        }
    };
    Some([v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]])
}

/// One box (min, quartiles, max) per group.
pub fn box_plot(title: &str, ylabel: &str, groups: &[(String, Vec<f64>)]) -> String {
    let mut s = header(title);
    let y = Axis::fit(groups.iter().flat_map(|g| g.1.iter().copied()), false);
    frame(&mut s, &y, ylabel);
    let n = groups.len().max(1) as f64;
    for (k, (label, values)) in groups.iter().enumerate() {
        let cx = px((k as f64 + 0.5) / n);
        let half = (0.3 * (W - LEFT - RIGHT) / n).min(30.0);
        let _ = writeln!(
            s,
            "<text transform=\"translate({cx:.1},{}) rotate(30)\">{}</text>",
            H - BOTTOM + 12.0,
            esc(label)
        );
        let Some(q) = quartiles(values) else { continue };
        let [lo, q1, med, q3, hi] = q.map(|v| py(y.frac(v).unwrap_or(0.0)));
        let _ = writeln!(s, "<line x1=\"{cx:.1}\" y1=\"{lo:.1}\" x2=\"{cx:.1}\" y2=\"{hi:.1}\" stroke=\"black\"/>");
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{q3:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#9ecae1\" stroke=\"black\"/>",
            cx - half,
            2.0 * half,
            (q1 - q3).max(0.5)
        );
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{med:.1}\" x2=\"{:.1}\" y2=\"{med:.1}\" stroke=\"black\" stroke-width=\"2\"/>",
            cx - half,
            cx + half
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_of_small_sets() {
        assert_eq!(quartiles(&[3.0, 1.0, 2.0, 4.0, 5.0]), Some([1.0, 2.0, 3.0, 4.0, 5.0]));
        assert_eq!(quartiles(&[1.0, 2.0]).unwrap()[2], 1.5);
        assert_eq!(quartiles(&[f64::NAN]), None);
    }

    #[test]
    fn plots_are_well_formed() {
        let s = line_plot(
            "loss <a&b>",
            "iteration",
            "loss",
            &[Series {
                label: "r".into(),
                points: vec![(0.0, 1.0), (1.0, 0.1), (2.0, 0.0)],
            }],
            true,
        );
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("&lt;a&amp;b&gt;"));
        assert_eq!(s.matches("<polyline").count(), 1);
        let b = box_plot("d", "y", &[("a".into(), vec![1.0, 2.0]), ("b".into(), vec![])]);
        assert_eq!(b.matches("stroke-width=\"2\"").count(), 1);
    }
}
