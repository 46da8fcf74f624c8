//! Static SVG chart of hand and tip trajectories, one panel per axis.

use std::fmt::Write;

use teleop_core::metrics::AlignedSample;

const WIDTH: f64 = 900.0;
const PANEL_H: f64 = 220.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const GAP: f64 = 40.0;

type Series = (Vec<f64>, Vec<f64>);

fn axis(rows: &[AlignedSample], i: usize) -> Series {
    rows.iter()
        .map(|r| {
            let (h, t) = (r.hand(), r.tip());
            (h[i], t[i])
        })
        .unzip()
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(0.5);
    (lo - pad, hi + pad)
}

fn polyline(out: &mut String, points: impl Iterator<Item = (f64, f64)>, style: &str) {
    let mut d = String::new();
    for (x, y) in points {
        let _ = write!(d, "{x:.2},{y:.2} ");
    }
    let _ = writeln!(
        out,
        r#"<polyline fill="none" {style} points="{}"/>"#,
        d.trim_end()
    );
}

pub fn render(rows: &[AlignedSample]) -> String {
    let height = MARGIN_T + 3.0 * (PANEL_H + GAP);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let (t0, t1) = range(rows.iter().map(|r| r.t_ms));
    let tx = |t: f64| MARGIN_L + (t - t0) / (t1 - t0) * plot_w;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN_L}" y="20" font-size="14">hand (blue) vs camera tip (orange), mm over ms</text>"#
    );
    for (i, name) in ["x", "y", "z"].iter().enumerate() {
        let top = MARGIN_T + i as f64 * (PANEL_H + GAP);
        let (hand, tip) = axis(rows, i);
        let (lo, hi) = range(hand.iter().chain(&tip).copied());
        let ty = |v: f64| top + PANEL_H - (v - lo) / (hi - lo) * PANEL_H;
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN_L}" y="{top}" width="{plot_w}" height="{PANEL_H}" fill="none" stroke="#888"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="10" y="{:.1}">{name} (mm)</text>"#,
            top + PANEL_H / 2.0
        );
        for (v, y) in [(hi, top + 10.0), (lo, top + PANEL_H)] {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{y:.1}" text-anchor="end" font-size="10">{v:.1}</text>"#,
                MARGIN_L - 4.0
            );
        }
        let times = rows.iter().map(|r| r.t_ms);
        polyline(
            &mut s,
            times.clone().zip(hand).map(|(t, v)| (tx(t), ty(v))),
            r##"stroke="#1f77b4" stroke-width="1.5""##,
        );
        polyline(
            &mut s,
            times.zip(tip).map(|(t, v)| (tx(t), ty(v))),
            r##"stroke="#ff7f0e" stroke-width="1.5" stroke-dasharray="4 2""##,
        );
    }
    let bottom = MARGIN_T + 3.0 * PANEL_H + 2.0 * GAP + 16.0;
    for (t, anchor) in [(t0, "start"), (t1, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{bottom:.1}" text-anchor="{anchor}" font-size="10">{t:.0} ms</text>"#,
            tx(t)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_series_still_renders() {
        let svg = render(&[]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn one_polyline_pair_per_axis() {
        let rows: Vec<_> = (0..10)
            .map(|i| AlignedSample {
                t_ms: i as f64 * 10.0,
                hand_x: i as f64,
                hand_y: 0.0,
                hand_z: -(i as f64),
                tip_x: i as f64 + 0.1,
                tip_y: 0.0,
                tip_z: -(i as f64),
            })
            .collect();
        let svg = render(&rows);
        assert_eq!(svg.matches("<polyline").count(), 6);
        assert!(!svg.contains("NaN"));
    }
}
