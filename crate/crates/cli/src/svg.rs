//! Static box plot of benchmark errors on a log axis.

use std::fmt::Write;

use filematch::simulate::{quantile_sorted, BenchmarkResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

struct Box5 {
    name: String,
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
}

pub fn box_plot(result: &BenchmarkResult) -> String {
    let boxes: Vec<Box5> = result
        .methods
        .iter()
        .filter_map(|&m| {
            let mut v: Vec<f64> = result
                .records
                .iter()
                .filter(|r| r.method == m && r.mse_yz.is_finite() && r.mse_yz > 0.0)
                .map(|r| r.mse_yz)
                .collect();
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            Some(Box5 {
                name: m.name().to_string(),
                min: v[0],
                q1: quantile_sorted(&v, 0.25),
                median: quantile_sorted(&v, 0.5),
                q3: quantile_sorted(&v, 0.75),
                max: v[v.len() - 1],
            })
        })
        .collect();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle">mean squared error of the cross block</text>"#,
        WIDTH / 2.0
    );
    if boxes.is_empty() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no successful runs</text>"#, WIDTH / 2.0, HEIGHT / 2.0);
        s.push_str("</svg>\n");
        return s;
    }

    let lo = boxes.iter().map(|b| b.min).fold(f64::INFINITY, f64::min).log10().floor();
    let mut hi = boxes.iter().map(|b| b.max).fold(f64::NEG_INFINITY, f64::max).log10().ceil();
    if hi <= lo {
        hi = lo + 1.0;
    }
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y = |v: f64| TOP + plot_h * (hi - v.log10()) / (hi - lo);

    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        HEIGHT - BOTTOM
    );
    for e in (lo as i32)..=(hi as i32) {
        let yy = y(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{yy:.1}" x2="{}" y2="{yy:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">1e{e}</text>"##,
            LEFT,
            WIDTH - RIGHT,
            LEFT - 6.0,
            yy + 4.0
        );
    }

    let slot = (WIDTH - LEFT - RIGHT) / boxes.len() as f64;
    let half = (slot * 0.3).min(40.0);
    for (i, b) in boxes.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(b.max),
            y(b.min)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            y(b.q3),
            2.0 * half,
            (y(b.q1) - y(b.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            y(b.median),
            cx + half,
            y(b.median)
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 20.0,
            b.name
        );
    }
    s.push_str("</svg>\n");
    s
}
