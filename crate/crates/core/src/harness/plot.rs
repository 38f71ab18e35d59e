//! Minimal deterministic SVG line charts for sweep results.

use std::fmt::Write as _;

use super::report::{fmt_sig6, SweepResult};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    /// Reference curves are dashed and carry no markers.
    reference: bool,
}

struct Chart {
    x_label: &'static str,
    y_label: &'static str,
    log2_x: bool,
    series: Vec<Series>,
}

fn group<K: PartialEq + Copy, R>(rows: &[R], key: impl Fn(&R) -> K) -> Vec<(K, Vec<&R>)> {
    let mut groups: Vec<(K, Vec<&R>)> = Vec::new();
    for r in rows {
        let k = key(r);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    groups
}

fn chart(result: &SweepResult) -> Chart {
    let mut series = Vec::new();
    match result {
        SweepResult::Prop2(rows) => {
            for (m, g) in group(rows, |r| r.mean_w.to_bits()) {
                let m = f64::from_bits(m);
                series.push(Series {
                    label: format!("Δ pre, E[W]={}", fmt_sig6(m)),
                    points: g.iter().map(|r| (r.width as f64, r.delta_pre.mean)).collect(),
                    reference: false,
                });
                series.push(Series {
                    label: format!("Δ post, E[W]={}", fmt_sig6(m)),
                    points: g.iter().map(|r| (r.width as f64, r.delta_post.mean)).collect(),
                    reference: false,
                });
            }
            Chart {
                x_label: "width n",
                y_label: "Δ = Var_test / Var_train",
                log2_x: true,
                series,
            }
        }
        SweepResult::Prop34(rows) => {
            let groups = group(rows, |r| r.p.to_bits());
            for (p, g) in &groups {
                series.push(Series {
                    label: format!("Δ(x+f), p={}", fmt_sig6(f64::from_bits(*p))),
                    points: g.iter().map(|r| (r.var_x0, r.delta_res.mean)).collect(),
                    reference: false,
                });
            }
            for (p, g) in &groups {
                series.push(Series {
                    label: format!("Δ(f), p={}", fmt_sig6(f64::from_bits(*p))),
                    points: g.iter().map(|r| (r.var_x0, r.delta_nonres.mean)).collect(),
                    reference: true,
                });
            }
            Chart {
                x_label: "Var[x_0]",
                y_label: "Δ = Var_test / Var_train",
                log2_x: false,
                series,
            }
        }
        SweepResult::Head(rows) => {
            let key = |r: &&super::report::HeadRow| (r.p.to_bits(), r.input_mean.to_bits(), r.input_variance.to_bits());
            for ((p, m, v), g) in group(rows, |r| key(&r)) {
                let tag = format!(
                    "p={}, x~({}, {})",
                    fmt_sig6(f64::from_bits(p)),
                    fmt_sig6(f64::from_bits(m)),
                    fmt_sig6(f64::from_bits(v))
                );
                series.push(Series {
                    label: format!("H4 {tag}"),
                    points: g.iter().map(|r| (r.spatial_size as f64, r.var_h4.mean)).collect(),
                    reference: false,
                });
                series.push(Series {
                    label: format!("H5 {tag}"),
                    points: g.iter().map(|r| (r.spatial_size as f64, r.var_h5.mean)).collect(),
                    reference: false,
                });
            }
            Chart {
                x_label: "spatial size s",
                y_label: "train-phase output variance",
                log2_x: false,
                series,
            }
        }
    }
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * hi.abs().max(1.0) {
        let pad = 0.5 * hi.abs().max(1.0) * 0.1;
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub(crate) fn render_svg(result: &SweepResult) -> String {
    let c = chart(result);
    let tx = |x: f64| if c.log2_x { x.log2() } else { x };
    let (x0, x1) = span(c.series.iter().flat_map(|s| s.points.iter().map(|p| tx(p.0))));
    let (y0, y1) = span(c.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (tx(x) - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<rect class="frame" x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();

    let mut xs: Vec<f64> = c.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() > 10 {
        let step = xs.len().div_ceil(10);
        xs = xs.into_iter().step_by(step).collect();
    }
    for x in xs {
        let xp = px(x);
        writeln!(
            s,
            r#"<line x1="{xp:.2}" y1="{b:.2}" x2="{xp:.2}" y2="{t:.2}" stroke="black"/><text x="{xp:.2}" y="{l:.2}" text-anchor="middle">{}</text>"#,
            fmt_sig6(x),
            b = TOP + ph,
            t = TOP + ph + 5.0,
            l = TOP + ph + 20.0,
        )
        .unwrap();
    }
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let yp = py(y);
        writeln!(
            s,
            r#"<line x1="{a:.2}" y1="{yp:.2}" x2="{LEFT}" y2="{yp:.2}" stroke="black"/><text x="{l:.2}" y="{t:.2}" text-anchor="end">{}</text>"#,
            fmt_sig6(y),
            a = LEFT - 5.0,
            l = LEFT - 8.0,
            t = yp + 4.0,
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text class="x-label" x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0,
        escape(c.x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text class="y-label" x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(c.y_label)
    )
    .unwrap();

    for (i, series) in c.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = series
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let (class, dash) = if series.reference {
            ("reference", r#" stroke-dasharray="5,4""#)
        } else {
            ("series", "")
        };
        writeln!(
            s,
            r#"<polyline class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            pts.join(" ")
        )
        .unwrap();
        if !series.reference {
            for &(x, y) in &series.points {
                writeln!(
                    s,
                    r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    px(x),
                    py(y)
                )
                .unwrap();
            }
        }
        let ly = TOP + 10.0 + 16.0 * i as f64;
        let lx = LEFT + pw + 10.0;
        writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1.5"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            escape(&series.label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
