//! Static line charts of a trajectory: one panel for the correlations and, when
//! recorded, one for the eigenvalues of MMᵀ.

use std::fmt::Write as _;

use stl_core::sgd::Trajectory;

const WIDTH: f64 = 720.0;
const PANEL_HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

struct Series {
    label: String,
    values: Vec<f64>,
}

fn panel(out: &mut String, top: f64, title: &str, tau: &[f64], series: &[Series]) {
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.values.iter())
        .fold((0.0f64, 1.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let t_max = tau.last().copied().filter(|&t| t > 0.0).unwrap_or(1.0);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = PANEL_HEIGHT - 2.0 * MARGIN;
    let x = |t: f64| MARGIN + plot_w * t / t_max;
    let y = |v: f64| top + MARGIN + plot_h * (hi - v) / (hi - lo);

    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="14">{title}</text>"#, MARGIN, top + MARGIN - 12.0);
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#,
        top + MARGIN
    );
    for v in [lo, 0.0, hi] {
        let _ = writeln!(out, r#"<text x="4" y="{:.1}" font-size="10">{v:.2}</text>"#, y(v) + 3.0);
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10">τ = {t_max:.3}</text>"#, WIDTH - MARGIN - 60.0, top + PANEL_HEIGHT - MARGIN + 14.0);
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut points = String::new();
        for (t, v) in tau.iter().zip(&s.values) {
            let _ = write!(points, "{:.2},{:.2} ", x(*t), y(*v));
        }
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, points.trim_end());
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="{color}">{}</text>"#,
            WIDTH - MARGIN + 4.0,
            top + MARGIN + 12.0 * (k as f64 + 1.0),
            s.label
        );
    }
}

pub fn render(traj: &Trajectory) -> String {
    let r = traj.corr.first().map_or(0, |m| m.r());
    let corr: Vec<Series> = (0..r)
        .flat_map(|i| (0..r).map(move |j| (i, j)))
        .map(|(i, j)| Series { label: format!("m{}{}", i + 1, j + 1), values: traj.corr.iter().map(|m| m.matrix()[(i, j)]).collect() })
        .collect();
    let eigs: Option<Vec<Series>> = traj.eigs.as_ref().map(|e| {
        (0..r).map(|i| Series { label: format!("θ{}", i + 1), values: e.iter().map(|row| row[i]).collect() }).collect()
    });
    let height = PANEL_HEIGHT * if eigs.is_some() { 2.0 } else { 1.0 };
    let mut out = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="sans-serif">"#);
    out.push('\n');
    panel(&mut out, 0.0, "correlations", &traj.tau, &corr);
    if let Some(e) = &eigs {
        panel(&mut out, PANEL_HEIGHT, "eigenvalues of MMᵀ", &traj.tau, e);
    }
    out.push_str("</svg>\n");
    out
}
