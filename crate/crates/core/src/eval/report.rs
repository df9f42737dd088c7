//! Text tables, line-delimited records and SVG plots for evaluation results.

use std::fmt::Write as _;

use serde::Serialize;

use super::metrics::Interval;
use super::protocol::{LocalizationReport, MatrixReport, SpawnRow, TrajectoryTrace, TransferReport};

/// Printed at the top of every report.
pub const METRIC_CAVEAT: &str =
    "# note: pixel-space mse/psnr/ssim stand in for learned perceptual metrics; absolute values are not comparable to perceptual scores.";
pub const MATRIX_CAVEAT: &str =
    "# note: the static top-down map dominates scores for top-down targets, so those cells look better than the motion they capture.";
pub const SPAWN_CAVEAT: &str =
    "# note: top-down context cannot determine the sky, so the sky-agnostic column scores against the best-matching sky palette.";

fn ci(i: &Interval) -> String {
    format!("[{:.4}, {:.4}]", i.lo, i.hi)
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("report records serialize") + "\n")
        .collect()
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.3}")
    } else if x.is_nan() {
        "n/a".into()
    } else {
        "inf".into()
    }
}

pub fn localization_table(r: &LocalizationReport) -> String {
    let mut s = String::new();
    writeln!(s, "{METRIC_CAVEAT}").unwrap();
    writeln!(
        s,
        "# top-down localization at +{} frames, {} px frames; success thresholds {} px and {} px",
        r.horizon, r.size, r.threshold_a_px, r.threshold_b_px
    )
    .unwrap();
    writeln!(
        s,
        "{:<24} {:<14} {:>7} {:>7} {:>12} {:>12} {:>20} {:>9} {:>9} {:>10}",
        "predictor", "pair", "n", "invalid", "median_px", "median_all", "median_ci", "succ@a", "succ@b", "orient_deg"
    )
    .unwrap();
    for row in &r.rows {
        writeln!(
            s,
            "{:<24} {:<14} {:>7} {:>7} {:>12} {:>12} {:>20} {:>8.1}% {:>8.1}% {:>10}",
            row.predictor,
            format!("{}->bev", row.input_view),
            row.samples,
            row.invalid,
            num(row.median_valid_px),
            num(row.median_all_px),
            format!("[{}, {}]", num(row.median_ci.lo), num(row.median_ci.hi)),
            100.0 * row.success_a,
            100.0 * row.success_b,
            num(row.median_orientation_error_deg),
        )
        .unwrap();
    }
    s
}

pub fn trajectory_table(t: &TrajectoryTrace) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "# trajectory, episode {}, predictor {}: mean {} px, median {} px, max {} px, {} failed detections",
        t.episode,
        t.predictor,
        num(t.mean_px),
        num(t.median_px),
        num(t.max_px),
        t.invalid
    )
    .unwrap();
    writeln!(s, "{:>7} {:>9} {:>9} {:>9} {:>9} {:>9}", "time_s", "true_u", "true_v", "pred_u", "pred_v", "error_px").unwrap();
    for st in &t.steps {
        let (pu, pv) = st.predicted_px.map_or(("-".into(), "-".into()), |(u, v)| (num(u), num(v)));
        writeln!(
            s,
            "{:>7.1} {:>9.3} {:>9.3} {:>9} {:>9} {:>9}",
            st.time_s,
            st.truth_px.0,
            st.truth_px.1,
            pu,
            pv,
            st.error_px.map_or("-".into(), num)
        )
        .unwrap();
    }
    s
}

pub fn spawn_table(rows: &[SpawnRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{METRIC_CAVEAT}").unwrap();
    writeln!(s, "{SPAWN_CAVEAT}").unwrap();
    writeln!(
        s,
        "{:<24} {:>5} {:>10} {:>10} {:>10} {:>12} {:>20}",
        "predictor", "n", "mse", "psnr", "ssim", "ssim_agnostic", "ssim_agnostic_ci"
    )
    .unwrap();
    for r in rows {
        writeln!(
            s,
            "{:<24} {:>5} {:>10.5} {:>10.3} {:>10.4} {:>12.4} {:>20}",
            r.predictor,
            r.exact_sky.samples,
            r.exact_sky.mse.mean,
            r.exact_sky.psnr.mean,
            r.exact_sky.ssim.mean,
            r.sky_agnostic.ssim.mean,
            ci(&r.sky_agnostic.ssim.ci)
        )
        .unwrap();
    }
    s
}

pub fn matrix_table(m: &MatrixReport) -> String {
    let mut s = String::new();
    writeln!(s, "{METRIC_CAVEAT}").unwrap();
    writeln!(s, "{MATRIX_CAVEAT}").unwrap();
    writeln!(s, "# view-pair matrix at +{} frames, predictor {}; cells: mse (95% ci), ssim", m.horizon, m.predictor).unwrap();
    write!(s, "{:<16}", "input \\ output").unwrap();
    for v in &m.views {
        write!(s, " {:>34}", v.name()).unwrap();
    }
    writeln!(s).unwrap();
    for &iv in &m.views {
        write!(s, "{:<16}", iv.name()).unwrap();
        for &ov in &m.views {
            let cell = m.cell(iv, ov).expect("matrix is complete");
            let c = &cell.metrics;
            write!(s, " {:>34}", format!("{:.4} {} {:.3}", c.mse.mean, ci(&c.mse.ci), c.ssim.mean)).unwrap();
        }
        writeln!(s).unwrap();
    }
    s
}

pub fn transfer_table(t: &TransferReport) -> String {
    let mut s = String::new();
    writeln!(s, "{METRIC_CAVEAT}").unwrap();
    writeln!(s, "# ego->ego quality at +{} frames against ego->ego training exposure", t.horizon).unwrap();
    writeln!(
        s,
        "{:<20} {:<12} {:>8} {:>10} {:>10} {:>7} {:>10} {:>20} {:>8}",
        "label", "scheme", "step", "samples", "ego_ego", "share", "mse", "mse_ci", "ssim"
    )
    .unwrap();
    for r in &t.rows {
        writeln!(
            s,
            "{:<20} {:<12} {:>8} {:>10} {:>10} {:>7.3} {:>10.5} {:>20} {:>8.4}",
            r.label,
            r.scheme,
            r.step,
            r.total_samples,
            r.ego_ego_exposure,
            r.ego_ego_share,
            r.metrics.mse.mean,
            ci(&r.metrics.mse.ci),
            r.metrics.ssim.mean
        )
        .unwrap();
    }
    s
}

/// A named point series with optional vertical error bars.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub errors: Vec<Option<Interval>>,
    pub lines: bool,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal SVG scatter/line chart.
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for (i, &(x, y)) in s.points.iter().enumerate() {
            xs.push(x);
            ys.push(y);
            if let Some(Some(e)) = s.errors.get(i) {
                ys.extend([e.lo, e.hi]);
            }
        }
    }
    let finite = |v: &[f64]| v.iter().copied().filter(|x| x.is_finite()).collect::<Vec<_>>();
    let (xs, ys) = (finite(&xs), finite(&ys));
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    )
    .unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, px(xv), h - pad + 16.0, tick(xv)).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, pad - 6.0, py(yv) + 4.0, tick(yv)).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 16.0, escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    )
    .unwrap();
    for (si, ser) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<(f64, f64)> = ser.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        if ser.lines && pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
            writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" ")).unwrap();
        }
        for (i, &(x, y)) in ser.points.iter().enumerate() {
            if !(x.is_finite() && y.is_finite()) {
                continue;
            }
            if let Some(Some(e)) = ser.errors.get(i) {
                if e.lo.is_finite() && e.hi.is_finite() {
                    writeln!(
                        s,
                        r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="{color}"/>"#,
                        px(x),
                        py(e.lo),
                        py(e.hi)
                    )
                    .unwrap();
                }
            }
            writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#, px(x), py(y)).unwrap();
        }
        let ly = pad + 16.0 * si as f64;
        writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, w - pad - 150.0, ly - 9.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, w - pad - 135.0, escape(&ser.label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.4}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Ego→ego mse against exposure: single-view checkpoints as a curve, the
/// other schemes as points.
pub fn transfer_svg(t: &TransferReport) -> String {
    let mut by_scheme: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, r) in t.rows.iter().enumerate() {
        match by_scheme.iter_mut().find(|(s, _)| *s == r.scheme) {
            Some((_, v)) => v.push(i),
            None => by_scheme.push((r.scheme.clone(), vec![i])),
        }
    }
    let series: Vec<Series> = by_scheme
        .into_iter()
        .map(|(scheme, mut idx)| {
            idx.sort_by_key(|&i| t.rows[i].ego_ego_exposure);
            Series {
                lines: scheme == "single_view",
                points: idx
                    .iter()
                    .map(|&i| (t.rows[i].ego_ego_exposure as f64, t.rows[i].metrics.mse.mean))
                    .collect(),
                errors: idx.iter().map(|&i| Some(t.rows[i].metrics.mse.ci)).collect(),
                label: scheme,
            }
        })
        .collect();
    svg_plot("ego->ego mse vs exposure", "ego->ego training samples", "mse", &series)
}

/// True and imagined marker paths in image coordinates.
pub fn trajectory_svg(t: &TrajectoryTrace) -> String {
    let truth = Series {
        label: "ground truth".into(),
        points: t.steps.iter().map(|s| (s.truth_px.0, -s.truth_px.1)).collect(),
        errors: Vec::new(),
        lines: true,
    };
    let imagined = Series {
        label: "imagined".into(),
        points: t
            .steps
            .iter()
            .map(|s| s.predicted_px.map_or((f64::NAN, f64::NAN), |(u, v)| (u, -v)))
            .collect(),
        errors: Vec::new(),
        lines: true,
    };
    svg_plot(
        &format!("episode {} marker trajectory", t.episode),
        "u (px)",
        "-v (px)",
        &[truth, imagined],
    )
}

/// Per-step localization error over time.
pub fn trajectory_error_svg(t: &TrajectoryTrace) -> String {
    let ser = Series {
        label: t.predictor.clone(),
        points: t
            .steps
            .iter()
            .map(|s| (s.time_s, s.error_px.unwrap_or(f64::NAN)))
            .collect(),
        errors: Vec::new(),
        lines: true,
    };
    svg_plot("per-step localization error", "time (s)", "error (px)", &[ser])
}
