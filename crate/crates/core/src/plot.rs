//! Deterministic SVG figures: identical inputs give identical bytes.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::experiments::{FrontierRecord, LayerAutointerp, Measure, Panel};
use crate::metrics::{MetricsReport, RocPoint};

const W: f64 = 640.0;
const H: f64 = 440.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 55.0); // left, right, top, bottom
const PALETTE: [&str; 8] = [
    "#1f77b4", "#2ca02c", "#ff7f0e", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn axes(svg: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let _ = writeln!(
        svg,
        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="dimgray"/>"#,
        f.x0, f.y0, f.w, f.h
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.xr.0 + t * (f.xr.1 - f.xr.0);
        let yv = f.yr.0 + t * (f.yr.1 - f.yr.0);
        let (xp, yp) = (f.px(xv), f.py(yv));
        let _ = writeln!(
            svg,
            r#"<text x="{xp:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
            f.y0 + f.h + 14.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"#,
            f.x0 - 5.0,
            yp + 3.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
        f.x0 + f.w / 2.0,
        f.y0 + f.h + 34.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        f.x0 - 50.0,
        f.y0 + f.h / 2.0,
        f.x0 - 50.0,
        f.y0 + f.h / 2.0,
        escape(y_label)
    );
}

fn header(title: &str, w: f64, h: f64) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="18" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    svg
}

/// One polyline (with point markers) per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if pts.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let (xlo, xhi) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (ylo, yhi) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let f = Frame {
        x0: MARGIN.0,
        y0: MARGIN.2,
        w: W - MARGIN.0 - MARGIN.1 - 130.0,
        h: H - MARGIN.2 - MARGIN.3,
        xr: padded(xlo, xhi),
        yr: padded(ylo, yhi),
    };
    let mut svg = header(title, W, H);
    axes(&mut svg, &f, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        for c in &coords {
            let (x, y) = c.split_once(',').expect("formatted pair");
            let _ = writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
        }
        let ly = f.y0 + 12.0 + 16.0 * i as f64;
        let lx = f.x0 + f.w + 12.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{color}"/><text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            ly - 9.0,
            lx + 14.0,
            ly,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Explained variance against sparsity, one frontier per condition.
pub fn pareto_svg(records: &[FrontierRecord], measure: Measure) -> Result<String> {
    let series: Vec<Series> = records
        .iter()
        .filter(|r| r.measure == measure && !r.frontier.is_empty())
        .map(|r| Series {
            label: r.condition.name().to_string(),
            points: r.frontier.iter().map(|p| (p.sparsity, p.explained_variance)).collect(),
        })
        .collect();
    line_chart(
        &format!("Pareto frontiers ({})", measure.name()),
        measure.name(),
        "explained variance",
        &series,
    )
}

/// TPR against FPR, one curve per labelled ROC.
pub fn roc_svg(curves: &[(String, Vec<RocPoint>)]) -> Result<String> {
    let series: Vec<Series> = curves
        .iter()
        .map(|(label, pts)| Series {
            label: label.clone(),
            points: pts.iter().map(|p| (p.fpr, p.tpr)).collect(),
        })
        .collect();
    line_chart("Fuzzing ROC", "FPR", "TPR", &series)
}

/// Pooled ROC curve of every scored (variant, layer).
pub fn autointerp_roc_svg(runs: &[LayerAutointerp]) -> Result<String> {
    let curves: Vec<(String, Vec<RocPoint>)> = runs
        .iter()
        .filter_map(|r| r.report.pooled.as_ref().map(|p| (r.label.clone(), p.points.clone())))
        .collect();
    roc_svg(&curves)
}

fn metric_value(r: &MetricsReport, metric: &str) -> Result<Option<f64>> {
    Ok(match metric {
        "explained_variance" => Some(r.explained_variance),
        "cosine_sim" => Some(r.cosine_sim),
        "mean_l0" => Some(r.mean_l0),
        "mean_l1" => Some(r.mean_l1),
        "mean_l1_over_sqrt_l2" => Some(r.mean_l1_over_sqrt_l2),
        "mean_hoyer" => Some(r.mean_hoyer),
        "val_mse" => r.val_mse,
        "mmcs" => r.mmcs,
        "ce_loss_score" => r.ce_loss_score,
        "token_entropy" => r.token_entropy,
        "auroc" => r.auroc,
        other => return Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
    })
}

/// A metric against layer, one line per variant (mean over seeds).
pub fn metric_by_layer_svg(reports: &[MetricsReport], metric: &str) -> Result<String> {
    let mut by_variant: std::collections::BTreeMap<String, std::collections::BTreeMap<usize, Vec<f64>>> =
        Default::default();
    for r in reports {
        let (Some(v), Some(l)) = (&r.variant, r.layer) else {
            continue;
        };
        if let Some(x) = metric_value(r, metric)? {
            by_variant.entry(v.clone()).or_default().entry(l).or_default().push(x);
        }
    }
    let series: Vec<Series> = by_variant
        .into_iter()
        .map(|(label, layers)| Series {
            label,
            points: layers
                .into_iter()
                .map(|(l, xs)| (l as f64, xs.iter().sum::<f64>() / xs.len() as f64))
                .collect(),
        })
        .collect();
    line_chart(&format!("{metric} by layer"), "layer", metric, &series)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// 2-D view of a panel: identity for two columns, isometric projection for
/// three (and the first three of more).
fn planar(rows: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let c30 = (std::f64::consts::PI / 6.0).cos();
    rows.iter()
        .map(|r| match r.len() {
            0 => (0.0, 0.0),
            1 => (r[0], 0.0),
            2 => (r[0], r[1]),
            _ => ((r[0] - r[1]) * c30, r[2] - (r[0] + r[1]) * 0.5),
        })
        .collect()
}

/// Grid of scatter panels (two per row). Axis ranges span the 1st to 99th
/// percentile so heavy tails do not collapse the bulk; points outside are
/// left out.
pub fn scatter_panels_svg(title: &str, panels: &[Panel]) -> Result<String> {
    if panels.is_empty() || panels.iter().all(|p| p.rows.is_empty()) {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let cols = 2;
    let rows_n = panels.len().div_ceil(cols);
    let (pw, ph) = (320.0, 300.0);
    let (w, h) = (pw * cols as f64, 30.0 + ph * rows_n as f64);
    let mut svg = header(title, w, h);
    for (i, panel) in panels.iter().enumerate() {
        let pts = planar(&panel.rows);
        let range = |sel: fn(&(f64, f64)) -> f64| {
            let mut v: Vec<f64> = pts.iter().map(sel).filter(|x| x.is_finite()).collect();
            v.sort_by(f64::total_cmp);
            if v.is_empty() {
                (0.0, 1.0)
            } else {
                padded(quantile(&v, 0.01), quantile(&v, 0.99))
            }
        };
        let f = Frame {
            x0: (i % cols) as f64 * pw + 55.0,
            y0: 30.0 + (i / cols) as f64 * ph + 20.0,
            w: pw - 75.0,
            h: ph - 70.0,
            xr: range(|p| p.0),
            yr: range(|p| p.1),
        };
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
            f.x0 + f.w / 2.0,
            f.y0 - 6.0,
            escape(&panel.name)
        );
        axes(&mut svg, &f, "", "");
        let color = PALETTE[i % PALETTE.len()];
        for &(x, y) in &pts {
            if x < f.xr.0 || x > f.xr.1 || y < f.yr.0 || y > f.yr.1 {
                continue;
            }
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1" fill="{color}" fill-opacity="0.4"/>"#,
                f.px(x),
                f.py(y)
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
