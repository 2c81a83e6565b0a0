//! SVG figures for training curves, evaluation reports and channel reports.

use std::path::{Path, PathBuf};

use c3r::mcd::trainer::StepMetrics;
use c3r::stats::StatsReport;
use plotters::prelude::*;

use crate::commands::EvalReport;
use crate::error::{CliError, CliResult};

const SIZE: (u32, u32) = (720, 440);
const PALETTE: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
];

fn draw_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("drawing {}: {e}", path.display()))
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Named series of (x, y) points drawn as lines.
fn lines(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> CliResult<PathBuf> {
    let err = draw_err(path);
    let (x0, x1) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(&err)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(&err)?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(&err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(path.to_path_buf())
}

/// One bar per (label, value).
fn bars(path: &Path, title: &str, y_label: &str, values: &[(String, f64)]) -> CliResult<PathBuf> {
    let err = draw_err(path);
    let (lo, hi) = range(values.iter().map(|v| v.1).chain([0.0]));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let n = values.len();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d((0..n).into_segmented(), lo.min(0.0)..hi)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc(y_label)
        .x_labels(n)
        .x_label_formatter(&|x| match x {
            SegmentValue::CenterOf(i) => values.get(*i).map_or(String::new(), |v| v.0.clone()),
            _ => String::new(),
        })
        .draw()
        .map_err(&err)?;
    chart
        .draw_series(values.iter().enumerate().map(|(i, (_, v))| {
            let mut bar = Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), *v)],
                PALETTE[i % PALETTE.len()].filled(),
            );
            bar.set_margin(0, 0, 6, 6);
            bar
        }))
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(path.to_path_buf())
}

pub fn training_curves(steps: &[StepMetrics], path: &Path) -> CliResult<PathBuf> {
    let pick = |f: fn(&StepMetrics) -> f64| steps.iter().map(|m| (m.step as f64, f(m))).collect::<Vec<_>>();
    let mut series = vec![
        ("total".to_string(), pick(|m| m.total)),
        ("cls".to_string(), pick(|m| m.cls)),
        ("patch".to_string(), pick(|m| m.patch)),
    ];
    if steps.iter().any(|m| m.antibody != 0.0) {
        series.push(("antibody".to_string(), pick(|m| m.antibody)));
    }
    lines(path, "training loss", "step", "loss", &series)
}

pub fn parity_bars(report: &StatsReport, path: &Path) -> CliResult<PathBuf> {
    let values: Vec<(String, f64)> = report.ranked().iter().map(|c| (c.channel.clone(), c.parity)).collect();
    bars(path, &format!("channel parity (k = {})", report.k), "parity", &values)
}

/// Sorted values against their quantile, one line per series.
fn quantile_curve(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len().max(2) as f64 - 1.0;
    v.into_iter().enumerate().map(|(i, x)| (i as f64 / n, x)).collect()
}

pub fn eval_figures(report: &EvalReport, dir: &Path, stem: &str) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    if let Some(rows) = &report.sweep {
        let values: Vec<(String, f64)> = rows
            .iter()
            .map(|r| (r.dropped.as_deref().map_or("all".into(), |d| format!("-{d}")), r.map))
            .collect();
        out.push(bars(&dir.join(format!("{stem}_sweep.svg")), "probe mAP with one context channel removed", "mAP", &values)?);
    }
    if !report.diagnostic.is_empty() {
        let mut series = Vec::new();
        for d in &report.diagnostic {
            let c = d.curves.drop_count;
            series.push((format!("intermediate, drop {c}"), quantile_curve(&d.curves.intermediate)));
            series.push((format!("final, drop {c}"), quantile_curve(&d.curves.final_cls)));
        }
        out.push(lines(
            &dir.join(format!("{stem}_cosine.svg")),
            "cosine similarity, full vs reduced context",
            "quantile",
            "cosine",
            &series,
        )?);
    }
    Ok(out)
}
