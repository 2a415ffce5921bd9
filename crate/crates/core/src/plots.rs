//! SVG charts for run reports: loss curves, accuracy histograms and per-point deltas.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{KtError, Result};
use crate::eval::Histogram;

const SIZE: (u32, u32) = (720, 440);
const PALETTE: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
];

fn draw_err<E: std::fmt::Debug>(path: &Path) -> impl Fn(E) -> KtError + '_ {
    move |e| KtError::Invalid(format!("plotting {}: {e:?}", path.display()))
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// One named polyline.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart; with `log_y` the y axis shows log10 of the values.
pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> Result<()> {
    let err = draw_err(path);
    let tf = |y: f64| if log_y { y.max(1e-30).log10() } else { y };
    let xs = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = range(series.iter().flat_map(|s| s.points.iter().map(|p| tf(p.1))));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(64)
        .build_cartesian_2d(xs.0..xs.1, ys.0..ys.1)
        .map_err(&err)?;
    let y_desc = if log_y { format!("log10 {y_label}") } else { y_label.to_string() };
    chart.configure_mesh().x_desc(x_label).y_desc(y_desc).draw().map_err(&err)?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().map(|&(x, y)| (x, tf(y))), color.stroke_width(2)))
            .map_err(&err)?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(&err)?;
    }
    root.present().map_err(&err)
}

/// Bar chart of category values (accuracy histograms, per-percent deltas).
pub fn bar_chart(path: &Path, title: &str, y_label: &str, labels: &[String], values: &[f64]) -> Result<()> {
    let err = draw_err(path);
    let (lo, hi) = range(values.iter().copied().chain([0.0]));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let n = labels.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(48)
        .y_label_area_size(64)
        .build_cartesian_2d(0f64..n as f64, lo..hi)
        .map_err(&err)?;
    let label_of = |x: &f64| {
        let i = x.floor() as usize;
        if (x - x.floor() - 0.5).abs() < 1e-6 {
            labels.get(i).cloned().unwrap_or_default()
        } else {
            String::new()
        }
    };
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(2 * n + 1)
        .x_label_formatter(&label_of)
        .y_desc(y_label)
        .draw()
        .map_err(&err)?;
    chart
        .draw_series(values.iter().enumerate().map(|(i, &v)| {
            let x = i as f64;
            Rectangle::new([(x + 0.1, 0.0), (x + 0.9, v)], PALETTE[0].filled())
        }))
        .map_err(&err)?;
    root.present().map_err(&err)
}

pub fn histogram_chart(path: &Path, title: &str, hist: &Histogram) -> Result<()> {
    let values: Vec<f64> = hist.counts.iter().map(|&c| c as f64).collect();
    let labels: Vec<String> = hist.labels.iter().map(|l| format!("{l}%")).collect();
    bar_chart(path, title, "hosts", &labels, &values)
}
