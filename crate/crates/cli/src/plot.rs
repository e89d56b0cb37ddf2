use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use stormmeta::skillmetrics::parse_report;
use stormmeta::trainloops::MetricsRecord;

use crate::{io_err, CliError, PlotArgs};

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// A run is named after the directory holding its file, or the file stem
/// when that directory is anonymous.
fn run_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
}

fn draw_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("plotting failed: {e}"))
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Validation MAE series per log: the first mode only, or all of them.
pub fn curves(logs: &[PathBuf], all_modes: bool) -> Result<Vec<Series>, CliError> {
    let mut out = Vec::new();
    for path in logs {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let records = MetricsRecord::parse_log(&text)?;
        let mut modes: Vec<String> = Vec::new();
        for r in &records {
            if !modes.contains(&r.mode) {
                modes.push(r.mode.clone());
            }
        }
        if !all_modes {
            modes.truncate(1);
        }
        let run = run_name(path);
        for mode in modes {
            let points = records.iter().filter(|r| r.mode == mode && r.split == "val").map(|r| (r.epoch as f64, r.mae)).collect();
            let name = if all_modes { format!("{run} {mode}") } else { run.clone() };
            out.push(Series { name, points });
        }
    }
    Ok(out)
}

pub fn draw_curves(series: &[Series], path: &Path) -> Result<(), CliError> {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x1, mut y0, mut y1) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.1).max(1e-3);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("validation MAE", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(0f64..x1 + 0.5, (y0 - pad)..(y1 + pad))
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("epoch").y_desc("MAE").draw().map_err(draw_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.clone(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Grouped bars of every defined skill score in each report.
pub fn draw_bars(reports: &[(String, Vec<(String, Option<f64>)>)], path: &Path) -> Result<(), CliError> {
    let mut metrics: Vec<String> = Vec::new();
    for (_, values) in reports {
        for (k, _) in values {
            let skill = ["CSI", "POD", "SUCR"].iter().any(|p| k.starts_with(p));
            if skill && !metrics.contains(k) {
                metrics.push(k.clone());
            }
        }
    }
    let n = reports.len().max(1) as f64;
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("skill scores", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(0f64..metrics.len().max(1) as f64, 0f64..1.05)
        .map_err(draw_err)?;
    let names = metrics.clone();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(metrics.len().max(1) * 2 + 1)
        .x_label_formatter(&move |x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 { names.get(i).cloned().unwrap_or_default() } else { String::new() }
        })
        .draw()
        .map_err(draw_err)?;
    for (r, (name, values)) in reports.iter().enumerate() {
        let color = PALETTE[r % PALETTE.len()];
        let bars: Vec<Rectangle<(f64, f64)>> = metrics
            .iter()
            .enumerate()
            .filter_map(|(m, key)| {
                let v = values.iter().find(|(k, _)| k == key).and_then(|(_, v)| *v)?;
                let x0 = m as f64 + 0.1 + 0.8 * r as f64 / n;
                Some(Rectangle::new([(x0, 0.0), (x0 + 0.8 / n, v)], color.filled()))
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(draw_err)?
            .label(name.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(draw_err)?;
    root.present().map_err(draw_err)
}

pub fn plot(args: &PlotArgs) -> Result<(), CliError> {
    if args.logs.is_empty() && args.reports.is_empty() {
        return Err(CliError::Usage("nothing to plot: pass --logs and/or --reports".into()));
    }
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    if !args.logs.is_empty() {
        let series = curves(&args.logs, args.all_modes)?;
        draw_curves(&series, &args.out.join("mae_curves.svg"))?;
    }
    if !args.reports.is_empty() {
        let mut reports = Vec::new();
        for path in &args.reports {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let name = format!("{} {}", run_name(path), path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default());
            reports.push((name, parse_report(&text)?));
        }
        draw_bars(&reports, &args.out.join("skill_bars.svg"))?;
    }
    Ok(())
}
