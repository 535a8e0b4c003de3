//! Text tables, CSV exports and SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use evseg_core::evaluator::{AblationReport, MetricsReport};
use evseg_core::trainer::LogRecord;
use plotters::prelude::*;
use plotters::style::Palette as _;

use crate::error::{Error, Result};
use crate::formats::Palette;

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

pub fn metrics_table(report: &MetricsReport, palette: Option<&Palette>) -> String {
    let name = |k: usize| {
        palette
            .and_then(|p| p.classes.get(k))
            .map_or_else(|| format!("class {k}"), |c| c.name.clone())
    };
    let width = (0..report.per_class_iou.len()).map(|k| name(k).len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>10}", "class", "IoU (%)", "gt pixels");
    for (k, iou) in report.per_class_iou.iter().enumerate() {
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>10}", name(k), pct(*iou), report.pixel_counts[k]);
    }
    let _ = writeln!(out, "{:<width$}  {:>8}", "mIoU", pct(Some(report.miou)));
    out
}

pub fn ablation_table(report: &AblationReport) -> String {
    let width = report.rows.iter().map(|r| r.cell.label.len()).max().unwrap_or(0).max(4);
    let mut out = String::new();
    let _ = writeln!(out, "split {:016x}", report.split_hash);
    let _ = writeln!(out, "{:<width$}  {:<18}  {:>8}  per seed", "cell", "mode", "median");
    for row in &report.rows {
        let mode = row.cell.mode.map_or("-", |m| m.as_str());
        let seeds: Vec<String> = row
            .runs
            .iter()
            .map(|r| match (&r.report, &r.error) {
                (Some(m), _) => format!("{}:{}", r.seed, pct(Some(m.miou))),
                (None, _) => format!("{}:failed", r.seed),
            })
            .collect();
        let _ = writeln!(
            out,
            "{:<width$}  {:<18}  {:>8}  {}",
            row.cell.label,
            mode,
            pct(row.median_miou),
            seeds.join(" ")
        );
    }
    for row in &report.rows {
        for r in &row.runs {
            if let Some(e) = &r.error {
                let _ = writeln!(out, "error in `{}` seed {}: {e}", row.cell.label, r.seed);
            }
        }
    }
    out
}

/// One row per cell and seed: label, mode, seed, mIoU, per-class IoU, error.
pub fn write_ablation_csv<W: std::io::Write>(report: &AblationReport, out: W) -> csv::Result<()> {
    let classes = report
        .rows
        .iter()
        .flat_map(|r| &r.runs)
        .filter_map(|r| r.report.as_ref())
        .map(|m| m.per_class_iou.len())
        .max()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["cell".to_string(), "mode".into(), "seed".into(), "miou".into()];
    header.extend((0..classes).map(|k| format!("iou_{k}")));
    header.push("error".into());
    w.write_record(&header)?;
    for row in &report.rows {
        for run in &row.runs {
            let mut rec = vec![
                row.cell.label.clone(),
                row.cell.mode.map_or("", |m| m.as_str()).to_string(),
                run.seed.to_string(),
            ];
            match &run.report {
                Some(m) => {
                    rec.push(m.miou.to_string());
                    rec.extend((0..classes).map(|k| m.per_class_iou.get(k).copied().flatten().map_or(String::new(), |v| v.to_string())));
                }
                None => rec.extend(std::iter::repeat_n(String::new(), classes + 1)),
            }
            rec.push(run.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub type Series = (String, Vec<(f64, f64)>);

/// Line plot with markers, one colour per series.
pub fn plot_series(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let points = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(Error::format(path, "nothing to plot"));
    }
    let pad = |lo: f64, hi: f64| {
        let d = ((hi - lo) * 0.05).max(1e-3);
        (lo - d)..(hi + d)
    };
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(pad(x0, x1), pad(y0, y1))?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
            if pts.len() <= 50 {
                chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
            }
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::format(path, e))
}

pub fn plot_losses(path: &Path, log: &[LogRecord]) -> Result<()> {
    let pick = |f: fn(&LogRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        log.iter().filter_map(|r| f(r).map(|v| (r.step as f64, v))).collect()
    };
    let series: Vec<Series> = [
        ("total", pick(|r| Some(r.total))),
        ("weak", pick(|r| Some(r.l_weak))),
        ("dual", pick(|r| r.l_dual)),
        ("proto (fwd)", pick(|r| r.l_proto_f)),
        ("proto (bwd)", pick(|r| r.l_proto_b)),
        ("distill", pick(|r| r.l_distill)),
    ]
    .into_iter()
    .filter(|(_, p)| !p.is_empty())
    .map(|(n, p)| (n.to_string(), p))
    .collect();
    plot_series(path, "Training losses", "step", "loss", &series)
}

/// Median mIoU against a per-cell knob, one series per mode.
fn sweep_series(report: &AblationReport, knob: impl Fn(&evseg_core::evaluator::GridCell) -> Option<f64>) -> Vec<Series> {
    let mut series: Vec<Series> = Vec::new();
    for row in &report.rows {
        let (Some(x), Some(m)) = (knob(&row.cell), row.median_miou) else {
            continue;
        };
        let name = row.cell.mode.map_or("base", |m| m.as_str()).to_string();
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push((x, 100.0 * m)),
            None => series.push((name, vec![(x, 100.0 * m)])),
        }
    }
    for (_, pts) in &mut series {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    series
}

/// Writes `miou_vs_threshold.svg` and `miou_vs_corruption.svg` when the grid
/// has cells setting those knobs; returns the files written.
pub fn plot_ablation(dir: &Path, report: &AblationReport) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let threshold = sweep_series(report, |c| c.threshold);
    if !threshold.is_empty() {
        let p = dir.join("miou_vs_threshold.svg");
        plot_series(&p, "mIoU vs reliability threshold", "threshold", "median mIoU (%)", &threshold)?;
        written.push(p);
    }
    let corruption = sweep_series(report, |c| c.swap_p);
    if !corruption.is_empty() {
        let p = dir.join("miou_vs_corruption.svg");
        plot_series(&p, "mIoU vs label swap probability", "swap probability", "median mIoU (%)", &corruption)?;
        written.push(p);
    }
    Ok(written)
}
