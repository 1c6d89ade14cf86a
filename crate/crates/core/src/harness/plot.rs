//! Static SVG line plots of a result table, one per metric.

use std::path::Path;

use plotters::prelude::*;

use super::sweep::{Metric, ResultTable};
use crate::error::{Error, Result};

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

/// Mean versus swept value, one line per (scheme, CSI mode).
pub fn write_svg_plot(table: &ResultTable, metric: Metric, path: &Path) -> Result<()> {
    let rows: Vec<_> = table.rows.iter().filter(|r| r.metric == metric).collect();
    if rows.is_empty() {
        return Err(Error::InvalidConfig(format!("no rows for metric {metric}")));
    }
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in &rows {
        let label = format!("{} ({})", r.scheme, r.csi);
        match series.iter_mut().find(|(l, _)| *l == label) {
            Some((_, pts)) => pts.push((r.value, r.mean)),
            None => series.push((label, vec![(r.value, r.mean)])),
        }
    }
    let (mut x0, mut x1) = bounds(rows.iter().map(|r| r.value));
    let (mut y0, mut y1) = bounds(rows.iter().map(|r| r.mean));
    if x0 == x1 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    let pad = ((y1 - y0) * 0.08).max(1e-3);
    (y0, y1) = (y0 - pad, y1 + pad);

    let plot_err = |e: String| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let param = rows[0].param;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{metric} vs {param}"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(param.to_string())
        .y_desc(metric.to_string())
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    for (i, (label, pts)) in series.into_iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

fn bounds(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}
