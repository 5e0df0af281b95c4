//! Accuracy-vs-session line plots.

use std::path::Path;

use anyhow::{anyhow, bail, Result};
use plotters::prelude::*;

/// One labelled curve; `accuracy[l]` is the accuracy after session `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub accuracy: Vec<f64>,
}

impl Curve {
    /// `(session, accuracy in percent)` pairs as drawn.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.accuracy
            .iter()
            .enumerate()
            .map(|(l, a)| (l as f64, a * 100.0))
            .collect()
    }
}

/// Writes an SVG with one line per curve. Accuracies are drawn in percent.
pub fn plot_curves(curves: &[Curve], out: &Path) -> Result<()> {
    if curves.is_empty() {
        bail!("nothing to plot");
    }
    if let Some(c) = curves.iter().find(|c| c.accuracy.is_empty()) {
        bail!("curve {:?} has no sessions", c.label);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let sessions = curves.iter().map(|c| c.accuracy.len()).max().unwrap_or(1);
    let err = |e: &dyn std::fmt::Display| anyhow!("plotting {}: {e}", out.display());

    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Accuracy by session", ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(-0.25f64..(sessions as f64 - 0.75).max(0.25), 0f64..100f64)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("session")
        .y_desc("accuracy (%)")
        .x_labels(sessions.min(20))
        .x_label_formatter(&|x| format!("{}", x.round() as i64))
        .draw()
        .map_err(|e| err(&e))?;
    for (i, c) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let points = c.points();
        chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(c.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
