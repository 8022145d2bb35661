//! PSNR-over-rate chart of evaluation rows, one curve per complexity level.
//!
//! The chart carries no text; the companion CSV holds the exact values.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Result};
use bncodec::eval::EvalRow;
use bncodec::Task;
use plotters::prelude::*;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct PlotPoint {
    pub task: Task,
    pub level: usize,
    pub quality: usize,
    pub images: usize,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
    pub macs_kpp: f64,
}

/// Per-image means for every (task, level, quality).
pub fn average(rows: &[EvalRow]) -> Vec<PlotPoint> {
    let mut groups: BTreeMap<(usize, usize, usize), Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.task.index(), r.level, r.quality)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = |f: fn(&EvalRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            PlotPoint {
                task: g[0].task,
                level: g[0].level,
                quality: g[0].quality,
                images: g.len(),
                bpp: mean(|r| r.bpp),
                psnr: mean(|r| r.psnr),
                msssim: mean(|r| r.msssim),
                macs_kpp: mean(|r| r.macs_kpp),
            }
        })
        .collect()
}

pub fn draw(rows: &[EvalRow], out: &Path) -> Result<Vec<PlotPoint>> {
    let points = average(rows);
    if points.is_empty() {
        bail!("no rows to plot");
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &points {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.psnr);
        y1 = y1.max(p.psnr);
    }
    let pad = |a: f64, b: f64| ((b - a) * 0.05).max(1e-3);
    let (px, py) = (pad(x0, x1), pad(y0, y1));
    let root = BitMapBackend::new(out, (800, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root).margin(20).build_cartesian_2d((x0 - px)..(x1 + px), (y0 - py)..(y1 + py))?;
    let mut by_level: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for p in &points {
        by_level.entry((p.task.index(), p.level)).or_default().push((p.bpp, p.psnr));
    }
    for ((task, level), mut curve) in by_level {
        curve.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = Palette99::pick(level).to_rgba();
        let style = if task == 0 { color.stroke_width(2) } else { color.stroke_width(1) };
        chart.draw_series(LineSeries::new(curve.clone(), style))?;
        chart.draw_series(curve.into_iter().map(|c| Circle::new(c, 3, color.filled())))?;
    }
    root.present()?;
    Ok(points)
}
