//! Figures: accuracy curves, the alpha sweep and image grids.

use std::path::Path;

use image::{Rgb, RgbImage};
use plotters::prelude::*;

use super::data::Normalization;
use crate::bank::ImageBank;
use crate::distill::RoundMetrics;
use crate::error::{DfkdError, Result};

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

fn plot_err<E: std::fmt::Debug>(e: E) -> DfkdError {
    DfkdError::Plot(format!("{e:?}"))
}

/// Which accuracy column to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Curve {
    Student,
    Aux,
}

/// One line per named run: accuracy against round.
pub fn plot_accuracy_curves(
    runs: &[(String, Vec<RoundMetrics>)],
    curve: Curve,
    out: &Path,
) -> Result<()> {
    let max_round = runs
        .iter()
        .flat_map(|(_, m)| m.iter().map(|r| r.round))
        .max()
        .unwrap_or(1)
        .max(1);
    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let title = match curve {
        Curve::Student => "Student test accuracy",
        Curve::Aux => "Auxiliary accuracy",
    };
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..max_round as f64, 0f64..1f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("round")
        .y_desc("accuracy")
        .draw()
        .map_err(plot_err)?;
    for (i, (name, rows)) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| {
                let v = match curve {
                    Curve::Student => r.student_acc,
                    Curve::Aux => r.aux_acc,
                };
                (r.round as f64, v)
            })
            .collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
            });
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 2, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Final accuracy against alpha: `(alpha, mean, std)` per point.
pub fn plot_alpha_sweep(points: &[(f64, f64, f64)], out: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(DfkdError::Plot("no sweep points".into()));
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.05).max(0.5);
    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Final student accuracy vs alpha", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((lo - pad)..(hi + pad), 0f64..1f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("alpha")
        .y_desc("accuracy")
        .draw()
        .map_err(plot_err)?;
    let color = PALETTE[0];
    chart
        .draw_series(LineSeries::new(
            points.iter().map(|p| (p.0, p.1)),
            color.stroke_width(2),
        ))
        .map_err(plot_err)?;
    chart
        .draw_series(points.iter().map(|&(a, m, s)| {
            ErrorBar::new_vertical(a, (m - s).max(0.0), m, (m + s).min(1.0), color.filled(), 6)
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lays out `records` (each `(C, H, W)`) on a grid with `cols` columns and a
/// 2-pixel gutter, undoing `norm`. Writes a PNG.
pub fn write_image_grid(
    records: &[&[f32]],
    geometry: (usize, usize, usize),
    norm: &Normalization,
    cols: usize,
    out: &Path,
) -> Result<()> {
    let (c, h, w) = geometry;
    let cols = cols.max(1);
    let rows = records.len().div_ceil(cols).max(1);
    let gap = 2;
    let width = (cols * (w + gap) + gap) as u32;
    let height = (rows * (h + gap) + gap) as u32;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (k, rec) in records.iter().enumerate() {
        if rec.len() != c * h * w {
            return Err(DfkdError::shape(format!(
                "grid record has {} values, expected {}",
                rec.len(),
                c * h * w
            )));
        }
        let (ox, oy) = (gap + (k % cols) * (w + gap), gap + (k / cols) * (h + gap));
        for y in 0..h {
            for x in 0..w {
                let ch = |i: usize| to_byte(norm.denormalize(i, rec[(i * h + y) * w + x] as f64));
                let px = if c >= 3 {
                    [ch(0), ch(1), ch(2)]
                } else {
                    let v = ch(0);
                    [v, v, v]
                };
                img.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb(px));
            }
        }
    }
    img.save(out)?;
    Ok(())
}

/// The first `limit` bank records tagged with `round`.
pub fn round_records(bank: &ImageBank, round: u32, limit: usize) -> Vec<&[f32]> {
    bank.rounds()
        .iter()
        .enumerate()
        .filter(|(_, &r)| r == round)
        .take(limit)
        .filter_map(|(i, _)| bank.record(i))
        .collect()
}

/// One row per round with the first `per_row` images of that round.
pub fn write_rounds_montage(
    bank: &ImageBank,
    norm: &Normalization,
    per_row: usize,
    out: &Path,
) -> Result<()> {
    let geo = bank.geometry().ok_or(DfkdError::EmptyBank)?;
    let rounds: Vec<u32> = bank.rounds_represented().keys().copied().collect();
    let blank = vec![f32::INFINITY; geo.0 * geo.1 * geo.2];
    let mut records = Vec::new();
    for r in rounds {
        let mut row = round_records(bank, r, per_row);
        row.resize(per_row, &blank);
        records.extend(row);
    }
    write_image_grid(&records, geo, norm, per_row, out)
}
