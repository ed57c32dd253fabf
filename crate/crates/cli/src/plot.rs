//! Static figures: frame grids (PNG) and line charts (SVG).

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use plotters::prelude::*;
use tempo_fields::spectra::TruncationPoint;

use crate::error::{CliError, ErrorKind, Result};

const GAP: u32 = 2;
const MIN_CELL: usize = 96;

fn plot_err(path: &Path) -> impl Fn(String) -> CliError + '_ {
    move |e| CliError::new(ErrorKind::Io, format!("{}: plotting failed: {e}", path.display()))
}

/// Diverging blue–white–red map of `v ∈ [−1, 1]`.
fn diverging(v: f64) -> Rgb<u8> {
    let v = v.clamp(-1.0, 1.0);
    let (lo, mid, hi) = ([33.0, 102.0, 172.0], [247.0, 247.0, 247.0], [178.0, 24.0, 43.0]);
    let (a, b, s) = if v < 0.0 { (mid, lo, -v) } else { (mid, hi, v) };
    let c = |i: usize| (a[i] + (b[i] - a[i]) * s).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Renders rows of equally sized fields into one image with a shared,
/// zero-centred colour scale. Row `r`, column `c` is `rows[r][c]`.
pub fn frame_grid_png(rows: &[Vec<Array2<f64>>], path: &Path) -> Result<()> {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let first = rows.iter().flatten().next().ok_or_else(|| CliError::new(ErrorKind::Data, "empty frame grid"))?;
    let (h, w) = first.dim();
    if rows.iter().flatten().any(|f| f.dim() != (h, w)) {
        return Err(CliError::new(ErrorKind::Data, "frame grid cells differ in size"));
    }
    let scale = MIN_CELL.div_ceil(h.max(w)).max(1);
    let (ch, cw) = ((h * scale) as u32, (w * scale) as u32);
    let amp = rows.iter().flatten().flat_map(|f| f.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let width = cols as u32 * (cw + GAP) + GAP;
    let height = rows.len() as u32 * (ch + GAP) + GAP;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, field) in row.iter().enumerate() {
            let (x0, y0) = (GAP + c as u32 * (cw + GAP), GAP + r as u32 * (ch + GAP));
            for y in 0..ch {
                for x in 0..cw {
                    let v = field[[y as usize / scale, x as usize / scale]] / amp;
                    img.put_pixel(x0 + x, y0 + y, diverging(v));
                }
            }
        }
    }
    img.save(path).map_err(|e| CliError::new(ErrorKind::Io, format!("{}: {e}", path.display())))
}

fn log_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| *v > 0.0 && v.is_finite()).fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi == 0.0 {
        (1e-12, 1.0)
    } else {
        (lo.max(hi * 1e-16) * 0.5, hi * 2.0)
    }
}

const PALETTE: [RGBColor; 5] = [RGBColor(0, 114, 178), RGBColor(213, 94, 0), RGBColor(0, 158, 115), RGBColor(204, 121, 167), RGBColor(86, 180, 233)];

/// Energy per shell (log scale) for the truth and each prediction, with an
/// inset of `E_pred(k) − E_truth(k)`.
pub fn spectrum_svg(path: &Path, truth: &[f64], preds: &[(String, Vec<f64>)]) -> Result<()> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let kmax = truth.len().saturating_sub(1).max(1) as f64;
    let floor = log_bounds(truth.iter().chain(preds.iter().flat_map(|p| p.1.iter())).copied());
    let mut chart = ChartBuilder::on(&root)
        .caption("Energy spectrum", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0f64..kmax, (floor.0..floor.1).log_scale())
        .map_err(|e| err(e.to_string()))?;
    chart.configure_mesh().x_desc("wavenumber k").y_desc("E(k)").draw().map_err(|e| err(e.to_string()))?;
    let clamp = |v: f64| v.max(floor.0);
    chart
        .draw_series(LineSeries::new(truth.iter().enumerate().map(|(k, &e)| (k as f64, clamp(e))), BLACK.stroke_width(2)))
        .map_err(|e| err(e.to_string()))?
        .label("truth")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK));
    for (i, (name, e)) in preds.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(e.iter().enumerate().map(|(k, &v)| (k as f64, clamp(v))), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().position(SeriesLabelPosition::LowerLeft).background_style(WHITE).border_style(BLACK).draw().map_err(|e| err(e.to_string()))?;

    if !preds.is_empty() {
        let inset = root.clone().shrink((560, 70), (310, 220));
        inset.fill(&WHITE).map_err(|e| err(e.to_string()))?;
        let residuals: Vec<Vec<f64>> = preds.iter().map(|(_, e)| e.iter().zip(truth).map(|(p, t)| p - t).collect()).collect();
        let amp = residuals.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE) * 1.1;
        let mut small = ChartBuilder::on(&inset)
            .caption("residual", ("sans-serif", 14))
            .margin(5)
            .x_label_area_size(25)
            .y_label_area_size(55)
            .build_cartesian_2d(0f64..kmax, -amp..amp)
            .map_err(|e| err(e.to_string()))?;
        small.configure_mesh().light_line_style(WHITE).label_style(("sans-serif", 10)).draw().map_err(|e| err(e.to_string()))?;
        small.draw_series(LineSeries::new([(0.0, 0.0), (kmax, 0.0)], BLACK)).map_err(|e| err(e.to_string()))?;
        for (i, r) in residuals.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            small
                .draw_series(r.iter().enumerate().map(|(k, &v)| {
                    let x = k as f64;
                    Rectangle::new([(x - 0.35, 0.0), (x + 0.35, v)], color.filled())
                }))
                .map_err(|e| err(e.to_string()))?;
        }
    }
    root.present().map_err(|e| err(e.to_string()))
}

/// Reconstruction MSE, spectral MSE and retained energy fraction against
/// the L1 cutoff `k_cut`.
pub fn truncation_svg(path: &Path, points: &[TruncationPoint]) -> Result<()> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (1000, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let (left, right) = root.split_horizontally(500);
    let kmax = points.last().map(|p| p.k_cut).unwrap_or(1).max(1) as f64;
    let bounds = log_bounds(points.iter().flat_map(|p| [p.recon_mse, p.spectral_mse]));
    let mut chart = ChartBuilder::on(&left)
        .caption("Truncation error", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0f64..kmax, (bounds.0..bounds.1).log_scale())
        .map_err(|e| err(e.to_string()))?;
    chart.configure_mesh().x_desc("k_cut").y_desc("MSE").draw().map_err(|e| err(e.to_string()))?;
    let series = [("recon MSE", PALETTE[0], 0usize), ("spectral MSE", PALETTE[1], 1)];
    for (name, color, which) in series {
        let pts = points.iter().map(|p| (p.k_cut as f64, if which == 0 { p.recon_mse } else { p.spectral_mse }.max(bounds.0)));
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(|e| err(e.to_string()))?;
    let mut frac = ChartBuilder::on(&right)
        .caption("Cumulative energy fraction", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..kmax, 0f64..1.02)
        .map_err(|e| err(e.to_string()))?;
    frac.configure_mesh().x_desc("k_cut").y_desc("fraction").draw().map_err(|e| err(e.to_string()))?;
    frac.draw_series(LineSeries::new(points.iter().map(|p| (p.k_cut as f64, p.energy_fraction)), PALETTE[2].stroke_width(2)))
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// Pearson correlation against rollout step.
pub fn pearson_svg(path: &Path, pearson: &[f64]) -> Result<()> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (800, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let lo = pearson.iter().copied().filter(|v| v.is_finite()).fold(1.0f64, f64::min).min(0.0);
    let mut chart = ChartBuilder::on(&root)
        .caption("Rollout correlation", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(1f64..(pearson.len().max(2) as f64), lo..1.02)
        .map_err(|e| err(e.to_string()))?;
    chart.configure_mesh().x_desc("step").y_desc("Pearson").draw().map_err(|e| err(e.to_string()))?;
    chart
        .draw_series(LineSeries::new(pearson.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)), PALETTE[0].stroke_width(2)))
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(diverging(0.0), Rgb([247, 247, 247]));
        assert_eq!(diverging(-1.0), Rgb([33, 102, 172]));
        assert_eq!(diverging(2.0), Rgb([178, 24, 43]));
    }

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let f = Array2::from_shape_fn((8, 8), |(i, j)| (i as f64 - j as f64) / 8.0);
        frame_grid_png(&[vec![f.clone(), f.clone()], vec![f.clone()]], &dir.path().join("g.png")).unwrap();
        let img = image::open(dir.path().join("g.png")).unwrap();
        assert_eq!(img.width(), 2 * (96 + GAP) + GAP);
        let e = vec![1.0, 0.5, 0.1, 0.01];
        spectrum_svg(&dir.path().join("s.svg"), &e, &[("model".into(), vec![1.1, 0.4, 0.12, 0.0])]).unwrap();
        let pts: Vec<TruncationPoint> = (0..4)
            .map(|k| TruncationPoint { k_cut: k, recon_mse: 1.0 / (k + 1) as f64, spectral_mse: 1.0 / (k + 1) as f64, energy_fraction: k as f64 / 3.0 })
            .collect();
        truncation_svg(&dir.path().join("t.svg"), &pts).unwrap();
        pearson_svg(&dir.path().join("p.svg"), &[0.99, 0.95, 0.9]).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("s.svg")).unwrap();
        assert!(svg.contains("<svg"));
    }
}
