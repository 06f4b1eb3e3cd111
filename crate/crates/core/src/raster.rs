//! PNG figures: side-by-side comparison panels and loss curves.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::image_to_rgb;
use crate::domain::{ChangeMask, ChangeProbMap, Image};
use crate::error::{Error, Result};

const GAP: u32 = 2;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

pub enum PanelTile<'a> {
    Image(&'a Image),
    Mask(&'a ChangeMask),
    Prob(&'a ChangeProbMap),
}

impl PanelTile<'_> {
    fn render(&self) -> Result<RgbImage> {
        Ok(match self {
            PanelTile::Image(img) => image_to_rgb(img)?,
            PanelTile::Mask(m) => RgbImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
                let v = m.get(y as usize, x as usize) * 255;
                Rgb([v, v, v])
            }),
            PanelTile::Prob(p) => {
                let w = p.width();
                RgbImage::from_fn(w as u32, p.height() as u32, |x, y| {
                    let v = (p.values()[y as usize * w + x as usize] * 255.0).round() as u8;
                    Rgb([v, v, v])
                })
            }
        })
    }
}

/// Tiles left to right with a white gap.
pub fn panel(tiles: &[PanelTile<'_>]) -> Result<RgbImage> {
    let rendered = tiles.iter().map(PanelTile::render).collect::<Result<Vec<_>>>()?;
    if rendered.is_empty() {
        return Err(Error::Config("panel needs at least one tile".into()));
    }
    let h = rendered.iter().map(|r| r.height()).max().unwrap_or(0);
    let w = rendered.iter().map(|r| r.width()).sum::<u32>() + GAP * (rendered.len() as u32 - 1);
    let mut out = RgbImage::from_pixel(w, h, BACKGROUND);
    let mut x0 = 0;
    for r in &rendered {
        image::imageops::replace(&mut out, r, x0 as i64, 0);
        x0 += r.width() + GAP;
    }
    Ok(out)
}

/// Training-log columns as numeric series keyed by step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurves {
    pub columns: Vec<String>,
    pub series: Vec<Vec<(f64, f64)>>,
}

/// Reads a training log; every column after `step,epoch` becomes a series
/// and empty cells are skipped.
pub fn read_loss_log(path: &Path) -> Result<LossCurves> {
    let csv_err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if headers.len() < 3 || headers[0] != "step" {
        return Err(Error::Config(format!("{} is not a training log", path.display())));
    }
    let columns = headers[2..].to_vec();
    let mut series = vec![Vec::new(); columns.len()];
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let step: f64 = rec[0]
            .parse()
            .map_err(|_| Error::Config(format!("bad step `{}` in {}", &rec[0], path.display())))?;
        for (i, cell) in rec.iter().skip(2).enumerate() {
            if let Ok(v) = cell.parse::<f64>() {
                series[i].push((step, v));
            }
        }
    }
    Ok(LossCurves { columns, series })
}

const PALETTE: [[u8; 3]; 9] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [23, 190, 207],
];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// One coloured polyline per series on a shared axis, with a legend strip
/// of colour swatches in column order along the top.
pub fn plot_loss_curves(curves: &LossCurves, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    let (left, right, top, bottom) = (30i64, width as i64 - 10, 24i64, height as i64 - 20);
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (left, top), (left, bottom), axis);
    line(&mut img, (left, bottom), (right, bottom), axis);
    for (i, _) in curves.series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for dy in 0..8 {
            for dx in 0..12 {
                let (x, y) = (left as u32 + 16 * i as u32 + dx, 6 + dy);
                if x < width && y < height {
                    img.put_pixel(x, y, Rgb(c));
                }
            }
        }
    }
    let points = curves.series.iter().flatten();
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        if y.is_finite() {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if xmin > xmax {
        return img;
    }
    let xr = (xmax - xmin).max(1e-12);
    let yr = (ymax - ymin).max(1e-12);
    let to_px = |(x, y): (f64, f64)| {
        (
            left + ((x - xmin) / xr * (right - left) as f64).round() as i64,
            bottom - ((y - ymin) / yr * (bottom - top) as f64).round() as i64,
        )
    };
    for (i, s) in curves.series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        let pts: Vec<(i64, i64)> = s.iter().filter(|p| p.1.is_finite()).map(|&p| to_px(p)).collect();
        if let [only] = pts.as_slice() {
            line(&mut img, *only, *only, c);
        }
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], c);
        }
    }
    img
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    crate::data::save_png(&img.clone().into(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RangeTag;

    #[test]
    fn panel_width_adds_gaps() {
        let img = Image::filled(4, 5, 3, 0.0, RangeTag::SignedUnit).unwrap();
        let m = ChangeMask::zeros(4, 5);
        let p = panel(&[PanelTile::Image(&img), PanelTile::Mask(&m), PanelTile::Image(&img)]).unwrap();
        assert_eq!((p.width(), p.height()), (5 * 3 + 2 * GAP, 4));
        assert!(panel(&[]).is_err());
    }

    #[test]
    fn log_series_skip_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        std::fs::write(&p, format!("{}\n1,0,1,2,3,4,0.5,,,0.7,9\n2,0,1,2,3,4,0.4,,,0.6,8\n", crate::trainer::LOG_HEADER)).unwrap();
        let c = read_loss_log(&p).unwrap();
        assert_eq!(c.columns.len(), 9);
        assert_eq!(c.series[4].len(), 2);
        assert!(c.series[5].is_empty());
        let img = plot_loss_curves(&c, 200, 100);
        assert_eq!(img.dimensions(), (200, 100));
    }
}
