//! Minimal raster plots: view-importance bars and NPS curves.
//!
//! No text is drawn; axes run from zero to the largest plotted value and the
//! accompanying CSV carries the numbers.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
pub const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
pub const BAR: Rgb<u8> = Rgb([150, 150, 150]);
pub const SELECTED: Rgb<u8> = Rgb([200, 40, 40]);
/// Line colours, cycled per series.
pub const PALETTE: [Rgb<u8>; 4] = [Rgb([30, 90, 200]), Rgb([200, 40, 40]), Rgb([40, 150, 60]), Rgb([150, 60, 170])];

const MARGIN: u32 = 8;

fn canvas(width: u32, height: u32) -> Result<RgbImage> {
    if width <= 2 * MARGIN + 1 || height <= 2 * MARGIN + 1 {
        return Err(Error::contract("plot", "canvas too small"));
    }
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    for x in MARGIN..width - MARGIN {
        img.put_pixel(x, height - MARGIN, AXIS);
    }
    for y in MARGIN..=height - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    Ok(img)
}

/// One bar per value; bars with `selected[i]` are drawn in [`SELECTED`].
pub fn bar_plot(values: &[f64], selected: &[bool], width: u32, height: u32) -> Result<RgbImage> {
    if values.is_empty() || selected.len() != values.len() {
        return Err(Error::contract("bar_plot", "need one selection flag per value"));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::contract("bar_plot", "values must be finite and non-negative"));
    }
    let mut img = canvas(width, height)?;
    let top = values.iter().copied().fold(0.0, f64::max);
    let plot_w = (width - 2 * MARGIN - 1) as f64;
    let plot_h = (height - 2 * MARGIN - 1) as f64;
    let slot = plot_w / values.len() as f64;
    for (i, (&v, &sel)) in values.iter().zip(selected).enumerate() {
        let x0 = MARGIN + 1 + (i as f64 * slot) as u32;
        let x1 = (MARGIN + 1 + ((i + 1) as f64 * slot) as u32).max(x0 + 1);
        let h = if top > 0.0 { (v / top * plot_h).round() as u32 } else { 0 };
        let colour = if sel { SELECTED } else { BAR };
        // Leave a one-pixel gap between bars when they are wide enough.
        let x1 = if x1 - x0 > 2 { x1 - 1 } else { x1 };
        for x in x0..x1.min(width - MARGIN) {
            for y in 0..h {
                img.put_pixel(x, height - MARGIN - 1 - y, colour);
            }
        }
    }
    Ok(img)
}

/// Polylines through `(x, y)` points, one colour per series, all sharing the
/// axes `[0, max x] × [0, max y]`.
pub fn line_plot(series: &[(Vec<f64>, Vec<f64>)], width: u32, height: u32) -> Result<RgbImage> {
    if series.is_empty() || series.iter().any(|(x, y)| x.len() != y.len() || x.is_empty()) {
        return Err(Error::contract("line_plot", "each series needs matching non-empty x and y"));
    }
    let finite = |v: &f64| v.is_finite();
    if !series.iter().all(|(x, y)| x.iter().all(finite) && y.iter().all(finite)) {
        return Err(Error::contract("line_plot", "values must be finite"));
    }
    let mut img = canvas(width, height)?;
    let xmax = series.iter().flat_map(|s| s.0.iter().copied()).fold(0.0, f64::max);
    let ymax = series.iter().flat_map(|s| s.1.iter().copied()).fold(0.0, f64::max);
    let plot_w = (width - 2 * MARGIN - 1) as f64;
    let plot_h = (height - 2 * MARGIN - 1) as f64;
    let to_px = |x: f64, y: f64| {
        let px = MARGIN as f64 + 1.0 + if xmax > 0.0 { x.max(0.0) / xmax * plot_w } else { 0.0 };
        let py = (height - MARGIN - 1) as f64 - if ymax > 0.0 { y.max(0.0) / ymax * plot_h } else { 0.0 };
        (px, py)
    };
    for (k, (xs, ys)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = xs.iter().zip(ys).map(|(&x, &y)| to_px(x, y)).collect();
        for w in pts.windows(2) {
            draw_segment(&mut img, w[0], w[1], colour);
        }
        if pts.len() == 1 {
            draw_segment(&mut img, pts[0], pts[0], colour);
        }
    }
    Ok(img)
}

fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), colour: Rgb<u8>) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = (a.0 + t * (b.0 - a.0)).round();
        let y = (a.1 + t * (b.1 - a.1)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, colour);
        }
    }
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tallest_bar_reaches_the_top_and_selection_is_coloured() {
        let img = bar_plot(&[1.0, 2.0, 0.5], &[false, true, false], 60, 40).unwrap();
        let count = |c: Rgb<u8>| img.pixels().filter(|p| **p == c).count();
        assert!(count(SELECTED) > 0);
        assert!(count(BAR) > 0);
        // The selected bar is the tallest: its column reaches the top row of the plot area.
        let top_row = MARGIN + 1;
        assert!((0..60).any(|x| *img.get_pixel(x, top_row) == SELECTED));
        assert!(!(0..60).any(|x| *img.get_pixel(x, top_row) == BAR));
    }

    #[test]
    fn line_plot_draws_every_series() {
        let s = vec![(vec![0.0, 1.0, 2.0], vec![1.0, 0.5, 0.25]), (vec![0.0, 2.0], vec![0.2, 0.2])];
        let img = line_plot(&s, 80, 50).unwrap();
        for c in &PALETTE[..2] {
            assert!(img.pixels().any(|p| p == c));
        }
        assert!(line_plot(&[(vec![0.0], vec![])], 80, 50).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(bar_plot(&[1.0], &[true, false], 60, 40).is_err());
        assert!(bar_plot(&[f64::NAN], &[true], 60, 40).is_err());
        assert!(bar_plot(&[1.0], &[true], 10, 10).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bars.png");
        let img = bar_plot(&[0.1, 0.3], &[true, false], 40, 30).unwrap();
        save_png(&img, &p).unwrap();
        let back = image::open(&p).unwrap().to_rgb8();
        assert_eq!(back, img);
    }
}
