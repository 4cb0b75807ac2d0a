//! Static line plots drawn straight into PNG files.
//!
//! No text rendering: series are told apart by color (in the order given by
//! [`PALETTE`]) and the frame is a plain box with tick marks at the data
//! range's quartiles.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotOptions {
    pub width: u32,
    pub height: u32,
    pub log_y: bool,
    /// Moving-average window applied before drawing; 1 disables.
    pub smooth: usize,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions {
            width: 640,
            height: 360,
            log_y: false,
            smooth: 1,
        }
    }
}

fn smooth(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    if window <= 1 {
        return points.to_vec();
    }
    let mut out = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    for (i, &(x, y)) in points.iter().enumerate() {
        acc += y;
        if i >= window {
            acc -= points[i - window].1;
        }
        out.push((x, acc / (i + 1).min(window) as f64));
    }
    out
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Render `series` to an image. Non-finite points (and non-positive ones on
/// a log axis) are skipped.
pub fn render(series: &[Series], opts: &PlotOptions) -> Result<RgbImage> {
    if opts.width < 32 || opts.height < 32 {
        return Err(Error::invalid("plot must be at least 32x32"));
    }
    let tf = |y: f64| if opts.log_y { y.log10() } else { y };
    let data: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            smooth(&s.points, opts.smooth)
                .into_iter()
                .filter(|&(x, y)| x.is_finite() && y.is_finite() && (!opts.log_y || y > 0.0))
                .map(|(x, y)| (x, tf(y)))
                .collect()
        })
        .collect();
    let all = data.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let mut img = RgbImage::from_pixel(opts.width, opts.height, Rgb([255, 255, 255]));
    let m = 12.0;
    let (w, h) = (opts.width as f64, opts.height as f64);
    let frame = Rgb([90, 90, 90]);
    line(&mut img, (m, m), (w - m, m), frame);
    line(&mut img, (m, h - m), (w - m, h - m), frame);
    line(&mut img, (m, m), (m, h - m), frame);
    line(&mut img, (w - m, m), (w - m, h - m), frame);
    for q in 1..4 {
        let f = q as f64 / 4.0;
        let tx = m + f * (w - 2.0 * m);
        let ty = m + f * (h - 2.0 * m);
        line(&mut img, (tx, h - m), (tx, h - m + 4.0), frame);
        line(&mut img, (m - 4.0, ty), (m, ty), frame);
    }
    if !x0.is_finite() {
        return Ok(img);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    for (k, pts) in data.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        for pair in pts.windows(2) {
            line(&mut img, (px(pair[0].0), py(pair[0].1)), (px(pair[1].0), py(pair[1].1)), c);
        }
        if let [(x, y)] = pts.as_slice() {
            line(&mut img, (px(*x) - 1.0, py(*y)), (px(*x) + 1.0, py(*y)), c);
        }
    }
    Ok(img)
}

pub fn save(series: &[Series], opts: &PlotOptions, path: &Path) -> Result<()> {
    render(series, opts)?
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
