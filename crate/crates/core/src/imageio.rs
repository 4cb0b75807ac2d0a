//! PNG conversion for `[C, H, W]` tensors.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` in `[-1, 1]` to an 8-bit RGB image.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3();
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|ch| to_u8(0.5 * (d[ch * plane + p] + 1.0))))
    }))
}

/// `[1, H, W]` in `[0, 1]` to an 8-bit grey image.
pub fn tensor_to_gray(t: &Tensor) -> Result<GrayImage> {
    let (c, h, w) = t.dims3();
    if c != 1 {
        return Err(Error::invalid(format!("expected 1 channel, got {c}")));
    }
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(d[y as usize * w + x as usize])])
    }))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut out = Tensor::zeros(&[3, h, w]);
    let d = out.data_mut();
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for ch in 0..3 {
            d[ch * plane + p] = px[ch] as f64 / 255.0 * 2.0 - 1.0;
        }
    }
    out
}

pub fn gray_to_tensor(img: &GrayImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p[0] as f64 / 255.0).collect();
    Tensor::from_vec(&[1, h, w], data).expect("pixel count matches")
}

pub fn save_rgb(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_gray(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_gray(t)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    Ok(rgb_to_tensor(&open(path)?.to_rgb8()))
}

pub fn load_gray(path: &Path) -> Result<Tensor> {
    Ok(gray_to_tensor(&open(path)?.to_luma8()))
}

/// Horizontal strip of equally sized `[3, H, W]` images.
pub fn hstack(images: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("nothing to stack"));
    };
    let (c, h, w) = first.dims3();
    let total = w * images.len();
    let mut out = Tensor::zeros(&[c, h, total]);
    for (k, img) in images.iter().enumerate() {
        crate::error::ensure_shape("hstack", first.shape(), img.shape())?;
        for ch in 0..c {
            for y in 0..h {
                let src = &img.data()[(ch * h + y) * w..][..w];
                out.data_mut()[(ch * h + y) * total + k * w..][..w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}
