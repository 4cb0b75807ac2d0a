//! Crop-and-rescale augmentation applied identically to every per-pixel
//! channel (image, mask, background, raster), plus mask corruption.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rasterizer::RasterOutput;
use crate::scene::Frame;
use crate::tensor::Tensor;

/// Output pixel `(x, y)` reads source pixel
/// `(⌊x0 + (x + ½)/scale⌋, ⌊y0 + (y + ½)/scale⌋)`, clamped to the frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    pub x0: f64,
    pub y0: f64,
}

impl CropSpec {
    pub fn identity(width: usize, height: usize) -> Self {
        CropSpec {
            width,
            height,
            scale: 1.0,
            x0: 0.0,
            y0: 0.0,
        }
    }

    fn source_index(&self, x: usize, y: usize, w: usize, h: usize) -> usize {
        let sx = (self.x0 + (x as f64 + 0.5) / self.scale).floor();
        let sy = (self.y0 + (y as f64 + 0.5) / self.scale).floor();
        let sx = sx.clamp(0.0, (w - 1) as f64) as usize;
        let sy = sy.clamp(0.0, (h - 1) as f64) as usize;
        sy * w + sx
    }
}

/// Draw a crop of `size` pixels (0 = whole frame) at a scale in `range`.
pub fn draw_crop(rng: &mut ChaCha8Rng, frame_size: (usize, usize), size: usize, range: (f64, f64)) -> CropSpec {
    let (w, h) = frame_size;
    let (cw, ch) = if size == 0 { (w, h) } else { (size, size) };
    let scale = if range.0 < range.1 {
        rng.random_range(range.0..=range.1)
    } else {
        range.0
    };
    let mut origin = |extent: usize, out: usize| {
        let window = out as f64 / scale;
        let slack = extent as f64 - window;
        if slack > 0.0 {
            rng.random_range(0.0..=slack)
        } else {
            0.5 * slack
        }
    };
    let x0 = origin(w, cw);
    let y0 = origin(h, ch);
    CropSpec {
        width: cw,
        height: ch,
        scale,
        x0,
        y0,
    }
}

/// One training example at crop resolution.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[1, 3, h, w]`.
    pub image: Tensor,
    /// `[1, 1, h, w]`.
    pub mask: Tensor,
    /// `[1, 3, h, w]`.
    pub background: Tensor,
    pub raster: RasterOutput,
}

fn resample(t: &Tensor, spec: &CropSpec, index: &[usize]) -> Tensor {
    let (c, h, w) = t.dims3();
    let plane = h * w;
    let out_plane = spec.width * spec.height;
    let mut out = Tensor::zeros(&[1, c, spec.height, spec.width]);
    for ch in 0..c {
        let src = &t.data()[ch * plane..(ch + 1) * plane];
        let dst = &mut out.data_mut()[ch * out_plane..(ch + 1) * out_plane];
        for (d, &i) in dst.iter_mut().zip(index) {
            *d = src[i];
        }
    }
    out
}

pub fn apply_crop(frame: &Frame, raster: &RasterOutput, spec: &CropSpec) -> Sample {
    let (w, h) = (raster.width, raster.height);
    let index: Vec<usize> = (0..spec.height)
        .flat_map(|y| (0..spec.width).map(move |x| (x, y)))
        .map(|(x, y)| spec.source_index(x, y, w, h))
        .collect();
    let r = RasterOutput {
        width: spec.width,
        height: spec.height,
        face_id: index.iter().map(|&i| raster.face_id[i]).collect(),
        barycentric: index.iter().map(|&i| raster.barycentric[i]).collect(),
        uv: index.iter().map(|&i| raster.uv[i]).collect(),
        normal: index.iter().map(|&i| raster.normal[i]).collect(),
        depth: index.iter().map(|&i| raster.depth[i]).collect(),
    };
    Sample {
        image: resample(&frame.image, spec, &index),
        mask: resample(&frame.mask, spec, &index),
        background: resample(&frame.background, spec, &index),
        raster: r,
    }
}

/// Erode (`dilate == false`) or dilate a `[.., H, W]` mask by one pixel
/// with a 3×3 window.
pub fn morph_mask(mask: &Tensor, dilate: bool) -> Tensor {
    let shape = mask.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let src = mask.data();
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let mut v = src[y * w + x];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let s = src[yy as usize * w + xx as usize];
                    v = if dilate { v.max(s) } else { v.min(s) };
                }
            }
            out.data_mut()[y * w + x] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::seeded_rng;
    use crate::scene::{generate_sequence, SceneConfig};

    #[test]
    fn identity_crop_is_exact() {
        let seq = generate_sequence(
            &SceneConfig {
                frames: 1,
                train_frames: 1,
                resolution: 32,
                ..SceneConfig::default()
            },
            1,
        )
        .unwrap();
        let r = seq.proxy_raster(0).unwrap();
        let f = &seq.frames[0];
        let s = apply_crop(f, &r, &CropSpec::identity(32, 32));
        assert_eq!(s.raster, r);
        assert_eq!(s.image.data(), f.image.data());
        assert_eq!(s.mask.data(), f.mask.data());
    }

    #[test]
    fn crops_keep_channels_aligned() {
        let seq = generate_sequence(
            &SceneConfig {
                frames: 1,
                train_frames: 1,
                resolution: 64,
                ..SceneConfig::default()
            },
            2,
        )
        .unwrap();
        let r = seq.proxy_raster(0).unwrap();
        let f = &seq.frames[0];
        let mut rng = seeded_rng(3, 0);
        for _ in 0..20 {
            let spec = draw_crop(&mut rng, (64, 64), 32, (0.5, 1.25));
            assert!((0.5..=1.25).contains(&spec.scale));
            let s = apply_crop(f, &r, &spec);
            assert_eq!(s.image.shape(), &[1, 3, 32, 32]);
            for p in 0..32 * 32 {
                let src = spec.source_index(p % 32, p / 32, 64, 64);
                assert_eq!(s.raster.face_id[p], r.face_id[src]);
                assert_eq!(s.mask.data()[p], f.mask.data()[src]);
                assert_eq!(s.image.data()[p], f.image.data()[src]);
            }
        }
    }

    #[test]
    fn morphology() {
        let mut m = Tensor::zeros(&[1, 5, 5]);
        m.data_mut()[12] = 1.0;
        let d = morph_mask(&m, true);
        assert_eq!(d.sum(), 9.0);
        assert_eq!(morph_mask(&d, false), m);
    }
}
