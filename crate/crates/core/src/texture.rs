//! Learnable neural textures and their differentiable bilinear lookup.
//!
//! Textures are stored channel-major as `[C, H, W]`. Lookups use the
//! align-corners convention: `u = 0` is the center of the first texel column
//! and `u = 1` the center of the last (likewise `v` for rows). Uncovered
//! pixels sample to exact zero.

use fixedbitset::FixedBitSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rasterizer::RasterOutput;
use crate::tensor::Tensor;

pub const DEFAULT_TEXTURE_WIDTH: usize = 256;
pub const DEFAULT_TEXTURE_HEIGHT: usize = 256;
pub const DEFAULT_TEXTURE_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralTexture {
    /// `[C, H, W]`.
    pub data: Tensor,
    pub identity_id: String,
    pub init_seed: u64,
}

impl NeuralTexture {
    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn fingerprint(&self) -> String {
        self.data.fingerprint()
    }
}

/// I.i.d. uniform `[-1, 1]` texture. The values depend only on the shape and
/// `seed`, so identities created from one seed start identical.
pub fn init_texture(
    width: usize,
    height: usize,
    channels: usize,
    seed: u64,
    identity_id: &str,
) -> Result<NeuralTexture> {
    if width == 0 || height == 0 || channels == 0 {
        return Err(Error::invalid(format!(
            "texture dimensions must be positive, got {width}x{height}x{channels}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..width * height * channels)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    Ok(NeuralTexture {
        data: Tensor::from_vec(&[channels, height, width], data)?,
        identity_id: identity_id.to_string(),
        init_seed: seed,
    })
}

/// [`init_texture`] at the default 256×256×8 shape.
pub fn init_default_texture(seed: u64, identity_id: &str) -> Result<NeuralTexture> {
    init_texture(
        DEFAULT_TEXTURE_WIDTH,
        DEFAULT_TEXTURE_HEIGHT,
        DEFAULT_TEXTURE_CHANNELS,
        seed,
        identity_id,
    )
}

/// The four `(texel index, weight)` taps of a bilinear lookup at `uv` on a
/// `width × height` grid. Weights sum to one; degenerate taps carry weight 0.
pub fn bilinear_footprint(uv: [f64; 2], width: usize, height: usize) -> [(usize, f64); 4] {
    let (x0, x1, fx) = axis_taps(uv[0], width);
    let (y0, y1, fy) = axis_taps(uv[1], height);
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

fn axis_taps(t: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let x = t.clamp(0.0, 1.0) * (n - 1) as f64;
    let i0 = (x.floor() as usize).min(n - 1);
    let f = x - i0 as f64;
    if i0 == n - 1 {
        (i0, i0, 0.0)
    } else {
        (i0, i0 + 1, f)
    }
}

/// Precomputed bilinear taps for every pixel of a raster.
#[derive(Clone, Debug)]
pub struct BilinearLookup {
    pub width: usize,
    pub height: usize,
    texture_width: usize,
    texture_height: usize,
    taps: Vec<Option<[(usize, f64); 4]>>,
}

impl BilinearLookup {
    pub fn new(raster: &RasterOutput, texture_width: usize, texture_height: usize) -> Self {
        let taps = raster
            .uv
            .iter()
            .enumerate()
            .map(|(p, uv)| {
                raster
                    .covered(p)
                    .then(|| bilinear_footprint(*uv, texture_width, texture_height))
            })
            .collect();
        BilinearLookup {
            width: raster.width,
            height: raster.height,
            texture_width,
            texture_height,
            taps,
        }
    }

    fn check_texture(&self, shape: &[usize]) {
        assert_eq!(
            &shape[1..],
            &[self.texture_height, self.texture_width],
            "lookup built for a different texture size"
        );
    }

    /// Sample a `[C, Ht, Wt]` texture into a `[1, C, H, W]` image.
    pub fn gather(&self, texture: &Tensor) -> Tensor {
        self.check_texture(texture.shape());
        let c = texture.shape()[0];
        let tplane = self.texture_width * self.texture_height;
        let plane = self.width * self.height;
        let mut out = Tensor::zeros(&[1, c, self.height, self.width]);
        let src = texture.data();
        let dst = out.data_mut();
        for (p, taps) in self.taps.iter().enumerate() {
            let Some(taps) = taps else { continue };
            for ch in 0..c {
                let t = &src[ch * tplane..(ch + 1) * tplane];
                dst[ch * plane + p] = taps.iter().map(|&(i, w)| w * t[i]).sum();
            }
        }
        out
    }

    /// Adjoint of [`gather`](Self::gather): scatter-add a `[1, C, H, W]`
    /// gradient onto the texture's four footprint texels per pixel.
    pub fn scatter(&self, grad: &Tensor, texture_shape: &[usize]) -> Tensor {
        self.check_texture(texture_shape);
        let c = texture_shape[0];
        let tplane = self.texture_width * self.texture_height;
        let plane = self.width * self.height;
        let mut out = Tensor::zeros(texture_shape);
        let dst = out.data_mut();
        let g = grad.data();
        for (p, taps) in self.taps.iter().enumerate() {
            let Some(taps) = taps else { continue };
            for ch in 0..c {
                let gv = g[ch * plane + p];
                for &(i, w) in taps {
                    dst[ch * tplane + i] += w * gv;
                }
            }
        }
        out
    }
}

/// Texture sampled into image space.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralImage {
    /// `[C, H, W]`, zero at uncovered pixels.
    pub data: Tensor,
    pub validity: Vec<u8>,
}

pub fn sample_texture(texture: &NeuralTexture, raster: &RasterOutput) -> NeuralImage {
    let lookup = BilinearLookup::new(raster, texture.width(), texture.height());
    let data = lookup
        .gather(&texture.data)
        .reshape(&[texture.channels(), raster.height, raster.width])
        .expect("sample shape");
    NeuralImage {
        data,
        validity: raster.coverage(),
    }
}

/// Gradient of a scalar loss with respect to the texture, given its gradient
/// with respect to the sampled image (`[C, H, W]`).
pub fn sample_texture_adjoint(
    texture: &NeuralTexture,
    raster: &RasterOutput,
    image_grad: &Tensor,
) -> Result<Tensor> {
    let expected = [texture.channels(), raster.height, raster.width];
    crate::error::ensure_shape("sample_texture_adjoint", &expected, image_grad.shape())?;
    let lookup = BilinearLookup::new(raster, texture.width(), texture.height());
    let g = image_grad
        .clone()
        .reshape(&[1, expected[0], expected[1], expected[2]])?;
    Ok(lookup.scatter(&g, texture.data.shape()))
}

/// Jitter covered pixels' uv by i.i.d. uniform noise in `[-magnitude,
/// magnitude]` per axis, then clamp to `[0, 1]`.
pub fn perturb_uv(raster: &RasterOutput, magnitude: f64, seed: u64) -> Result<RasterOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_uv_with(raster, magnitude, &mut rng)
}

pub fn perturb_uv_with(
    raster: &RasterOutput,
    magnitude: f64,
    rng: &mut impl Rng,
) -> Result<RasterOutput> {
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(Error::invalid(format!(
            "perturbation magnitude must be >= 0, got {magnitude}"
        )));
    }
    let mut out = raster.clone();
    if magnitude == 0.0 {
        return Ok(out);
    }
    for (p, uv) in out.uv.iter_mut().enumerate() {
        if raster.face_id[p] < 0 {
            continue;
        }
        for v in uv.iter_mut() {
            let d: f64 = rng.random_range(-magnitude..=magnitude);
            *v = (*v + d).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// A region of texture space.
#[derive(Clone, Debug, PartialEq)]
pub enum TextureRegion {
    /// Texels whose centers lie in `[u0, u1] × [v0, v1]`. A rectangle of
    /// zero width or height is empty.
    Rect { u0: f64, v0: f64, u1: f64, v1: f64 },
    /// Explicit texel mask, `width × height`, row-major.
    Mask {
        width: usize,
        height: usize,
        texels: FixedBitSet,
    },
}

impl TextureRegion {
    pub fn rect(u0: f64, v0: f64, u1: f64, v1: f64) -> Result<Self> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if ![u0, v0, u1, v1].into_iter().all(in_unit) {
            return Err(Error::invalid("region bounds must lie in [0,1]"));
        }
        if u0 > u1 || v0 > v1 {
            return Err(Error::invalid("region rect must satisfy u0<=u1 and v0<=v1"));
        }
        Ok(TextureRegion::Rect { u0, v0, u1, v1 })
    }

    /// Texel membership mask for a `width × height` texture.
    pub fn texel_mask(&self, width: usize, height: usize) -> Result<FixedBitSet> {
        match self {
            TextureRegion::Rect { u0, v0, u1, v1 } => {
                let mut set = FixedBitSet::with_capacity(width * height);
                if u0 == u1 || v0 == v1 {
                    return Ok(set);
                }
                let center = |i: usize, n: usize| {
                    if n == 1 {
                        0.0
                    } else {
                        i as f64 / (n - 1) as f64
                    }
                };
                for y in 0..height {
                    let v = center(y, height);
                    if v < *v0 || v > *v1 {
                        continue;
                    }
                    for x in 0..width {
                        let u = center(x, width);
                        if u >= *u0 && u <= *u1 {
                            set.insert(y * width + x);
                        }
                    }
                }
                Ok(set)
            }
            TextureRegion::Mask {
                width: w,
                height: h,
                texels,
            } => {
                if (*w, *h) != (width, height) {
                    return Err(Error::ShapeMismatch {
                        op: "texture region mask",
                        expected: vec![height, width],
                        actual: vec![*h, *w],
                    });
                }
                Ok(texels.clone())
            }
        }
    }
}

/// `a` outside `region`, `b` inside it.
pub fn swap_region(
    a: &NeuralTexture,
    b: &NeuralTexture,
    region: &TextureRegion,
) -> Result<NeuralTexture> {
    crate::error::ensure_shape("swap_region", a.data.shape(), b.data.shape())?;
    let (w, h) = (a.width(), a.height());
    let mask = region.texel_mask(w, h)?;
    let mut out = a.clone();
    let plane = w * h;
    for ch in 0..a.channels() {
        for t in mask.ones() {
            out.data.data_mut()[ch * plane + t] = b.data.data()[ch * plane + t];
        }
    }
    Ok(out)
}
