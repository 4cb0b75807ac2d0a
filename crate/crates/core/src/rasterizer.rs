//! Depth-buffered triangle rasterization into per-pixel surface lookups.
//!
//! Conventions (frozen): pixel `(x, y)` is sampled at its center
//! `(x + 0.5, y + 0.5)`; a center is inside a triangle when all three
//! normalized edge functions are `>= 0`; the smallest interpolated depth
//! wins and exact depth ties go to the lowest face index. Barycentrics are
//! computed in screen space.

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::scene::{CoarseMesh, WeakPerspectiveCamera};
use crate::texture::bilinear_footprint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub width: usize,
    pub height: usize,
    pub backface_culling: bool,
}

impl RasterConfig {
    /// Pixel centers sit at this offset from integer coordinates.
    pub const PIXEL_CENTER_OFFSET: f64 = 0.5;

    pub fn new(width: usize, height: usize) -> Self {
        RasterConfig {
            width,
            height,
            backface_culling: false,
        }
    }

    pub fn for_camera(camera: &WeakPerspectiveCamera) -> Self {
        Self::new(camera.image_size.0, camera.image_size.1)
    }
}

/// Per-pixel rasterization result, row-major with `width × height` entries
/// per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterOutput {
    pub width: usize,
    pub height: usize,
    /// `-1` marks background.
    pub face_id: Vec<i32>,
    pub barycentric: Vec<[f64; 3]>,
    pub uv: Vec<[f64; 2]>,
    /// View-space unit normals; zero at background.
    pub normal: Vec<[f64; 3]>,
    /// `+inf` at background.
    pub depth: Vec<f64>,
}

impl RasterOutput {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        RasterOutput {
            width,
            height,
            face_id: vec![-1; n],
            barycentric: vec![[0.0; 3]; n],
            uv: vec![[0.0; 2]; n],
            normal: vec![[0.0; 3]; n],
            depth: vec![f64::INFINITY; n],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn covered(&self, p: usize) -> bool {
        self.face_id[p] >= 0
    }

    /// Coverage as 0/1 values.
    pub fn coverage(&self) -> Vec<u8> {
        self.face_id.iter().map(|&f| u8::from(f >= 0)).collect()
    }

    pub fn covered_count(&self) -> usize {
        self.face_id.iter().filter(|&&f| f >= 0).count()
    }
}

struct ScreenTriangle {
    index: usize,
    p: [[f64; 2]; 3],
    z: [f64; 3],
    area: f64,
}

/// Rasterize a posed mesh. `posed_normals` are world-space; the output
/// normal image is expressed in the camera's view frame.
pub fn rasterize(
    posed_vertices: &[[f64; 3]],
    posed_normals: &[[f64; 3]],
    mesh: &CoarseMesh,
    camera: &WeakPerspectiveCamera,
    config: &RasterConfig,
) -> Result<RasterOutput> {
    let n = mesh.vertex_count();
    if posed_vertices.len() != n || posed_normals.len() != n || mesh.uvs.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "rasterize: mesh has {n} vertices, got {} positions, {} normals, {} uvs",
            posed_vertices.len(),
            posed_normals.len(),
            mesh.uvs.len()
        )));
    }
    if config.width == 0 || config.height == 0 {
        return Err(Error::invalid("raster size must be positive"));
    }
    if let Some(f) = mesh.faces.iter().find(|f| f.iter().any(|&i| i as usize >= n)) {
        return Err(Error::DimensionMismatch(format!("face {f:?} out of range")));
    }

    let projected: Vec<([f64; 2], f64)> = posed_vertices
        .iter()
        .map(|p| camera.project_point(p))
        .collect();
    let view_normals: Vec<[f64; 3]> = posed_normals.iter().map(|v| camera.rotate(v)).collect();

    let (w, h) = (config.width, config.height);
    let mut rows: Vec<Vec<ScreenTriangle>> = (0..h).map(|_| Vec::new()).collect();
    for (index, face) in mesh.faces.iter().enumerate() {
        let p = face.map(|i| projected[i as usize].0);
        let z = face.map(|i| projected[i as usize].1);
        let area = cross(sub(p[1], p[0]), sub(p[2], p[0]));
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if config.backface_culling && area < 0.0 {
            continue;
        }
        let min_y = p.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
        let max_y = p.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max);
        let Some((r0, r1)) = center_range(min_y, max_y, h) else {
            continue;
        };
        for row in &mut rows[r0..=r1] {
            row.push(ScreenTriangle { index, p, z, area });
        }
    }

    let mut out = RasterOutput::empty(w, h);
    let mut packed: Vec<PixelHit> = vec![PixelHit::default(); w * h];
    parallel::for_each_chunk_mut(&mut packed, w, |y, row_hits| {
        let cy = y as f64 + RasterConfig::PIXEL_CENTER_OFFSET;
        for tri in &rows[y] {
            let min_x = tri.p.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
            let max_x = tri.p.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
            let Some((x0, x1)) = center_range(min_x, max_x, w) else {
                continue;
            };
            for (x, hit) in row_hits.iter_mut().enumerate().take(x1 + 1).skip(x0) {
                let c = [x as f64 + RasterConfig::PIXEL_CENTER_OFFSET, cy];
                let Some(b) = barycentric(&tri.p, tri.area, c) else {
                    continue;
                };
                let z = b[0] * tri.z[0] + b[1] * tri.z[1] + b[2] * tri.z[2];
                if z < hit.depth {
                    *hit = PixelHit {
                        face: tri.index as i32,
                        bary: b,
                        depth: z,
                    };
                }
            }
        }
    });

    for (p, hit) in packed.into_iter().enumerate() {
        if hit.face < 0 {
            continue;
        }
        let face = mesh.faces[hit.face as usize];
        let b = hit.bary;
        let mut uv = [0.0; 2];
        let mut nrm = [0.0; 3];
        for k in 0..3 {
            let vi = face[k] as usize;
            for a in 0..2 {
                uv[a] += b[k] * mesh.uvs[vi][a];
            }
            for a in 0..3 {
                nrm[a] += b[k] * view_normals[vi][a];
            }
        }
        let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
        let nrm = if len > 1e-12 {
            nrm.map(|v| v / len)
        } else {
            [0.0, 0.0, -1.0]
        };
        out.face_id[p] = hit.face;
        out.barycentric[p] = b;
        out.uv[p] = uv.map(|v| v.clamp(0.0, 1.0));
        out.normal[p] = nrm;
        out.depth[p] = hit.depth;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct PixelHit {
    face: i32,
    bary: [f64; 3],
    depth: f64,
}

impl Default for PixelHit {
    fn default() -> Self {
        PixelHit {
            face: -1,
            bary: [0.0; 3],
            depth: f64::INFINITY,
        }
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Screen-space barycentrics of `c`, or `None` when `c` lies outside.
fn barycentric(p: &[[f64; 2]; 3], area: f64, c: [f64; 2]) -> Option<[f64; 3]> {
    let b0 = cross(sub(p[1], c), sub(p[2], c)) / area;
    let b1 = cross(sub(p[2], c), sub(p[0], c)) / area;
    let b2 = cross(sub(p[0], c), sub(p[1], c)) / area;
    (b0 >= 0.0 && b1 >= 0.0 && b2 >= 0.0).then_some([b0, b1, b2])
}

/// Inclusive range of pixel indices whose centers lie in `[lo, hi]`.
fn center_range(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let first = (lo - RasterConfig::PIXEL_CENTER_OFFSET).ceil().max(0.0);
    let last = (hi - RasterConfig::PIXEL_CENTER_OFFSET)
        .floor()
        .min(n as f64 - 1.0);
    (first <= last).then_some((first as usize, last as usize))
}

/// Texels with nonzero bilinear weight under any covered pixel's uv.
pub fn coverage_texels(raster: &RasterOutput, texture_resolution: (usize, usize)) -> FixedBitSet {
    let (tw, th) = texture_resolution;
    let mut set = FixedBitSet::with_capacity(tw * th);
    for (p, uv) in raster.uv.iter().enumerate() {
        if !raster.covered(p) {
            continue;
        }
        for (idx, wgt) in bilinear_footprint(*uv, tw, th) {
            if wgt > 0.0 {
                set.insert(idx);
            }
        }
    }
    set
}

/// Pixels covered by the raster, as an image-space set.
pub fn coverage_pixels(raster: &RasterOutput) -> FixedBitSet {
    let mut set = FixedBitSet::with_capacity(raster.pixel_count());
    for p in 0..raster.pixel_count() {
        if raster.covered(p) {
            set.insert(p);
        }
    }
    set
}
