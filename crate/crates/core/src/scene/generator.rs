//! Synthetic articulated sequences with exactly known ground truth.
//!
//! Target images come from a hidden appearance model: the true-pose proxy
//! surface painted with a procedural RGB pattern, a pose-dependent flap that
//! hangs past the proxy silhouette, and Lambertian shading. The pose stored
//! with each frame is the true pose plus uniform per-joint angle jitter.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::WeakPerspectiveCamera;
use super::model::{build_chain_model, skin_mesh, CoarseMesh, Pose, Skeleton};
use crate::error::{Error, Result};
use crate::nn::params::{seeded_rng, uniform};
use crate::parallel;
use crate::rasterizer::{rasterize, RasterConfig, RasterOutput};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub frames: usize,
    /// Frames `[0, train_frames)` are for training, the rest are held out.
    pub train_frames: usize,
    pub resolution: usize,
    pub segments: usize,
    pub segment_length: f64,
    pub radius: f64,
    pub subdivisions: usize,
    /// Half-width of the uniform per-joint angle jitter, radians.
    pub misalignment: f64,
    /// Flap length scale, scene units.
    pub overhang: f64,
    pub texture_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            frames: 240,
            train_frames: 200,
            resolution: 128,
            segments: 3,
            segment_length: 1.0,
            radius: 0.22,
            subdivisions: 12,
            misalignment: 0.03,
            overhang: 0.35,
            texture_seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("frame count must be positive"));
        }
        if self.resolution == 0 {
            return Err(Error::invalid("resolution must be positive"));
        }
        if self.train_frames > self.frames {
            return Err(Error::invalid("train_frames exceeds frames"));
        }
        if !(self.misalignment >= 0.0 && self.overhang >= 0.0) {
            return Err(Error::invalid("misalignment and overhang must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `[3, H, W]` in `[-1, 1]`.
    pub image: Tensor,
    /// `[1, H, W]` in `[0, 1]`.
    pub mask: Tensor,
    /// `[3, H, W]` in `[-1, 1]`, shared by all frames of a sequence.
    pub background: Arc<Tensor>,
    /// Tracked (proxy) pose.
    pub pose: Pose,
    pub camera: WeakPerspectiveCamera,
    pub is_keyframe_candidate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<Frame>,
    pub mesh: CoarseMesh,
    pub skeleton: Skeleton,
    pub generator_seed: u64,
    pub misalignment_magnitude: f64,
    pub config: SceneConfig,
}

impl SyntheticSequence {
    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.config.train_frames.min(self.frames.len())
    }

    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.config.train_frames.min(self.frames.len())..self.frames.len()
    }

    /// Rasterize the proxy mesh under frame `i`'s tracked pose and camera.
    pub fn proxy_raster(&self, i: usize) -> Result<RasterOutput> {
        let f = &self.frames[i];
        rasterize_pose(&self.mesh, &self.skeleton, &f.pose, &f.camera)
    }

    pub fn proxy_rasters(&self) -> Result<Vec<RasterOutput>> {
        parallel::map_range(self.frames.len(), |i| self.proxy_raster(i))
            .into_iter()
            .collect()
    }
}

pub fn rasterize_pose(
    mesh: &CoarseMesh,
    skeleton: &Skeleton,
    pose: &Pose,
    camera: &WeakPerspectiveCamera,
) -> Result<RasterOutput> {
    let (v, n) = skin_mesh(mesh, skeleton, pose)?;
    rasterize(&v, &n, mesh, camera, &RasterConfig::for_camera(camera))
}

/// Default camera framing a chain of the given proportions.
pub fn default_camera(config: &SceneConfig) -> Result<WeakPerspectiveCamera> {
    let half_extent = 0.5 * config.segments as f64 * config.segment_length
        + config.radius
        + 0.5 * config.overhang;
    let res = config.resolution as f64;
    WeakPerspectiveCamera::new(
        0.45 * res / half_extent,
        Matrix3::identity(),
        [0.5 * res, 0.5 * res],
        (config.resolution, config.resolution),
    )
}

/// Quasi-periodic joint motion. Each joint bends about z and twists about
/// its own axis; the root is translated so the chain's rest midpoint stays
/// at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionModel {
    joints: Vec<JointMotion>,
    half_length: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct JointMotion {
    bend_amp: f64,
    twist_amp: f64,
    freq: [f64; 2],
    phase: [f64; 4],
}

impl MotionModel {
    pub fn new(joint_count: usize, segment_length: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 0);
        let joints = (0..joint_count)
            .map(|j| JointMotion {
                bend_amp: if j == 0 { 0.45 } else { 0.9 },
                twist_amp: if j == 0 { PI } else { 0.8 },
                freq: [uniform(&mut rng, 0.04, 0.09), uniform(&mut rng, 0.05, 0.11)],
                phase: [
                    uniform(&mut rng, 0.0, TAU),
                    uniform(&mut rng, 0.0, TAU),
                    uniform(&mut rng, 0.0, TAU),
                    uniform(&mut rng, 0.0, TAU),
                ],
            })
            .collect();
        MotionModel {
            joints,
            half_length: 0.5 * joint_count as f64 * segment_length,
        }
    }

    /// Bend and twist angles of every joint at time `t` (frames).
    pub fn angles(&self, t: f64) -> Vec<(f64, f64)> {
        self.joints
            .iter()
            .map(|m| {
                let bend = m.bend_amp
                    * (0.7 * (m.freq[0] * t + m.phase[0]).sin()
                        + 0.3 * (2.3 * m.freq[0] * t + m.phase[1]).sin());
                let twist = m.twist_amp
                    * (0.8 * (m.freq[1] * t + m.phase[2]).sin()
                        + 0.2 * (1.7 * m.freq[1] * t + m.phase[3]).sin());
                (bend, twist)
            })
            .collect()
    }

    pub fn pose(&self, t: f64) -> Pose {
        pose_from_angles(&self.angles(t), self.half_length)
    }
}

fn pose_from_angles(angles: &[(f64, f64)], half_length: f64) -> Pose {
    let joint_rotations: Vec<UnitQuaternion<f64>> = angles
        .iter()
        .map(|&(bend, twist)| {
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), bend)
                * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), twist)
        })
        .collect();
    let root_translation = -(joint_rotations[0] * Vector3::new(half_length, 0.0, 0.0));
    Pose {
        joint_rotations,
        root_translation,
    }
}

/// Poses for `frames` steps of a procedural motion (used for retargeting).
pub fn procedural_motion(joint_count: usize, segment_length: f64, frames: usize, seed: u64) -> Vec<Pose> {
    let motion = MotionModel::new(joint_count, segment_length, seed);
    (0..frames).map(|t| motion.pose(3.0 * t as f64)).collect()
}

fn jitter_pose(pose: &Pose, magnitude: f64, rng: &mut ChaCha8Rng) -> Pose {
    let joint_rotations = pose
        .joint_rotations
        .iter()
        .map(|q| {
            let mut d = [0.0; 3];
            for v in &mut d {
                *v = if magnitude > 0.0 {
                    rng.random_range(-magnitude..=magnitude)
                } else {
                    0.0
                };
            }
            q * UnitQuaternion::from_euler_angles(d[0], d[1], d[2])
        })
        .collect();
    Pose {
        joint_rotations,
        root_translation: pose.root_translation,
    }
}

/// Procedural albedo of the hidden appearance model.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    segments: usize,
    base: Vec<[f64; 3]>,
    accent: Vec<[f64; 3]>,
    freq: Vec<(f64, f64)>,
    flap_colors: [[f64; 3]; 2],
}

impl Appearance {
    pub fn new(segments: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 1);
        let mut color = |lo: f64, hi: f64| {
            [
                uniform(&mut rng, lo, hi),
                uniform(&mut rng, lo, hi),
                uniform(&mut rng, lo, hi),
            ]
        };
        let base = (0..segments).map(|_| color(0.35, 0.9)).collect();
        let accent = (0..segments).map(|_| color(0.05, 0.5)).collect();
        let flap_colors = [color(0.5, 0.95), color(0.1, 0.45)];
        let freq = (0..segments)
            .map(|_| {
                (
                    rng.random_range(2..=4) as f64,
                    rng.random_range(1..=3) as f64,
                )
            })
            .collect();
        Appearance {
            segments,
            base,
            accent,
            freq,
            flap_colors,
        }
    }

    /// Body albedo in `[0, 1]³` at atlas coordinates `uv`.
    pub fn body_albedo(&self, uv: [f64; 2]) -> [f64; 3] {
        let s = ((uv[0] * self.segments as f64).floor() as usize).min(self.segments - 1);
        let local = uv[0] * self.segments as f64 - s as f64;
        let (fa, fv) = self.freq[s];
        let stripe = (TAU * fa * local).sin() * (TAU * fv * uv[1]).cos();
        let band = if (TAU * 2.0 * fv * uv[1]).sin() > 0.6 { 0.35 } else { 0.0 };
        let t = (0.5 + 0.5 * stripe + band).clamp(0.0, 1.0);
        mix(self.base[s], self.accent[s], t)
    }

    /// Flap albedo at parameter `(along, across)` in `[0, 1]²`.
    pub fn flap_albedo(&self, along: f64, across: f64) -> [f64; 3] {
        let t = 0.5 + 0.5 * (TAU * 3.0 * along).sin() * (1.0 - 0.5 * across);
        mix(self.flap_colors[0], self.flap_colors[1], t)
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// View-space direction towards the light.
const LIGHT: [f64; 3] = [-0.4, -0.5, -0.77];
const AMBIENT: f64 = 0.3;

fn shade(albedo: [f64; 3], normal: [f64; 3]) -> [f64; 3] {
    let len = (LIGHT[0] * LIGHT[0] + LIGHT[1] * LIGHT[1] + LIGHT[2] * LIGHT[2]).sqrt();
    let ndl = (normal[0] * LIGHT[0] + normal[1] * LIGHT[1] + normal[2] * LIGHT[2]) / len;
    let k = AMBIENT + (1.0 - AMBIENT) * ndl.max(0.0);
    albedo.map(|a| a * k)
}

/// Static background, smooth colour gradient with low-frequency blobs.
pub fn make_background(resolution: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed, 2);
    let c0 = [
        uniform(&mut rng, 0.1, 0.4),
        uniform(&mut rng, 0.1, 0.4),
        uniform(&mut rng, 0.1, 0.4),
    ];
    let c1 = [
        uniform(&mut rng, 0.2, 0.6),
        uniform(&mut rng, 0.2, 0.6),
        uniform(&mut rng, 0.2, 0.6),
    ];
    let fx = uniform(&mut rng, 0.5, 1.5);
    let fy = uniform(&mut rng, 0.5, 1.5);
    let ph = uniform(&mut rng, 0.0, TAU);
    let n = resolution;
    let mut out = Tensor::zeros(&[3, n, n]);
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let blob = 0.5 + 0.5 * (TAU * fx * u + ph).sin() * (TAU * fy * v).cos();
            let t = (0.6 * v + 0.4 * blob).clamp(0.0, 1.0);
            let c = mix(c0, c1, t);
            for ch in 0..3 {
                out.data_mut()[(ch * n + y) * n + x] = 2.0 * c[ch] - 1.0;
            }
        }
    }
    out
}

struct FlapGeometry {
    vertices: Vec<[f64; 3]>,
    params: Vec<[f64; 2]>,
    faces: Vec<[u32; 3]>,
}

const FLAP_COLUMNS: usize = 6;

/// Flap hanging off the middle segment. Its swing and length follow that
/// segment's own bend angle.
fn flap_geometry(
    skeleton: &Skeleton,
    pose: &Pose,
    config: &SceneConfig,
    bend: f64,
) -> Option<FlapGeometry> {
    if config.overhang <= 0.0 {
        return None;
    }
    let s = config.segments / 2;
    let globals = skeleton.posed_globals(pose);
    let start = globals[s].translation.vector;
    let axis = globals[s].rotation * Vector3::x();
    let dir2 = Vector3::new(axis.x, axis.y, 0.0);
    let len2 = dir2.norm();
    if len2 < 1e-6 {
        return None;
    }
    let e = dir2 / len2;
    let side = Vector3::new(e.y, -e.x, 0.0);
    let swing = 0.6 * bend;
    let length = config.overhang * (0.7 + 0.3 * (2.0 * bend).cos());
    let out_dir = side * swing.cos() + e * swing.sin();
    let (a0, a1) = (0.2 * config.segment_length, 0.8 * config.segment_length);
    let mut vertices = Vec::new();
    let mut params = Vec::new();
    for i in 0..=FLAP_COLUMNS {
        let t = i as f64 / FLAP_COLUMNS as f64;
        let a = a0 + (a1 - a0) * t;
        let root = start + axis * a + side * (0.8 * config.radius);
        // the flap tapers towards its ends
        let reach = length * (1.0 - 0.6 * (2.0 * t - 1.0).powi(2));
        let tip = root + out_dir * (config.radius * 0.2 + reach);
        let z = start.z;
        vertices.push([root.x, root.y, z]);
        vertices.push([tip.x, tip.y, z]);
        params.push([t, 0.0]);
        params.push([t, 1.0]);
    }
    let mut faces = Vec::new();
    for i in 0..FLAP_COLUMNS as u32 {
        let (a, b, c, d) = (2 * i, 2 * i + 1, 2 * i + 3, 2 * i + 2);
        faces.push([a, b, c]);
        faces.push([a, c, d]);
    }
    Some(FlapGeometry {
        vertices,
        params,
        faces,
    })
}

/// Render the hidden appearance model under the true pose.
fn render_ground_truth(
    mesh: &CoarseMesh,
    skeleton: &Skeleton,
    true_pose: &Pose,
    bends: &[(f64, f64)],
    camera: &WeakPerspectiveCamera,
    config: &SceneConfig,
    appearance: &Appearance,
    background: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (mut verts, mut normals) = skin_mesh(mesh, skeleton, true_pose)?;
    let mut combined = CoarseMesh {
        vertices: Vec::new(),
        faces: mesh.faces.clone(),
        uvs: mesh.uvs.clone(),
        vertex_normals: Vec::new(),
        skin_weights: Vec::new(),
    };
    let body_faces = mesh.faces.len();
    let body_verts = verts.len() as u32;
    let flap = flap_geometry(skeleton, true_pose, config, bends[config.segments / 2].0);
    if let Some(flap) = &flap {
        for (v, p) in flap.vertices.iter().zip(&flap.params) {
            verts.push(*v);
            normals.push([0.0, 0.0, -1.0]);
            combined.uvs.push(*p);
        }
        combined
            .faces
            .extend(flap.faces.iter().map(|f| f.map(|i| i + body_verts)));
    }
    combined.vertices = verts.clone();
    combined.vertex_normals = normals.clone();
    let raster = rasterize(&verts, &normals, &combined, camera, &RasterConfig::for_camera(camera))?;

    let (w, h) = camera.image_size;
    let plane = w * h;
    let mut image = background.clone();
    let mut mask = Tensor::zeros(&[1, h, w]);
    for p in 0..plane {
        let f = raster.face_id[p];
        if f < 0 {
            continue;
        }
        let rgb = if (f as usize) < body_faces {
            shade(appearance.body_albedo(raster.uv[p]), raster.normal[p])
        } else {
            let [along, across] = raster.uv[p];
            shade(appearance.flap_albedo(along, across), [0.0, 0.0, -1.0])
        };
        for ch in 0..3 {
            image.data_mut()[ch * plane + p] = 2.0 * rgb[ch] - 1.0;
        }
        mask.data_mut()[p] = 1.0;
    }
    Ok((image, mask))
}

/// Generate a sequence. Deterministic in `(config, seed)`; frames draw from
/// independent random streams so they can be produced in parallel.
pub fn generate_sequence(config: &SceneConfig, seed: u64) -> Result<SyntheticSequence> {
    config.validate()?;
    let (skeleton, mesh) = build_chain_model(
        config.segments,
        config.segment_length,
        config.radius,
        config.subdivisions,
    )?;
    let camera = default_camera(config)?;
    let motion = MotionModel::new(config.segments, config.segment_length, seed);
    let appearance = Appearance::new(config.segments, config.texture_seed);
    let background = Arc::new(make_background(config.resolution, config.texture_seed));

    let frames = parallel::map_range(config.frames, |i| -> Result<Frame> {
        let mut rng = seeded_rng(seed, 16 + i as u64);
        let t = 3.0 * i as f64;
        let angles = motion.angles(t);
        let true_pose = pose_from_angles(&angles, motion.half_length);
        let tracked = jitter_pose(&true_pose, config.misalignment, &mut rng);
        let (image, mask) = render_ground_truth(
            &mesh,
            &skeleton,
            &true_pose,
            &angles,
            &camera,
            config,
            &appearance,
            &background,
        )?;
        Ok(Frame {
            image,
            mask,
            background: Arc::clone(&background),
            pose: tracked,
            camera: camera.clone(),
            is_keyframe_candidate: i < config.train_frames,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticSequence {
        frames,
        mesh,
        skeleton,
        generator_seed: seed,
        misalignment_magnitude: config.misalignment,
        config: config.clone(),
    })
}

/// Intersection-over-union of two binary masks (values > 0.5 count as set).
pub fn mask_iou(a: &[f64], b: &[f64]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x > 0.5, *y > 0.5);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean IoU between each frame's proxy coverage and ground-truth mask.
pub fn silhouette_iou(sequence: &SyntheticSequence) -> Result<f64> {
    let rasters = sequence.proxy_rasters()?;
    let total: f64 = rasters
        .iter()
        .zip(&sequence.frames)
        .map(|(r, f)| {
            let cov: Vec<f64> = r.coverage().iter().map(|&c| c as f64).collect();
            mask_iou(&cov, f.mask.data())
        })
        .sum();
    Ok(total / rasters.len() as f64)
}
