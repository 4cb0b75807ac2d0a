//! Articulated proxy geometry: skeleton, skinned capsule-chain mesh, pose,
//! and linear blend skinning.

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint hierarchy in topological order (`parents[j] < j`, root is joint 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub parents: Vec<i32>,
    /// Rest transform of each joint relative to its parent.
    pub rest_transforms: Vec<Isometry3<f64>>,
}

impl Skeleton {
    pub fn new(parents: Vec<i32>, rest_transforms: Vec<Isometry3<f64>>) -> Result<Self> {
        if parents.is_empty() || parents.len() != rest_transforms.len() {
            return Err(Error::invalid("skeleton needs one rest transform per joint"));
        }
        if parents[0] != -1 {
            return Err(Error::invalid("joint 0 must be the root"));
        }
        for (j, &p) in parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::invalid(format!(
                    "joint {j} has parent {p}; parents must precede children"
                )));
            }
        }
        Ok(Skeleton {
            parents,
            rest_transforms,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Global rest-pose transform of every joint.
    pub fn rest_globals(&self) -> Vec<Isometry3<f64>> {
        let mut out: Vec<Isometry3<f64>> = Vec::with_capacity(self.joint_count());
        for (j, local) in self.rest_transforms.iter().enumerate() {
            let g = match self.parents[j] {
                -1 => *local,
                p => out[p as usize] * local,
            };
            out.push(g);
        }
        out
    }

    /// Global posed transform of every joint.
    pub fn posed_globals(&self, pose: &Pose) -> Vec<Isometry3<f64>> {
        let mut out: Vec<Isometry3<f64>> = Vec::with_capacity(self.joint_count());
        for (j, local) in self.rest_transforms.iter().enumerate() {
            let rot = Isometry3::from_parts(Translation3::identity(), pose.joint_rotations[j]);
            let g = match self.parents[j] {
                -1 => Translation3::from(pose.root_translation) * local * rot,
                p => out[p as usize] * local * rot,
            };
            out.push(g);
        }
        out
    }
}

/// Coarse triangle mesh with a fixed UV atlas and per-vertex skin weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub uvs: Vec<[f64; 2]>,
    pub vertex_normals: Vec<[f64; 3]>,
    /// `N × J`, rows sum to one.
    pub skin_weights: Vec<Vec<f64>>,
}

impl CoarseMesh {
    pub fn empty() -> Self {
        CoarseMesh {
            vertices: Vec::new(),
            faces: Vec::new(),
            uvs: Vec::new(),
            vertex_normals: Vec::new(),
            skin_weights: Vec::new(),
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Check the structural invariants against a joint count.
    pub fn validate(&self, joint_count: usize) -> Result<()> {
        let n = self.vertices.len();
        if self.uvs.len() != n || self.vertex_normals.len() != n || self.skin_weights.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "mesh has {n} vertices but {} uvs, {} normals, {} weight rows",
                self.uvs.len(),
                self.vertex_normals.len(),
                self.skin_weights.len()
            )));
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i as usize >= n)) {
            return Err(Error::invalid(format!("face {f:?} indexes past {n} vertices")));
        }
        if self
            .uvs
            .iter()
            .any(|uv| !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]))
        {
            return Err(Error::invalid("uv outside [0,1]"));
        }
        for (v, row) in self.skin_weights.iter().enumerate() {
            if row.len() != joint_count {
                return Err(Error::DimensionMismatch(format!(
                    "vertex {v} has {} weights for {joint_count} joints",
                    row.len()
                )));
            }
            let s: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("vertex {v} weights do not sum to 1")));
            }
        }
        Ok(())
    }
}

/// Per-joint local rotations plus a root translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joint_rotations: Vec<UnitQuaternion<f64>>,
    pub root_translation: Vector3<f64>,
}

impl Pose {
    pub fn identity(joint_count: usize) -> Self {
        Pose {
            joint_rotations: vec![UnitQuaternion::identity(); joint_count],
            root_translation: Vector3::zeros(),
        }
    }

    /// Build from raw `[w, x, y, z]` quaternions, normalizing each one.
    pub fn from_raw(quaternions: &[[f64; 4]], root_translation: [f64; 3]) -> Result<Self> {
        let joint_rotations = quaternions
            .iter()
            .map(|q| {
                let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
                if quat.norm() < 1e-12 || !quat.norm().is_finite() {
                    Err(Error::invalid("zero or non-finite quaternion"))
                } else {
                    Ok(UnitQuaternion::from_quaternion(quat))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Pose {
            joint_rotations,
            root_translation: Vector3::from(root_translation),
        })
    }

    /// `[w, x, y, z]` per joint.
    pub fn raw_quaternions(&self) -> Vec<[f64; 4]> {
        self.joint_rotations
            .iter()
            .map(|q| [q.w, q.i, q.j, q.k])
            .collect()
    }

    pub fn joint_count(&self) -> usize {
        self.joint_rotations.len()
    }
}

/// A chain of capsules, one joint per segment, laid out along +x.
///
/// Segment `s` owns the UV strip `u ∈ [s/S, (s+1)/S]`; `u` runs along the
/// capsule profile and `v` around its circumference. The seam column is
/// duplicated so no triangle straddles it. Vertices within `0.3·L` of an
/// interior joint blend linearly towards the neighbouring joint, reaching
/// an even split at the joint itself.
pub fn build_chain_model(
    segment_count: usize,
    segment_length: f64,
    radius: f64,
    subdivisions: usize,
) -> Result<(Skeleton, CoarseMesh)> {
    if segment_count < 1 {
        return Err(Error::invalid("segment_count must be >= 1"));
    }
    if subdivisions < 3 {
        return Err(Error::invalid("subdivisions must be >= 3"));
    }
    if !(segment_length > 0.0 && radius > 0.0) {
        return Err(Error::invalid("segment_length and radius must be positive"));
    }
    let parents = (0..segment_count as i32).map(|j| j - 1).collect();
    let rest = (0..segment_count)
        .map(|j| {
            let offset = if j == 0 { 0.0 } else { segment_length };
            Isometry3::translation(offset, 0.0, 0.0)
        })
        .collect();
    let skeleton = Skeleton::new(parents, rest)?;

    let profile = capsule_profile(segment_length, radius, (subdivisions / 4).max(2), 4);
    let arc: Vec<f64> = {
        let mut acc = vec![0.0];
        for w in profile.windows(2) {
            let d = ((w[1].axial - w[0].axial).powi(2) + (w[1].radius - w[0].radius).powi(2)).sqrt();
            acc.push(acc.last().unwrap() + d);
        }
        let total = *acc.last().unwrap();
        acc.into_iter().map(|a| a / total).collect()
    };

    let strip = 1.0 / segment_count as f64;
    let margin_u = 0.02 * strip;
    let margin_v = 0.02;
    let blend = 0.3 * segment_length;
    let cols = subdivisions + 1;

    let mut mesh = CoarseMesh::empty();
    for s in 0..segment_count {
        let base = mesh.vertices.len() as u32;
        let x0 = s as f64 * segment_length;
        for (ring, p) in profile.iter().enumerate() {
            let u = s as f64 * strip + margin_u + arc[ring] * (strip - 2.0 * margin_u);
            for k in 0..cols {
                let phi = std::f64::consts::TAU * k as f64 / subdivisions as f64;
                let (sin, cos) = phi.sin_cos();
                mesh.vertices
                    .push([x0 + p.axial, p.radius * cos, p.radius * sin]);
                mesh.vertex_normals
                    .push([p.normal_axial, p.normal_radial * cos, p.normal_radial * sin]);
                let v = margin_v + (k as f64 / subdivisions as f64) * (1.0 - 2.0 * margin_v);
                mesh.uvs.push([u, v]);
                mesh.skin_weights
                    .push(chain_weights(s, segment_count, p.axial, segment_length, blend));
            }
        }
        for ring in 0..profile.len() - 1 {
            let top_pole = profile[ring].radius == 0.0;
            let bottom_pole = profile[ring + 1].radius == 0.0;
            for k in 0..subdivisions {
                let a = base + (ring * cols + k) as u32;
                let b = a + 1;
                let c = base + ((ring + 1) * cols + k + 1) as u32;
                let d = c - 1;
                if !top_pole {
                    mesh.faces.push([a, b, c]);
                }
                if !bottom_pole {
                    mesh.faces.push([a, c, d]);
                }
            }
        }
    }
    mesh.validate(segment_count)?;
    Ok((skeleton, mesh))
}

struct ProfileSample {
    axial: f64,
    radius: f64,
    normal_axial: f64,
    normal_radial: f64,
}

fn capsule_profile(length: f64, radius: f64, cap_rings: usize, body_rings: usize) -> Vec<ProfileSample> {
    use std::f64::consts::{FRAC_PI_2, PI};
    let mut out = Vec::new();
    for i in 0..=cap_rings {
        let theta = PI - FRAC_PI_2 * i as f64 / cap_rings as f64;
        let (s, c) = theta.sin_cos();
        out.push(ProfileSample {
            axial: radius * c,
            radius: if i == 0 { 0.0 } else { radius * s },
            normal_axial: c,
            normal_radial: s,
        });
    }
    for i in 1..=body_rings {
        out.push(ProfileSample {
            axial: length * i as f64 / body_rings as f64,
            radius,
            normal_axial: 0.0,
            normal_radial: 1.0,
        });
    }
    for i in 1..=cap_rings {
        let theta = FRAC_PI_2 - FRAC_PI_2 * i as f64 / cap_rings as f64;
        let (s, c) = theta.sin_cos();
        out.push(ProfileSample {
            axial: length + radius * c,
            radius: if i == cap_rings { 0.0 } else { radius * s },
            normal_axial: c,
            normal_radial: s,
        });
    }
    out
}

fn chain_weights(segment: usize, segments: usize, axial: f64, length: f64, blend: f64) -> Vec<f64> {
    let mut w = vec![0.0; segments];
    if segment + 1 < segments && axial > length - blend {
        let t = ((axial - (length - blend)) / (2.0 * blend)).min(0.5);
        w[segment + 1] = t;
        w[segment] = 1.0 - t;
    } else if segment > 0 && axial < blend {
        let t = ((blend - axial) / (2.0 * blend)).min(0.5);
        w[segment - 1] = t;
        w[segment] = 1.0 - t;
    } else {
        w[segment] = 1.0;
    }
    w
}

/// Linear blend skinning. Returns posed positions and unit normals.
pub fn skin_mesh(
    mesh: &CoarseMesh,
    skeleton: &Skeleton,
    pose: &Pose,
) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let joints = skeleton.joint_count();
    if pose.joint_count() != joints {
        return Err(Error::DimensionMismatch(format!(
            "pose has {} joints, skeleton has {joints}",
            pose.joint_count()
        )));
    }
    if let Some(row) = mesh.skin_weights.iter().find(|r| r.len() != joints) {
        return Err(Error::DimensionMismatch(format!(
            "weight row has {} columns, skeleton has {joints} joints",
            row.len()
        )));
    }
    let skinning: Vec<Isometry3<f64>> = skeleton
        .posed_globals(pose)
        .iter()
        .zip(skeleton.rest_globals())
        .map(|(posed, rest)| posed * rest.inverse())
        .collect();
    let mut positions = Vec::with_capacity(mesh.vertex_count());
    let mut normals = Vec::with_capacity(mesh.vertex_count());
    for ((v, n), weights) in mesh
        .vertices
        .iter()
        .zip(&mesh.vertex_normals)
        .zip(&mesh.skin_weights)
    {
        let p = Point3::from(*v);
        let nv = Vector3::from(*n);
        let mut acc_p = Vector3::zeros();
        let mut acc_n = Vector3::zeros();
        for (j, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            acc_p += w * (skinning[j] * p).coords;
            acc_n += w * (skinning[j].rotation * nv);
        }
        let len = acc_n.norm();
        if len > 0.0 {
            acc_n /= len;
        }
        positions.push([acc_p.x, acc_p.y, acc_p.z]);
        normals.push([acc_n.x, acc_n.y, acc_n.z]);
    }
    Ok((positions, normals))
}
