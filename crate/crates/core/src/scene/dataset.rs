//! On-disk sequence layout.
//!
//! ```text
//! meta.json        scene config, seed, frame count
//! mesh.json        proxy mesh and skeleton
//! background.png
//! frames/000000.png
//! masks/000000.png
//! poses.jsonl      one tracked pose and camera per line
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::camera::WeakPerspectiveCamera;
use super::generator::{Frame, SceneConfig, SyntheticSequence};
use super::model::{CoarseMesh, Pose, Skeleton};
use crate::error::{Error, Result};
use crate::imageio;
use crate::parallel;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: SceneConfig,
    generator_seed: u64,
    frame_count: usize,
}

#[derive(Serialize, Deserialize)]
struct MeshFile {
    skeleton: Skeleton,
    mesh: CoarseMesh,
}

#[derive(Serialize, Deserialize)]
struct PoseLine {
    #[serde(default)]
    frame: usize,
    /// `[w, x, y, z]` per joint.
    quaternions: Vec<[f64; 4]>,
    root_translation: [f64; 3],
    camera: WeakPerspectiveCamera,
    #[serde(default)]
    keyframe_candidate: bool,
}

fn frame_name(i: usize) -> String {
    format!("{i:06}.png")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)
        .map_err(|e| Error::format("json", format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::format("json", format!("{}: {e}", path.display())))
}

pub fn save_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    for sub in ["frames", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    write_json(
        &dir.join("meta.json"),
        &Meta {
            config: seq.config.clone(),
            generator_seed: seq.generator_seed,
            frame_count: seq.frames.len(),
        },
    )?;
    write_json(
        &dir.join("mesh.json"),
        &MeshFile {
            skeleton: seq.skeleton.clone(),
            mesh: seq.mesh.clone(),
        },
    )?;
    if let Some(f) = seq.frames.first() {
        imageio::save_rgb(&f.background, &dir.join("background.png"))?;
    }
    let results = parallel::map_range(seq.frames.len(), |i| -> Result<()> {
        let f = &seq.frames[i];
        imageio::save_rgb(&f.image, &dir.join("frames").join(frame_name(i)))?;
        imageio::save_gray(&f.mask, &dir.join("masks").join(frame_name(i)))
    });
    results.into_iter().collect::<Result<()>>()?;

    let path = dir.join("poses.jsonl");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for (i, f) in seq.frames.iter().enumerate() {
        let line = PoseLine {
            frame: i,
            quaternions: f.pose.raw_quaternions(),
            root_translation: f.pose.root_translation.into(),
            camera: f.camera.clone(),
            keyframe_candidate: f.is_keyframe_candidate,
        };
        let text = serde_json::to_string(&line).map_err(|e| Error::format("pose", e.to_string()))?;
        writeln!(w, "{text}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Read a pose stream in the `poses.jsonl` format. Only `quaternions`,
/// `root_translation` and `camera` are required on each line.
pub fn load_poses(path: &Path) -> Result<Vec<(Pose, WeakPerspectiveCamera)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PoseLine = serde_json::from_str(&line)
            .map_err(|e| Error::format("pose", format!("line {}: {e}", n + 1)))?;
        out.push((Pose::from_raw(&p.quaternions, p.root_translation)?, p.camera));
    }
    Ok(out)
}

pub fn load_sequence(dir: &Path) -> Result<SyntheticSequence> {
    let meta: Meta = read_json(&dir.join("meta.json"))?;
    let mesh_file: MeshFile = read_json(&dir.join("mesh.json"))?;
    mesh_file.mesh.validate(mesh_file.skeleton.joint_count())?;
    let background = Arc::new(imageio::load_rgb(&dir.join("background.png"))?);

    let path = dir.join("poses.jsonl");
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut poses = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PoseLine = serde_json::from_str(&line)
            .map_err(|e| Error::format("pose", format!("line {}: {e}", n + 1)))?;
        if p.frame != poses.len() {
            return Err(Error::format("pose", format!("line {}: frame {} out of order", n + 1, p.frame)));
        }
        if p.quaternions.len() != mesh_file.skeleton.joint_count() {
            return Err(Error::DimensionMismatch(format!(
                "pose {} has {} joints, skeleton has {}",
                p.frame,
                p.quaternions.len(),
                mesh_file.skeleton.joint_count()
            )));
        }
        poses.push(p);
    }
    if poses.len() != meta.frame_count {
        return Err(Error::format(
            "dataset",
            format!("{} poses for {} frames", poses.len(), meta.frame_count),
        ));
    }

    let frames = parallel::map_range(poses.len(), |i| -> Result<Frame> {
        let p = &poses[i];
        let image = imageio::load_rgb(&dir.join("frames").join(frame_name(i)))?;
        let mask = imageio::load_gray(&dir.join("masks").join(frame_name(i)))?;
        let (w, h) = p.camera.image_size;
        if image.shape() != [3, h, w] || mask.shape() != [1, h, w] {
            return Err(Error::DimensionMismatch(format!(
                "frame {i} does not match camera size {w}x{h}"
            )));
        }
        Ok(Frame {
            image,
            mask,
            background: Arc::clone(&background),
            pose: Pose::from_raw(&p.quaternions, p.root_translation)?,
            camera: p.camera.clone(),
            is_keyframe_candidate: p.keyframe_candidate,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticSequence {
        frames,
        mesh: mesh_file.mesh,
        skeleton: mesh_file.skeleton,
        generator_seed: meta.generator_seed,
        misalignment_magnitude: meta.config.misalignment,
        config: meta.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_sequence;

    #[test]
    fn save_load_round_trip() {
        let cfg = SceneConfig {
            frames: 3,
            train_frames: 2,
            resolution: 32,
            ..SceneConfig::default()
        };
        let seq = generate_sequence(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.mesh, seq.mesh);
        assert_eq!(back.skeleton, seq.skeleton);
        assert_eq!(back.config, seq.config);
        for (a, b) in back.frames.iter().zip(&seq.frames) {
            assert_eq!(a.mask, b.mask);
            assert!(a.image.max_abs_diff(&b.image) <= 1.0 / 255.0 + 1e-9);
            assert_eq!(a.camera, b.camera);
            assert_eq!(a.is_keyframe_candidate, b.is_keyframe_candidate);
            for (qa, qb) in a.pose.joint_rotations.iter().zip(&b.pose.joint_rotations) {
                assert!(qa.angle_to(qb) < 1e-9);
            }
        }
    }

    #[test]
    fn missing_directory_is_io_error() {
        let err = load_sequence(Path::new("/nonexistent/anr")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
