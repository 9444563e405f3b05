//! Posed image sets in the NeRF "Blender" layout: `transforms_<split>.json`
//! with `camera_angle_x` and per-frame `file_path` / `transform_matrix`.
//! Frames may also name ground-truth `normal_path` and `opacity_path`
//! PFMs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nmf_core::io::{read_pfm, read_png};
use nmf_core::math::Vec3;
use nmf_core::optim::train::TrainView;
use nmf_core::render::Camera;
use nmf_core::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameJson {
    pub file_path: String,
    pub transform_matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opacity_path: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformsJson {
    pub camera_angle_x: f64,
    pub frames: Vec<FrameJson>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image_path: PathBuf,
    pub camera: Camera,
    /// sRGB in `[0, 1]`, alpha composited over the background.
    pub rgb: Vec<f64>,
    pub normals: Option<Vec<f64>>,
    pub opacity: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub split: String,
    pub camera_angle_x: f64,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Frame>,
}

impl SceneDataset {
    pub fn train_views(&self) -> Vec<TrainView> {
        self.frames
            .iter()
            .map(|f| TrainView {
                camera: f.camera.clone(),
                rgb: f.rgb.clone(),
            })
            .collect()
    }
}

fn transforms_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "transforms",
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Checks a camera-to-world matrix; a rotation block off by more than
/// 1e-2 from orthonormal is re-orthonormalized with a warning.
pub fn validate_pose(path: &Path, frame: usize, m: &[Vec<f64>]) -> Result<[[f64; 4]; 4]> {
    if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
        return Err(transforms_err(path, format!("frame {frame}: transform_matrix is not 4x4")));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(transforms_err(path, format!("frame {frame}: non-finite transform_matrix")));
    }
    let mut pose = [[0.0; 4]; 4];
    for (r, row) in m.iter().enumerate() {
        pose[r].copy_from_slice(row);
    }
    let col = |c: usize| Vec3::new(pose[0][c], pose[1][c], pose[2][c]);
    let cols = [col(0), col(1), col(2)];
    let mut dev = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((cols[i].dot(cols[j]) - target).abs());
        }
    }
    if dev > 1e-2 {
        log::warn!("{}: frame {frame} rotation deviates from orthonormal by {dev:.3e}; re-orthonormalizing", path.display());
        let x = cols[0].normalize();
        let y = (cols[1] - x * x.dot(cols[1])).normalize();
        let z = x.cross(y);
        let z = if z.dot(cols[2]) < 0.0 { -z } else { z };
        for (c, v) in [x, y, z].iter().enumerate() {
            pose[0][c] = v.x;
            pose[1][c] = v.y;
            pose[2][c] = v.z;
        }
    }
    Ok(pose)
}

pub fn read_transforms(path: &Path) -> Result<TransformsJson> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| transforms_err(path, e.to_string()))
}

fn resolve(dir: &Path, rel: &str, default_ext: &str) -> PathBuf {
    let p = dir.join(rel.trim_start_matches("./"));
    if p.extension().is_none() {
        p.with_extension(default_ext)
    } else {
        p
    }
}

/// Cameras of a transforms file at the given image size.
pub fn load_cameras(path: &Path, width: usize, height: usize) -> Result<Vec<(String, Camera)>> {
    let t = read_transforms(path)?;
    t.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let pose = validate_pose(path, i, &f.transform_matrix)?;
            Ok((
                f.file_path.clone(),
                Camera {
                    width,
                    height,
                    camera_angle_x: t.camera_angle_x,
                    pose,
                },
            ))
        })
        .collect()
}

pub fn load_scene(dir: &Path, split: &str, background: [f64; 3]) -> Result<SceneDataset> {
    let tpath = dir.join(format!("transforms_{split}.json"));
    let t = read_transforms(&tpath)?;
    if t.frames.is_empty() {
        return Err(transforms_err(&tpath, "no frames"));
    }
    let mut frames = Vec::with_capacity(t.frames.len());
    let mut size: Option<(usize, usize)> = None;
    for (i, f) in t.frames.iter().enumerate() {
        let pose = validate_pose(&tpath, i, &f.transform_matrix)?;
        let image_path = resolve(dir, &f.file_path, "png");
        if !image_path.exists() {
            return Err(Error::io(&image_path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let (w, h, rgb) = read_png(&image_path, background)?;
        match size {
            None => size = Some((w, h)),
            Some(s) if s != (w, h) => {
                return Err(Error::Format {
                    kind: "image",
                    path: image_path,
                    reason: format!("size {w}x{h} differs from {}x{}", s.0, s.1),
                })
            }
            _ => {}
        }
        let aux = |rel: &Option<String>| -> Result<Option<Vec<f64>>> {
            let Some(rel) = rel else { return Ok(None) };
            let p = resolve(dir, rel, "pfm");
            let (pw, ph, v) = read_pfm(&p)?;
            if (pw, ph) != (w, h) {
                return Err(Error::Format {
                    kind: "pfm",
                    path: p,
                    reason: format!("size {pw}x{ph} differs from image {w}x{h}"),
                });
            }
            Ok(Some(v))
        };
        let normals = aux(&f.normal_path)?;
        let opacity = aux(&f.opacity_path)?.map(|v| v.chunks_exact(3).map(|c| c[0]).collect());
        frames.push(Frame {
            image_path,
            camera: Camera {
                width: w,
                height: h,
                camera_angle_x: t.camera_angle_x,
                pose,
            },
            rgb,
            normals,
            opacity,
        });
    }
    let (width, height) = size.unwrap_or((0, 0));
    Ok(SceneDataset {
        split: split.to_string(),
        camera_angle_x: t.camera_angle_x,
        width,
        height,
        frames,
    })
}

pub fn write_transforms(path: &Path, t: &TransformsJson) -> Result<()> {
    let text = serde_json::to_string_pretty(t).map_err(|e| transforms_err(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn pose_rows(pose: &[[f64; 4]; 4]) -> Vec<Vec<f64>> {
    pose.iter().map(|r| r.to_vec()).collect()
}
