//! Analytic two-sphere scene rendered into a posed dataset with exact
//! normals, coverage and the lighting used.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use nmf_core::field::Aabb;
use nmf_core::io::{write_pfm, write_png};
use nmf_core::materials::MaterialSample;
use nmf_core::math::{dir_to_spherical, spherical_to_dir, Vec3};
use nmf_core::qmc::hash_uniform;
use nmf_core::render::{Camera, RenderConfig, Renderer};
use nmf_core::scene::{Sphere, SphereScene};
use nmf_core::envlight::EnvironmentMap;
use nmf_core::{Error, Result};

use crate::dataset::{pose_rows, write_transforms, FrameJson, TransformsJson};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub spp: usize,
    pub env_height: usize,
    pub env_width: usize,
    pub camera_distance: f64,
    pub camera_angle_x: f64,
    /// Supersampling per axis for reference normals and coverage.
    pub coverage_samples: usize,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            width: 64,
            height: 64,
            n_train: 16,
            n_test: 4,
            spp: 64,
            env_height: 64,
            env_width: 128,
            camera_distance: 4.0,
            camera_angle_x: 0.6,
            coverage_samples: 4,
            seed: 0,
            render: RenderConfig {
                m: 8,
                r: 8,
                max_samples: 256,
                ..Default::default()
            },
        }
    }
}

/// A bright colored spot in the environment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub theta: f64,
    pub phi: f64,
    /// Angular standard deviation, radians.
    pub width: f64,
    pub color: [f64; 3],
}

impl Landmark {
    pub fn dir(&self) -> Vec3 {
        spherical_to_dir(self.theta, self.phi)
    }
}

pub fn landmarks() -> Vec<Landmark> {
    let deg = PI / 180.0;
    [
        (60.0, 20.0, [6.0, 0.6, 0.4]),
        (55.0, 110.0, [0.5, 5.0, 0.6]),
        (65.0, 200.0, [0.5, 0.8, 6.0]),
        (50.0, 290.0, [5.0, 4.5, 0.5]),
    ]
    .iter()
    .map(|&(t, p, color)| Landmark {
        theta: t * deg,
        phi: p * deg,
        width: 7.0 * deg,
        color,
    })
    .collect()
}

/// Sky gradient over a darker ground, without landmarks.
pub fn sky_radiance(d: Vec3) -> Vec3 {
    if d.z >= 0.0 {
        let s = d.z.sqrt();
        Vec3::new(0.55, 0.65, 0.8) * (1.0 - s) + Vec3::new(0.25, 0.4, 0.9) * s
    } else {
        Vec3::new(0.3, 0.26, 0.22)
    }
}

pub fn landmark_radiance(l: &Landmark, d: Vec3) -> Vec3 {
    let a = l.dir().dot(d).clamp(-1.0, 1.0).acos();
    Vec3::from_array(l.color) * (-0.5 * (a / l.width).powi(2)).exp()
}

/// Equirectangular radiance (row-major, 3 per pixel) of the sky plus the
/// given landmarks, averaged over 2x2 sub-pixel directions.
pub fn sky_env(h: usize, w: usize, marks: &[Landmark], with_sky: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let mut acc = Vec3::ZERO;
            for sy in 0..2 {
                for sx in 0..2 {
                    let theta = (r as f64 + 0.25 + 0.5 * sy as f64) * PI / h as f64;
                    let phi = (c as f64 + 0.25 + 0.5 * sx as f64) * 2.0 * PI / w as f64;
                    let d = spherical_to_dir(theta, phi);
                    if with_sky {
                        acc += sky_radiance(d);
                    }
                    for l in marks {
                        acc += landmark_radiance(l, d);
                    }
                }
            }
            out.extend_from_slice(&(acc * 0.25).to_array());
        }
    }
    out
}

/// Rotates an equirectangular map about the vertical axis by `shift`
/// columns: a feature at column `c` moves to `c + shift`.
pub fn rotate_env_columns(h: usize, w: usize, rgb: &[f64], shift: isize) -> Vec<f64> {
    assert_eq!(rgb.len(), h * w * 3);
    let mut out = vec![0.0; rgb.len()];
    for r in 0..h {
        for c in 0..w {
            let dst = (c as isize + shift).rem_euclid(w as isize) as usize;
            out[(r * w + dst) * 3..(r * w + dst) * 3 + 3].copy_from_slice(&rgb[(r * w + c) * 3..(r * w + c) * 3 + 3]);
        }
    }
    out
}

pub fn two_sphere_scene() -> SphereScene {
    SphereScene {
        spheres: vec![
            Sphere {
                center: Vec3::new(-0.45, 0.0, 0.0),
                radius: 0.38,
                material: MaterialSample {
                    alpha: 0.9,
                    albedo: Vec3::new(0.75, 0.45, 0.3),
                    f0: Vec3::splat(0.04),
                    features: vec![],
                },
            },
            Sphere {
                center: Vec3::new(0.45, 0.0, 0.0),
                radius: 0.38,
                material: MaterialSample {
                    alpha: 0.08,
                    albedo: Vec3::splat(0.05),
                    f0: Vec3::splat(0.8),
                    features: vec![],
                },
            },
        ],
        bbox: Aabb::cube(1.0),
        sigma_max: 300.0,
        shell: 0.01,
    }
}

/// Camera positions on a spiral over the upper hemisphere looking at the
/// origin; `offset` in `[0, 1)` shifts the azimuths.
pub fn spiral_cameras(n: usize, offset: f64, cfg: &SyntheticConfig) -> Vec<Camera> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let f = (i as f64 + 0.5) / n as f64;
            let elev = (12.0 + 48.0 * f).to_radians();
            let az = golden * i as f64 + offset * 2.0 * PI;
            let eye = Vec3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()) * cfg.camera_distance;
            Camera::look_at(cfg.width, cfg.height, cfg.camera_angle_x, eye, Vec3::ZERO, Vec3::Z)
        })
        .collect()
}

/// Nearest sphere hit along a ray against the radius-level surfaces.
pub fn intersect_spheres(scene: &SphereScene, origin: Vec3, dir: Vec3) -> Option<(usize, f64, Vec3)> {
    let mut best: Option<(usize, f64, Vec3)> = None;
    for (i, s) in scene.spheres.iter().enumerate() {
        let oc = origin - s.center;
        let b = oc.dot(dir);
        let c = oc.dot(oc) - s.radius * s.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            continue;
        }
        let t = -b - disc.sqrt();
        if t > 0.0 && best.is_none_or(|(_, bt, _)| t < bt) {
            best = Some((i, t, (origin + dir * t - s.center).normalize()));
        }
    }
    best
}

/// Reference normals (unit, zero on background), coverage in `[0, 1]` and
/// the index of the sphere seen through each pixel center (`-1` for none).
pub struct Reference {
    pub normals: Vec<f64>,
    pub opacity: Vec<f64>,
    pub sphere: Vec<i32>,
}

pub fn reference_geometry(scene: &SphereScene, cam: &Camera, ss: usize) -> Reference {
    let (w, h) = (cam.width, cam.height);
    let ss = ss.max(1);
    let mut r = Reference {
        normals: Vec::with_capacity(w * h * 3),
        opacity: Vec::with_capacity(w * h),
        sphere: Vec::with_capacity(w * h),
    };
    for y in 0..h {
        for x in 0..w {
            let mut n = Vec3::ZERO;
            let mut hits = 0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let ray = cam.gen_ray(x, y, (sx as f64 + 0.5) / ss as f64, (sy as f64 + 0.5) / ss as f64);
                    if let Some((_, _, nn)) = intersect_spheres(scene, ray.origin, ray.dir) {
                        n += nn;
                        hits += 1;
                    }
                }
            }
            r.normals.extend_from_slice(&n.normalize().to_array());
            r.opacity.push(hits as f64 / (ss * ss) as f64);
            let ray = cam.gen_ray(x, y, 0.5, 0.5);
            r.sphere.push(intersect_spheres(scene, ray.origin, ray.dir).map_or(-1, |(i, _, _)| i as i32));
        }
    }
    r
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dir: PathBuf,
    pub env_path: PathBuf,
}

fn split_frames(
    dir: &Path,
    split: &str,
    cams: &[Camera],
    scene: &SphereScene,
    env: &EnvironmentMap,
    cfg: &SyntheticConfig,
    view_base: u64,
) -> Result<TransformsJson> {
    fs::create_dir_all(dir.join(split)).map_err(|e| Error::io(dir.join(split), e))?;
    let renderer = Renderer::new(scene, env, &cfg.render);
    let mut frames = Vec::new();
    for (i, cam) in cams.iter().enumerate() {
        let img = renderer.render_image(cam, cfg.spp, view_base + i as u64);
        let reference = reference_geometry(scene, cam, cfg.coverage_samples);
        let stem = format!("{split}/r_{i}");
        write_png(&dir.join(format!("{stem}.png")), cam.width, cam.height, &img.rgb)?;
        write_pfm(&dir.join(format!("{stem}_normal.pfm")), cam.width, cam.height, &reference.normals)?;
        let op3: Vec<f64> = reference.opacity.iter().flat_map(|&a| [a; 3]).collect();
        write_pfm(&dir.join(format!("{stem}_opacity.pfm")), cam.width, cam.height, &op3)?;
        frames.push(FrameJson {
            file_path: format!("./{stem}"),
            transform_matrix: pose_rows(&cam.pose),
            normal_path: Some(format!("./{stem}_normal.pfm")),
            opacity_path: Some(format!("./{stem}_opacity.pfm")),
        });
    }
    Ok(TransformsJson {
        camera_angle_x: cfg.camera_angle_x,
        frames,
    })
}

/// The environment of the synthetic scene.
pub fn synthetic_env(cfg: &SyntheticConfig) -> (Vec<f64>, EnvironmentMap) {
    let rgb = sky_env(cfg.env_height, cfg.env_width, &landmarks(), true);
    let env = EnvironmentMap::from_radiance(cfg.env_height, cfg.env_width, &rgb);
    (rgb, env)
}

/// Renders and writes the dataset: `transforms_{train,test}.json`, PNG
/// images, reference normal and opacity PFMs, and `env.pfm`.
pub fn make_synthetic(out: &Path, cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let scene = two_sphere_scene();
    let (rgb, env) = synthetic_env(cfg);
    let env_path = out.join("env.pfm");
    write_pfm(&env_path, cfg.env_width, cfg.env_height, &rgb)?;
    let jitter = hash_uniform(cfg.seed, &[0x5eed]);
    let train = spiral_cameras(cfg.n_train, jitter, cfg);
    let test = spiral_cameras(cfg.n_test, jitter + 0.5 / cfg.n_test.max(1) as f64, cfg);
    let t = split_frames(out, "train", &train, &scene, &env, cfg, 0)?;
    write_transforms(&out.join("transforms_train.json"), &t)?;
    let t = split_frames(out, "test", &test, &scene, &env, cfg, 1 << 20)?;
    write_transforms(&out.join("transforms_test.json"), &t)?;
    Ok(SyntheticDataset {
        dir: out.to_path_buf(),
        env_path,
    })
}

/// Luminance-weighted mean reflection direction over the pixels of
/// `sphere` whose luminance exceeds `threshold` times the maximum there.
/// Reflections use the reference normals.
pub fn reflection_centroid(
    cam: &Camera,
    linear: &[f64],
    reference: &Reference,
    sphere: i32,
    threshold: f64,
) -> Option<Vec3> {
    let lum = |i: usize| 0.2126 * linear[i * 3] + 0.7152 * linear[i * 3 + 1] + 0.0722 * linear[i * 3 + 2];
    let idx: Vec<usize> = (0..cam.width * cam.height).filter(|&i| reference.sphere[i] == sphere).collect();
    let max = idx.iter().map(|&i| lum(i)).fold(0.0, f64::max);
    if max <= 0.0 {
        return None;
    }
    let acc = idx
        .par_iter()
        .filter(|&&i| lum(i) >= threshold * max)
        .map(|&i| {
            let (x, y) = (i % cam.width, i / cam.width);
            let d = cam.gen_ray(x, y, 0.5, 0.5).dir;
            let n = Vec3::new(reference.normals[i * 3], reference.normals[i * 3 + 1], reference.normals[i * 3 + 2]);
            (d - n * (2.0 * d.dot(n))) * (lum(i) - threshold * max)
        })
        .reduce(|| Vec3::ZERO, |a, b| a + b);
    (acc.length() > 0.0).then(|| acc.normalize())
}

/// Azimuth of a direction in degrees, for reporting.
pub fn azimuth_deg(d: Vec3) -> f64 {
    dir_to_spherical(d).1.to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_rotation_moves_landmark_a_quarter_turn() {
        let (h, w) = (16, 32);
        let l = landmarks()[0];
        let rgb = sky_env(h, w, &[l], false);
        let rot = rotate_env_columns(h, w, &rgb, (w / 4) as isize);
        let rotated = Landmark {
            phi: l.phi + PI / 2.0,
            ..l
        };
        let expect = sky_env(h, w, &[rotated], false);
        // shifting columns by w/4 is exact for pixel-aligned maps
        for (a, b) in rot.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reference_normals_are_radial() {
        let cfg = SyntheticConfig {
            width: 24,
            height: 24,
            ..Default::default()
        };
        let scene = two_sphere_scene();
        let cam = &spiral_cameras(3, 0.1, &cfg)[1];
        let r = reference_geometry(&scene, cam, 1);
        let mut checked = 0;
        for i in 0..24 * 24 {
            if r.sphere[i] < 0 {
                continue;
            }
            let s = &scene.spheres[r.sphere[i] as usize];
            let ray = cam.gen_ray(i % 24, i / 24, 0.5, 0.5);
            let (_, t, _) = intersect_spheres(&scene, ray.origin, ray.dir).unwrap();
            let radial = (ray.at(t) - s.center).normalize();
            let n = Vec3::new(r.normals[i * 3], r.normals[i * 3 + 1], r.normals[i * 3 + 2]);
            assert!(n.dot(radial).clamp(-1.0, 1.0).acos().to_degrees() < 1e-4);
            checked += 1;
        }
        assert!(checked > 20);
    }
}
