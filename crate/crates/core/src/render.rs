//! Forward pipeline: camera rays, volume marching with quadrature weights,
//! microfacet shading of every marching sample, secondary-ray budgeting
//! with selective retracing, compositing and tonemapping.
//!
//! All shading runs on [`Tape`] values so the same code serves inference
//! (inactive tape) and training. Every random or threshold decision goes
//! through a [`DecisionLog`], which can record them and replay them later so
//! that finite-difference checks see the same sampling.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::envlight::{rect_size, EnvironmentMap, Footprint, PixelRect};
use crate::materials::{gain_encoding, half_diff_encode, shading_frame, MaterialSample};
use crate::math::{dir_to_spherical, Vec3};
use crate::optim::ext::ExtOp;
use crate::optim::tape::{v3_const, v3_dot_const, v3_vals, Tape, Var, Var3};
use crate::qmc::{hash_keys, reflect, sample_vndf, SampleStream};
use crate::scene::{MaterialVars, Scene};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Pinhole camera looking along its local -z with y up.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub camera_angle_x: f64,
    /// Camera-to-world transform, row-major.
    pub pose: [[f64; 4]; 4],
}

impl Camera {
    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.camera_angle_x).tan()
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::new(self.pose[0][3], self.pose[1][3], self.pose[2][3])
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = |i: usize| self.pose[i][0] * v.x + self.pose[i][1] * v.y + self.pose[i][2] * v.z;
        Vec3::new(r(0), r(1), r(2))
    }

    /// Ray through pixel `(x, y)` offset by `(u, v)` in `[0, 1)`; `0.5`
    /// hits the pixel center.
    pub fn gen_ray(&self, x: usize, y: usize, u: f64, v: f64) -> Ray {
        let f = self.focal();
        let d = Vec3::new(
            (x as f64 + u - 0.5 * self.width as f64) / f,
            -(y as f64 + v - 0.5 * self.height as f64) / f,
            -1.0,
        );
        Ray {
            origin: self.origin(),
            dir: self.rotate(d).normalize(),
        }
    }

    /// Camera at `eye` looking at `target` with world up `up`.
    pub fn look_at(width: usize, height: usize, camera_angle_x: f64, eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let back = (eye - target).normalize();
        let right = up.cross(back).normalize();
        let cup = back.cross(right);
        let pose = [
            [right.x, cup.x, back.x, eye.x],
            [right.y, cup.y, back.y, eye.y],
            [right.z, cup.z, back.z, eye.z],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Camera {
            width,
            height,
            camera_angle_x,
            pose,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    /// Upper bound on secondary rays per primary ray.
    pub m: usize,
    /// Retraced secondary rays per primary ray.
    pub r: usize,
    pub max_bounces: usize,
    /// Marching samples over `[near, far]`; fixes the step size.
    pub max_samples: usize,
    pub near: f64,
    pub far: f64,
    /// Marching stops once transmittance drops below this.
    pub eps_t: f64,
    pub background: Vec3,
    pub seed: u64,
    /// Samples with weight at or below this are not shaded.
    pub shade_min_weight: f64,
    /// Start distance of secondary rays from their shading point.
    pub secondary_near: f64,
    /// Retrace noise amplitude relative to the median multiplier.
    pub noise_scale: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            m: 128,
            r: 8,
            max_bounces: 2,
            max_samples: 128,
            near: 2.0,
            far: 6.0,
            eps_t: 1e-4,
            background: Vec3::splat(1.0),
            seed: 0,
            shade_min_weight: 1e-4,
            secondary_near: 0.05,
            noise_scale: 0.1,
        }
    }
}

impl RenderConfig {
    pub fn step(&self) -> f64 {
        (self.far - self.near) / self.max_samples as f64
    }
}

/// Records or replays every sampling decision of a render.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecisionLog {
    mode: LogMode,
    data: Vec<f64>,
    pos: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
enum LogMode {
    #[default]
    Off,
    Record,
    Replay,
}

impl DecisionLog {
    pub fn off() -> Self {
        DecisionLog::default()
    }

    pub fn recording() -> Self {
        DecisionLog {
            mode: LogMode::Record,
            ..Default::default()
        }
    }

    /// Replays the decisions of a finished recording.
    pub fn replay(&self) -> Self {
        DecisionLog {
            mode: LogMode::Replay,
            data: self.data.clone(),
            pos: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn take(&mut self, f: impl FnOnce() -> f64) -> f64 {
        match self.mode {
            LogMode::Off => f(),
            LogMode::Record => {
                let v = f();
                self.data.push(v);
                v
            }
            LogMode::Replay => {
                let v = self.data[self.pos];
                self.pos += 1;
                v
            }
        }
    }

    fn flag(&mut self, f: impl FnOnce() -> bool) -> bool {
        self.take(|| if f() { 1.0 } else { 0.0 }) != 0.0
    }

    fn count(&mut self, f: impl FnOnce() -> usize) -> usize {
        self.take(|| f() as f64) as usize
    }

    fn values<const K: usize>(&mut self, f: impl FnOnce() -> [f64; K]) -> [f64; K] {
        match self.mode {
            LogMode::Off => f(),
            LogMode::Record => {
                let v = f();
                self.data.extend_from_slice(&v);
                v
            }
            LogMode::Replay => {
                let mut v = [0.0; K];
                v.copy_from_slice(&self.data[self.pos..self.pos + K]);
                self.pos += K;
                v
            }
        }
    }

    fn indices(&mut self, f: impl FnOnce() -> Vec<usize>) -> Vec<usize> {
        match self.mode {
            LogMode::Replay => {
                let n = self.count(|| 0);
                (0..n).map(|_| self.count(|| 0)).collect()
            }
            _ => {
                let v = f();
                self.count(|| v.len());
                for &i in &v {
                    self.count(|| i);
                }
                v
            }
        }
    }

    fn footprint(&mut self, f: impl FnOnce() -> Footprint) -> Footprint {
        let v = self.values(|| {
            let fp = f();
            let r = fp.rects;
            let a = |p: PixelRect| [p.r0, p.r1, p.c0, p.c1].map(|x| x as f64);
            let (x, y) = (a(r[0]), a(r[1]));
            [fp.n_rects as f64, x[0], x[1], x[2], x[3], y[0], y[1], y[2], y[3]]
        });
        let rect = |o: usize| PixelRect {
            r0: v[o] as usize,
            r1: v[o + 1] as usize,
            c0: v[o + 2] as usize,
            c1: v[o + 3] as usize,
        };
        Footprint {
            rects: [rect(1), rect(5)],
            n_rects: v[0] as usize,
        }
    }
}

/// Counters gathered while rendering.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub nan_terms: u64,
    pub secondary: u64,
    pub retraced: u64,
}

impl RenderStats {
    pub fn add(&mut self, o: &RenderStats) {
        self.nan_terms += o.nan_terms;
        self.secondary += o.secondary;
        self.retraced += o.retraced;
    }
}

/// One marching sample with plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimarySample {
    pub t: f64,
    pub p: Vec3,
    pub sigma: f64,
    pub w: f64,
    /// Normal flipped to face the viewer; `None` where zero-flagged or
    /// not evaluated.
    pub normal: Option<Vec3>,
    pub material: Option<MaterialSample>,
}

/// Result of tracing one ray on a tape.
pub struct RayOutput<'t> {
    /// Linear radiance including background.
    pub color: Var3<'t>,
    /// Accumulated weight `sum w_j`.
    pub opacity: Var<'t>,
    /// `sum w_j max(0, -n_j . wo)^2` over pre-flip normals.
    pub orientation: Var<'t>,
    /// `sum w_j n_j` over shaded samples (pre-flip), detached.
    pub normal: Vec3,
}

struct MarchSample<'t> {
    t: f64,
    p: Vec3,
    sigma: Var<'t>,
    w: Var<'t>,
}

struct March<'t> {
    samples: Vec<MarchSample<'t>>,
    transmittance: Var<'t>,
}

/// Per shading point input to the two-phase shader.
struct ShadeInput<'t> {
    p: Vec3,
    w: Var<'t>,
    n: Var3<'t>,
    material: MaterialVars<'t>,
    id: u64,
}

struct Candidate<'t> {
    point: usize,
    h: Vec3,
    wi: Vec3,
    pdf: f64,
    g: Var3<'t>,
    multiplier: f64,
}

/// Fresnel weight `(1 - c)^5` for a constant cosine.
fn schlick_weight(c: f64) -> f64 {
    (1.0 - c.clamp(0.0, 1.0)).powi(5)
}

fn ndf_var<'t>(c: Var<'t>, a: Var<'t>) -> Var<'t> {
    let a2 = a * a;
    let d = c * c * (a2 - 1.0) + 1.0;
    a2 / (d * d * PI)
}

fn g1_var<'t>(c: Var<'t>, a: Var<'t>) -> Var<'t> {
    let a2 = a * a;
    c * 2.0 / (c + (a2 + (1.0 - a2) * c * c).sqrt())
}

fn finite3(v: &Var3<'_>) -> bool {
    v.iter().all(|x| x.val().is_finite())
}

/// Standard sRGB transfer, then clip to `[0, 1]`.
pub fn tonemap_scalar(x: f64) -> f64 {
    let y = if x <= 0.003_130_8 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    };
    y.clamp(0.0, 1.0)
}

pub fn tonemap(c: Vec3) -> Vec3 {
    Vec3::new(tonemap_scalar(c.x), tonemap_scalar(c.y), tonemap_scalar(c.z))
}

pub fn tonemap_var(x: Var<'_>) -> Var<'_> {
    let y = if x.val() <= 0.003_130_8 {
        x * 12.92
    } else {
        (x.ln() * (1.0 / 2.4)).exp() * 1.055 - 0.055
    };
    y.clamp(0.0, 1.0)
}

/// Secondary ray count `floor(w M)` for each weight.
pub fn secondary_counts(weights: &[f64], m: usize) -> Vec<usize> {
    weights.iter().map(|&w| (w.max(0.0) * m as f64).floor() as usize).collect()
}

/// Indices of the `r` largest `values[i] + noise(i)`, largest first; ties
/// broken by index.
pub fn select_retrace(values: &[f64], r: usize, noise_scale: f64, noise: impl Fn(usize) -> f64) -> Vec<usize> {
    if r == 0 {
        return Vec::new();
    }
    let mut keyed: Vec<(f64, usize)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v + noise_scale * noise(i), i))
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.truncate(r);
    keyed.into_iter().map(|(_, i)| i).collect()
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Rendered image planes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Tonemapped sRGB, 3 per pixel.
    pub rgb: Vec<f64>,
    /// Linear radiance, 3 per pixel.
    pub linear: Vec<f64>,
    pub opacity: Vec<f64>,
    /// Unit expected normal (zero where nothing was shaded), 3 per pixel.
    pub normals: Vec<f64>,
    pub stats: RenderStats,
}

pub struct Renderer<'a> {
    pub scene: &'a dyn Scene,
    pub env: &'a EnvironmentMap,
    pub cfg: &'a RenderConfig,
}

struct Ctx<'t, 'l> {
    tape: &'t Tape,
    log: &'l mut DecisionLog,
    stats: RenderStats,
}

impl<'a> Renderer<'a> {
    pub fn new(scene: &'a dyn Scene, env: &'a EnvironmentMap, cfg: &'a RenderConfig) -> Self {
        Renderer { scene, env, cfg }
    }

    fn stream(&self) -> SampleStream {
        SampleStream::new(self.cfg.seed)
    }

    /// Key of a primary ray for pixel `pixel` of view `view`, sub-sample `s`.
    pub fn ray_key(&self, view: u64, pixel: u64, s: u64) -> u64 {
        hash_keys(self.cfg.seed, &[view, pixel, s])
    }

    fn march_vars<'t>(&self, ctx: &mut Ctx<'t, '_>, ray: &Ray, depth: usize, ray_id: u64) -> March<'t> {
        let cfg = self.cfg;
        let tape = ctx.tape;
        let dt = cfg.step();
        let (t_start, t_end) = if depth == 0 { (cfg.near, cfg.far) } else { (cfg.secondary_near, f64::INFINITY) };
        let mut samples = Vec::new();
        let mut trans = tape.constant(1.0);
        let Some((b0, b1)) = self.scene.bounds().intersect(ray.origin, ray.dir) else {
            return March { samples, transmittance: trans };
        };
        let lo = b0.max(t_start);
        let hi = b1.min(t_end);
        if hi <= lo {
            return March { samples, transmittance: trans };
        }
        let u = self.stream().uniform(&[ray_id, depth as u64, 0x1177]);
        let first = ((lo - t_start) / dt - u).ceil().max(0.0) as usize;
        for j in first..first + cfg.max_samples {
            let t = t_start + (j as f64 + u) * dt;
            if t > hi {
                break;
            }
            let p = ray.at(t);
            let sigma = self.scene.density(tape, p);
            if sigma.val() == 0.0 && !sigma.is_tracked() {
                continue;
            }
            let survive = (-(sigma * dt)).exp();
            let w = trans * (1.0 - survive);
            trans = trans * survive;
            samples.push(MarchSample { t, p, sigma, w });
            let t_now = trans.val();
            if ctx.log.flag(|| t_now < cfg.eps_t) {
                break;
            }
        }
        March { samples, transmittance: trans }
    }

    /// Marching samples of a primary ray with normals and materials filled
    /// in for samples heavy enough to be shaded.
    pub fn march(&self, ray: &Ray, ray_id: u64) -> Vec<PrimarySample> {
        let tape = Tape::inactive();
        let mut log = DecisionLog::off();
        let mut ctx = Ctx {
            tape: &tape,
            log: &mut log,
            stats: RenderStats::default(),
        };
        let wo = -ray.dir;
        let m = self.march_vars(&mut ctx, ray, 0, ray_id);
        m.samples
            .iter()
            .map(|s| {
                let shaded = s.w.val() > self.cfg.shade_min_weight;
                let (normal, material) = if shaded {
                    let g = Vec3::from_array(v3_vals(&self.scene.density_gradient(&tape, s.p)));
                    let n = (g.length() >= 1e-12).then(|| {
                        let n = -g.normalize();
                        if n.dot(wo) < 0.0 {
                            -n
                        } else {
                            n
                        }
                    });
                    (n, Some(self.scene.material(&tape, s.p).value()))
                } else {
                    (None, None)
                };
                PrimarySample {
                    t: s.t,
                    p: s.p,
                    sigma: s.sigma.val(),
                    w: s.w.val(),
                    normal,
                    material,
                }
            })
            .collect()
    }

    /// Volume-renders `ray` at bounce `depth` on `tape`.
    pub fn trace<'t>(&self, tape: &'t Tape, log: &mut DecisionLog, ray: &Ray, depth: usize, ray_id: u64) -> (RayOutput<'t>, RenderStats) {
        let mut ctx = Ctx {
            tape,
            log,
            stats: RenderStats::default(),
        };
        let out = self.trace_ctx(&mut ctx, ray, depth, ray_id);
        (out, ctx.stats)
    }

    fn trace_ctx<'t>(&self, ctx: &mut Ctx<'t, '_>, ray: &Ray, depth: usize, ray_id: u64) -> RayOutput<'t> {
        let tape = ctx.tape;
        let wo = -ray.dir;
        let march = self.march_vars(ctx, ray, depth, ray_id);
        let mut color = v3_const(tape, [0.0; 3]);
        let mut orientation = tape.zero();
        let mut normal = Vec3::ZERO;
        let mut inputs = Vec::new();
        let opacity = 1.0 - march.transmittance;
        for (j, s) in march.samples.iter().enumerate() {
            let wv = s.w.val();
            if !ctx.log.flag(|| wv > self.cfg.shade_min_weight) {
                continue;
            }
            let g = self.scene.density_gradient(tape, s.p);
            let gv = Vec3::from_array(v3_vals(&g));
            let material = self.scene.material(tape, s.p);
            if ctx.log.flag(|| gv.length() < 1e-12) {
                // zero flag: orientation-free diffuse, nothing specular
                let mean = self.env.sh().mean_irradiance();
                let e = tape.custom(ExtOp::MeanIrradiance, &[], &mean.to_array());
                let rad = [0, 1, 2].map(|c| material.albedo[c] * e[c] * (1.0 / PI));
                for c in 0..3 {
                    color[c] = color[c] + s.w * rad[c];
                }
                continue;
            }
            let len = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            let n_pre = [-g[0] / len, -g[1] / len, -g[2] / len];
            let cos = v3_dot_const(&n_pre, wo);
            if depth == 0 {
                orientation = orientation + s.w * (-cos).relu().square();
            }
            normal += Vec3::from_array(v3_vals(&n_pre)) * wv;
            let cv = cos.val();
            let n = if ctx.log.flag(|| cv < 0.0) { n_pre.map(|x| -x) } else { n_pre };
            inputs.push(ShadeInput {
                p: s.p,
                w: s.w,
                n,
                material,
                id: hash_keys(ray_id, &[j as u64]),
            });
        }
        let radiance = self.shade_points(ctx, &inputs, wo, depth, ray_id);
        for (inp, rad) in inputs.iter().zip(&radiance) {
            for c in 0..3 {
                color[c] = color[c] + inp.w * rad[c];
            }
        }
        let bg = if depth == 0 {
            v3_const(tape, self.cfg.background.to_array())
        } else {
            let (th, ph) = dir_to_spherical(ray.dir);
            let index = self.env.pixel_index(th, ph);
            let v = tape.custom(ExtOp::EnvPixel { index }, &[], &self.env.pixel_radiance(index).to_array());
            [v[0], v[1], v[2]]
        };
        for c in 0..3 {
            color[c] = color[c] + march.transmittance * bg[c];
        }
        RayOutput {
            color,
            opacity,
            orientation,
            normal,
        }
    }

    fn irradiance<'t>(&self, tape: &'t Tape, n: &Var3<'t>) -> Var3<'t> {
        let nv = Vec3::from_array(v3_vals(n));
        let e = self.env.irradiance(nv);
        let v = tape.custom(ExtOp::Irradiance { n: nv.to_array() }, n, &e.to_array());
        [v[0], v[1], v[2]]
    }

    /// Two-phase shading of all points of one ray: draw every point's
    /// half vectors, pick the rays to retrace over the whole set, then
    /// evaluate the estimator.
    fn shade_points<'t>(&self, ctx: &mut Ctx<'t, '_>, inputs: &[ShadeInput<'t>], wo: Vec3, depth: usize, ray_id: u64) -> Vec<Var3<'t>> {
        let tape = ctx.tape;
        let cfg = self.cfg;
        let stream = self.stream();
        let mut counts = Vec::with_capacity(inputs.len());
        let mut cands: Vec<Candidate<'t>> = Vec::new();
        for (pi, inp) in inputs.iter().enumerate() {
            let wv = inp.w.val();
            let nv = Vec3::from_array(v3_vals(&inp.n));
            let alpha = inp.material.alpha.val();
            let frame = shading_frame(nv).ok();
            let wo_local = frame.map(|f| f.to_local(wo));
            let n_draw = ctx.log.count(|| match wo_local {
                Some(l) if l.z > 0.0 => (wv * cfg.m as f64).floor() as usize,
                _ => 0,
            });
            counts.push(n_draw);
            let points = if matches!(ctx.log.mode, LogMode::Replay) {
                Vec::new()
            } else {
                stream.allocate(inp.id, depth as u32, n_draw)
            };
            for k in 0..n_draw {
                let mut draw = || -> [f64; 14] {
                    let (frame, wol) = (frame.unwrap(), wo_local.unwrap());
                    let [u1, u2] = points[k];
                    let Ok(s) = sample_vndf(u1, u2, wol, alpha) else {
                        return [0.0; 14];
                    };
                    let h = frame.to_world(s.h);
                    let (wi, jac) = reflect(wo, h);
                    let valid = wi.dot(nv) > 0.0 && jac > 0.0;
                    let (hl, dl) = half_diff_encode(wo, wi, nv).unwrap_or((Vec3::Z, Vec3::Z));
                    [
                        valid as u8 as f64,
                        h.x,
                        h.y,
                        h.z,
                        wi.x,
                        wi.y,
                        wi.z,
                        if valid { s.pdf / jac } else { 0.0 },
                        hl.x,
                        hl.y,
                        hl.z,
                        dl.x,
                        dl.y,
                        dl.z,
                    ]
                };
                let d = ctx.log.values(&mut draw);
                let h = Vec3::new(d[1], d[2], d[3]);
                let wi = Vec3::new(d[4], d[5], d[6]);
                let valid = d[0] != 0.0;
                let g = if valid {
                    let enc = gain_encoding(Vec3::new(d[8], d[9], d[10]), Vec3::new(d[11], d[12], d[13]));
                    self.scene.gain(tape, &inp.material, &enc)
                } else {
                    v3_const(tape, [0.0; 3])
                };
                let gv = v3_vals(&g);
                cands.push(Candidate {
                    point: pi,
                    h,
                    wi,
                    pdf: d[7],
                    g,
                    multiplier: if valid { wv * gv[0].max(gv[1]).max(gv[2]) } else { f64::NEG_INFINITY },
                });
            }
        }
        ctx.stats.secondary += cands.len() as u64;

        let r = if depth + 1 < cfg.max_bounces { cfg.r } else { 0 };
        let selected = ctx.log.indices(|| {
            let valid: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].multiplier.is_finite()).collect();
            let values: Vec<f64> = valid.iter().map(|&i| cands[i].multiplier).collect();
            let scale = cfg.noise_scale * median(&values);
            select_retrace(&values, r, scale, |i| stream.uniform(&[ray_id, depth as u64, i as u64, 0x5e1e]))
                .into_iter()
                .map(|i| valid[i])
                .collect()
        });
        let mut retrace = vec![false; cands.len()];
        for &i in &selected {
            retrace[i] = true;
        }
        ctx.stats.retraced += selected.len() as u64;

        let mut spec_sum: Vec<Var3<'t>> = (0..inputs.len()).map(|_| v3_const(tape, [0.0; 3])).collect();
        let mut fres_sum = vec![0.0; inputs.len()];
        for (ci, c) in cands.iter().enumerate() {
            let inp = &inputs[c.point];
            let s = schlick_weight(wo.dot(c.h));
            fres_sum[c.point] += s;
            if !c.multiplier.is_finite() {
                continue;
            }
            let l: Var3<'t> = if retrace[ci] {
                let ray = Ray { origin: inp.p, dir: c.wi };
                self.trace_ctx(ctx, &ray, depth + 1, hash_keys(inp.id, &[ci as u64, 0x2ec])).color
            } else {
                let (th, ph) = dir_to_spherical(c.wi);
                let n_draw = counts[c.point];
                let fp = ctx.log.footprint(|| {
                    let (dth, dph) = rect_size(c.pdf.max(1e-300), th, n_draw, self.env.h, self.env.w);
                    self.env.footprint(th, ph, dth, dph)
                });
                let mean = self.env.footprint_mean(&fp);
                let v = tape.custom(ExtOp::EnvMean { footprint: fp }, &[], &mean.to_array());
                [v[0], v[1], v[2]]
            };
            // Integrand-only derivative of D G1 under detached samples: the
            // value is q / q_drawn == 1 at the drawn parameters.
            let ratio = {
                let cnh = v3_dot_const(&inp.n, c.h);
                let cnv = v3_dot_const(&inp.n, wo);
                let q = ndf_var(cnh, inp.material.alpha) * g1_var(cnv, inp.material.alpha) / cnv;
                let qv = q.val();
                let q_drawn = ctx.log.take(|| qv);
                if cnh.val() > 0.0 && cnv.val() > 0.0 && q_drawn > 0.0 && q_drawn.is_finite() && qv.is_finite() {
                    q / q_drawn
                } else {
                    tape.constant(1.0)
                }
            };
            let f0 = &inp.material.f0;
            let term: Var3<'t> = [0, 1, 2].map(|k| (f0[k] + (1.0 - f0[k]) * s) * c.g[k] * l[k] * ratio);
            if !finite3(&term) {
                ctx.stats.nan_terms += 1;
                continue;
            }
            let acc = &mut spec_sum[c.point];
            for k in 0..3 {
                acc[k] = acc[k] + term[k];
            }
        }

        inputs
            .iter()
            .enumerate()
            .map(|(pi, inp)| {
                let e = self.irradiance(tape, &inp.n);
                let albedo = &inp.material.albedo;
                let f0 = &inp.material.f0;
                let n_draw = counts[pi];
                let out: Var3<'t> = if n_draw == 0 {
                    let c = v3_dot_const(&inp.n, wo).clamp(0.0, 1.0);
                    let sw = (1.0 - c).powi(5);
                    [0, 1, 2].map(|k| (1.0 - f0[k]) * (1.0 - sw) * albedo[k] * e[k] * (1.0 / PI))
                } else {
                    let inv = 1.0 / n_draw as f64;
                    let mean_s = fres_sum[pi] * inv;
                    [0, 1, 2].map(|k| spec_sum[pi][k] * inv + (1.0 - f0[k]) * (1.0 - mean_s) * albedo[k] * e[k] * (1.0 / PI))
                };
                if finite3(&out) {
                    out
                } else {
                    ctx.stats.nan_terms += 1;
                    v3_const(tape, [0.0; 3])
                }
            })
            .collect()
    }

    /// Radiance leaving a single sample toward `wo`. `sample.normal` must
    /// already face `wo`; `None` gives the orientation-free diffuse value.
    pub fn shade_point(&self, sample: &PrimarySample, wo: Vec3, depth: usize, id: u64) -> Vec3 {
        let tape = Tape::inactive();
        let mut log = DecisionLog::off();
        let mut ctx = Ctx {
            tape: &tape,
            log: &mut log,
            stats: RenderStats::default(),
        };
        let material = sample.material.clone().expect("shade_point needs a material");
        let Some(n) = sample.normal else {
            return material.albedo.mul_elem(self.env.sh().mean_irradiance()) / PI;
        };
        let inp = ShadeInput {
            p: sample.p,
            w: tape.constant(sample.w),
            n: v3_const(&tape, n.to_array()),
            material: MaterialVars::constant(&tape, &material),
            id,
        };
        let out = self.shade_points(&mut ctx, &[inp], wo, depth, id);
        Vec3::from_array(v3_vals(&out[0]))
    }

    /// Linear radiance arriving along a secondary ray traced at `depth`.
    pub fn trace_secondary(&self, ray: &Ray, depth: usize, id: u64) -> Vec3 {
        let tape = Tape::inactive();
        let mut log = DecisionLog::off();
        let (out, _) = self.trace(&tape, &mut log, ray, depth.max(1), id);
        Vec3::from_array(v3_vals(&out.color))
    }

    fn jitter(&self, key: u64, spp: usize, s: usize) -> (f64, f64) {
        if spp == 1 {
            (0.5, 0.5)
        } else {
            let st = self.stream();
            (st.uniform(&[key, s as u64, 1]), st.uniform(&[key, s as u64, 2]))
        }
    }

    /// Tonemapped color of one pixel at one sample through its center.
    pub fn render_pixel(&self, camera: &Camera, x: usize, y: usize) -> Vec3 {
        let ray = camera.gen_ray(x, y, 0.5, 0.5);
        let tape = Tape::inactive();
        let mut log = DecisionLog::off();
        let key = self.ray_key(0, (y * camera.width + x) as u64, 0);
        let (out, _) = self.trace(&tape, &mut log, &ray, 0, key);
        tonemap(Vec3::from_array(v3_vals(&out.color)))
    }

    /// Renders a full image, averaging `spp` jittered samples per pixel in
    /// linear space. `view` keys the sample streams.
    pub fn render_image(&self, camera: &Camera, spp: usize, view: u64) -> RenderedImage {
        let (w, h) = (camera.width, camera.height);
        let spp = spp.max(1);
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, RenderStats)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut lin = Vec::with_capacity(w * 3);
                let mut op = Vec::with_capacity(w);
                let mut nor = Vec::with_capacity(w * 3);
                let mut stats = RenderStats::default();
                for x in 0..w {
                    let pixel = (y * w + x) as u64;
                    let mut c = Vec3::ZERO;
                    let mut a = 0.0;
                    let mut nsum = Vec3::ZERO;
                    for s in 0..spp {
                        let key = self.ray_key(view, pixel, s as u64);
                        let (u, v) = self.jitter(key, spp, s);
                        let ray = camera.gen_ray(x, y, u, v);
                        let tape = Tape::inactive();
                        let mut log = DecisionLog::off();
                        let (out, st) = self.trace(&tape, &mut log, &ray, 0, key);
                        stats.add(&st);
                        c += Vec3::from_array(v3_vals(&out.color));
                        a += out.opacity.val();
                        nsum += out.normal;
                    }
                    let c = c / spp as f64;
                    lin.extend_from_slice(&c.to_array());
                    op.push(a / spp as f64);
                    nor.extend_from_slice(&nsum.normalize().to_array());
                }
                (lin, op, nor, stats)
            })
            .collect();
        let mut img = RenderedImage {
            width: w,
            height: h,
            rgb: Vec::with_capacity(w * h * 3),
            linear: Vec::with_capacity(w * h * 3),
            opacity: Vec::with_capacity(w * h),
            normals: Vec::with_capacity(w * h * 3),
            stats: RenderStats::default(),
        };
        for (lin, op, nor, st) in rows {
            img.rgb.extend(lin.iter().map(|&v| tonemap_scalar(v)));
            img.linear.extend(lin);
            img.opacity.extend(op);
            img.normals.extend(nor);
            img.stats.add(&st);
        }
        img
    }
}

/// Deterministic midpoint quadrature of the reflected radiance over the
/// hemisphere of `n`, using the full BRDF and nearest-pixel environment
/// radiance. `n_theta x n_phi` nodes in the local frame.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_shade(
    n: Vec3,
    wo: Vec3,
    material: &MaterialSample,
    net: &crate::materials::GainNetwork,
    env: &EnvironmentMap,
    n_theta: usize,
    n_phi: usize,
) -> Vec3 {
    let frame = shading_frame(n).expect("unit normal");
    let mut acc = Vec3::ZERO;
    let dt = PI / 2.0 / n_theta as f64;
    let dp = 2.0 * PI / n_phi as f64;
    for i in 0..n_theta {
        let t = (i as f64 + 0.5) * dt;
        let (st, ct) = t.sin_cos();
        for j in 0..n_phi {
            let p = (j as f64 + 0.5) * dp;
            let wi = frame.to_world(Vec3::new(st * p.cos(), st * p.sin(), ct));
            let f = crate::materials::full_brdf(wo, wi, n, material, net).unwrap_or(Vec3::ZERO);
            acc += f.mul_elem(env.radiance_dir(wi)) * (ct * st * dt * dp);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Aabb;
    use crate::materials::{GainMode, GainNetwork};
    use crate::scene::{Sphere, SphereScene};

    fn front_camera(w: usize, h: usize) -> Camera {
        Camera::look_at(w, h, 0.7, Vec3::new(0.0, -4.0, 0.0), Vec3::ZERO, Vec3::Z)
    }

    fn ball(material: MaterialSample) -> SphereScene {
        SphereScene {
            spheres: vec![Sphere {
                center: Vec3::ZERO,
                radius: 0.6,
                material,
            }],
            bbox: Aabb::cube(1.0),
            sigma_max: 400.0,
            shell: 0.004,
        }
    }

    fn diffuse(rho: f64) -> MaterialSample {
        MaterialSample {
            alpha: 0.5,
            albedo: Vec3::splat(rho),
            f0: Vec3::ZERO,
            features: vec![],
        }
    }

    #[test]
    fn center_ray_follows_optical_axis() {
        let cam = front_camera(5, 5);
        let r = cam.gen_ray(2, 2, 0.5, 0.5);
        assert!((r.dir - Vec3::new(0.0, 1.0, 0.0)).length() < 1e-12);
        let left = cam.gen_ray(0, 2, 0.0, 0.5);
        let right = cam.gen_ray(4, 2, 1.0, 0.5);
        assert!((left.dir.angle_deg(right.dir) - 0.7f64.to_degrees()).abs() < 1e-9);
    }

    #[test]
    fn tonemap_reference_values() {
        assert_eq!(tonemap_scalar(0.0), 0.0);
        assert!((tonemap_scalar(1.0) - 1.0).abs() < 1e-12);
        assert!((tonemap_scalar(0.5) - 0.735_356_9).abs() < 1e-6);
        assert_eq!(tonemap_scalar(2.0), 1.0);
    }

    #[test]
    fn retrace_selection_cases() {
        let v = [0.3, 0.9, 0.1, 0.5];
        assert!(select_retrace(&v, 0, 0.0, |_| 0.0).is_empty());
        assert_eq!(select_retrace(&v, 2, 0.0, |_| 0.0), vec![1, 3]);
        let mut all = select_retrace(&v, 10, 0.0, |_| 0.0);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn half_weight_gets_half_the_budget() {
        assert_eq!(secondary_counts(&[0.5], 128), vec![64]);
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = ball(diffuse(0.5));
        let empty = SphereScene { spheres: vec![], ..scene };
        let env = EnvironmentMap::constant(8, 16, 0.5);
        let cfg = RenderConfig::default();
        let r = Renderer::new(&empty, &env, &cfg);
        assert!((r.render_pixel(&front_camera(3, 3), 1, 1) - Vec3::splat(1.0)).length() < 1e-12);
        let sec = r.trace_secondary(&Ray { origin: Vec3::ZERO, dir: Vec3::Z }, 1, 3);
        assert!((sec - Vec3::splat(0.5)).length() < 1e-12);
    }

    #[test]
    fn lambertian_sphere_matches_analytic_value() {
        let scene = ball(diffuse(0.6));
        let env = EnvironmentMap::constant(32, 64, 0.8);
        let cfg = RenderConfig {
            max_bounces: 1,
            ..Default::default()
        };
        let r = Renderer::new(&scene, &env, &cfg);
        let cam = front_camera(9, 9);
        let img = r.render_image(&cam, 4, 0);
        let c = 4 * 9 + 4;
        // (rho / pi) * pi L, Fresnel of F0 = 0 still takes a few percent at
        // normal incidence through the half-vector spread
        let expected = tonemap_scalar(0.6 * 0.8);
        assert!((img.rgb[c * 3] - expected).abs() / expected < 0.02, "{} vs {expected}", img.rgb[c * 3]);
        assert!(img.opacity[c] > 0.999);
    }

    #[test]
    fn renders_are_deterministic() {
        let scene = ball(MaterialSample {
            alpha: 0.2,
            albedo: Vec3::new(0.6, 0.3, 0.2),
            f0: Vec3::splat(0.3),
            features: vec![],
        });
        let mut s = 5u64;
        let rad: Vec<f64> = (0..16 * 32 * 3)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((s >> 11) as f64 / (1u64 << 53) as f64) + 0.1
            })
            .collect();
        let env = EnvironmentMap::from_radiance(16, 32, &rad);
        let cfg = RenderConfig::default();
        let r = Renderer::new(&scene, &env, &cfg);
        let cam = front_camera(6, 6);
        let a = r.render_image(&cam, 2, 1);
        let b = r.render_image(&cam, 2, 1);
        assert_eq!(a, b);
        assert!(a.stats.retraced > 0);
    }

    #[test]
    fn recorded_decisions_replay_identically() {
        let scene = ball(MaterialSample {
            alpha: 0.3,
            albedo: Vec3::splat(0.4),
            f0: Vec3::splat(0.5),
            features: vec![],
        });
        let env = EnvironmentMap::constant(8, 16, 1.0);
        let cfg = RenderConfig::default();
        let r = Renderer::new(&scene, &env, &cfg);
        let ray = front_camera(5, 5).gen_ray(2, 2, 0.3, 0.6);
        let tape = Tape::inactive();
        let mut rec = DecisionLog::recording();
        let (a, _) = r.trace(&tape, &mut rec, &ray, 0, 9);
        let mut rep = rec.replay();
        let (b, _) = r.trace(&tape, &mut rep, &ray, 0, 9);
        assert!(!rec.is_empty());
        assert_eq!(v3_vals(&a.color), v3_vals(&b.color));
    }

    #[test]
    fn constant_density_weights_are_geometric() {
        struct Fog;
        impl Scene for Fog {
            fn bounds(&self) -> Aabb {
                Aabb::cube(10.0)
            }
            fn density<'t>(&self, tape: &'t Tape, _p: Vec3) -> Var<'t> {
                tape.constant(std::f64::consts::LN_2 / RenderConfig::default().step())
            }
            fn density_gradient<'t>(&self, tape: &'t Tape, _p: Vec3) -> Var3<'t> {
                v3_const(tape, [0.0; 3])
            }
            fn material<'t>(&self, tape: &'t Tape, _p: Vec3) -> MaterialVars<'t> {
                MaterialVars::constant(tape, &diffuse(0.5))
            }
            fn gain_mode(&self) -> GainMode {
                GainMode::Identity
            }
            fn gain<'t>(&self, tape: &'t Tape, _m: &MaterialVars<'t>, _e: &[f64; 50]) -> Var3<'t> {
                v3_const(tape, [1.0; 3])
            }
        }
        let env = EnvironmentMap::constant(4, 8, 1.0);
        let cfg = RenderConfig::default();
        let r = Renderer::new(&Fog, &env, &cfg);
        let s = r.march(&Ray { origin: Vec3::ZERO, dir: Vec3::X }, 0);
        for (j, smp) in s.iter().take(10).enumerate() {
            assert!((smp.w - 0.5f64.powi(j as i32 + 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn brute_force_diffuse_constant_env() {
        let env = EnvironmentMap::constant(32, 64, 0.7);
        let m = MaterialSample {
            alpha: 0.01,
            albedo: Vec3::splat(0.5),
            f0: Vec3::ZERO,
            features: vec![],
        };
        let net = GainNetwork::new(GainMode::Identity, 0, 8, 2);
        let v = brute_force_shade(Vec3::Z, Vec3::Z, &m, &net, &env, 128, 256);
        // Fresnel with F0 = 0 leaves a small specular and diffuse deficit
        assert!((v.x - 0.5 * 0.7).abs() < 0.02 * 0.35, "{v:?}");
    }
}
