//! The training loop: sample a ray batch, render it on per-chunk tapes,
//! reduce gradients in chunk order, take an Adam step, upsample on
//! schedule.

use rayon::prelude::*;

use crate::math::Vec3;
use crate::optim::adam::{AdamGroup, AdamHyper};
use crate::optim::params::{group_names, is_grid_group, Gradients, Model};
use crate::optim::schedule::Schedule;
use crate::optim::tape::{v3_vals, Tape, Var};
use crate::qmc::{hash_keys, hash_uniform};
use crate::render::{tonemap_var, Camera, DecisionLog, RenderConfig, RenderStats, Renderer};
use crate::{Error, Result};

/// One posed training image, tonemapped sRGB in `[0, 1]`, row-major RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub camera: Camera,
    pub rgb: Vec<f64>,
}

impl TrainView {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.camera.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_rays: usize,
    /// Rays per tape; chunks are the unit of parallel work and of the
    /// fixed-order gradient reduction.
    pub chunk_rays: usize,
    pub lambda_o: f64,
    pub lr_grid: f64,
    pub lr_other: f64,
    pub adam: AdamHyper,
    pub schedule: Schedule,
    pub render: RenderConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 30_000,
            batch_rays: 4096,
            chunk_rays: 64,
            lambda_o: 1e-3,
            lr_grid: 0.02,
            lr_other: 1e-3,
            adam: AdamHyper::default(),
            schedule: Schedule::default(),
            render: RenderConfig::default(),
            seed: 0,
        }
    }
}

/// A training ray: view, pixel, sub-pixel offset and sample key.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub view: usize,
    pub x: usize,
    pub y: usize,
    pub u: f64,
    pub v: f64,
    pub key: u64,
}

/// Deterministic batch for `step`.
pub fn sample_batch(views: &[TrainView], n: usize, seed: u64, step: usize) -> Vec<RaySample> {
    (0..n)
        .map(|k| {
            let r = |j: u64| hash_uniform(seed, &[0xba7c, step as u64, k as u64, j]);
            let view = ((r(0) * views.len() as f64) as usize).min(views.len() - 1);
            let cam = &views[view].camera;
            let x = ((r(1) * cam.width as f64) as usize).min(cam.width - 1);
            let y = ((r(2) * cam.height as f64) as usize).min(cam.height - 1);
            RaySample {
                view,
                x,
                y,
                u: r(3),
                v: r(4),
                key: hash_keys(seed, &[step as u64, k as u64]),
            }
        })
        .collect()
}

pub struct BatchResult {
    /// Photometric plus weighted orientation loss.
    pub loss: f64,
    pub photometric: f64,
    pub orientation: f64,
    pub grads: Option<Gradients>,
    pub stats: RenderStats,
}

/// Loss of a ray batch and, with `with_grad`, its gradients. `logs` holds
/// one decision log per ray (record, replay or off).
pub fn evaluate_batch(
    model: &Model,
    views: &[TrainView],
    rays: &[RaySample],
    cfg: &TrainConfig,
    logs: &mut [DecisionLog],
    with_grad: bool,
) -> BatchResult {
    assert_eq!(logs.len(), rays.len());
    let renderer = Renderer::new(&model.scene, &model.env, &cfg.render);
    let n = rays.len().max(1) as f64;
    let chunk = cfg.chunk_rays.max(1);
    let parts: Vec<(f64, f64, f64, Option<Gradients>, RenderStats)> = rays
        .par_chunks(chunk)
        .zip(logs.par_chunks_mut(chunk))
        .map(|(rays, logs)| {
            let tape = if with_grad { Tape::new() } else { Tape::inactive() };
            let mut stats = RenderStats::default();
            let mut terms: Vec<Var> = Vec::new();
            let (mut phot, mut orient) = (0.0, 0.0);
            for (r, log) in rays.iter().zip(logs.iter_mut()) {
                let view = &views[r.view];
                let ray = view.camera.gen_ray(r.x, r.y, r.u, r.v);
                let (out, st) = renderer.trace(&tape, log, &ray, 0, r.key);
                stats.add(&st);
                let target = view.pixel(r.x, r.y);
                for c in 0..3 {
                    let d = tonemap_var(out.color[c]) - target[c];
                    let t = d.square() * (1.0 / (3.0 * n));
                    phot += t.val();
                    terms.push(t);
                }
                let o = out.orientation * (cfg.lambda_o / n);
                orient += o.val();
                terms.push(o);
            }
            let grads = with_grad.then(|| {
                let total = tape.sum(&terms);
                let mut g = Gradients::zeros(model);
                tape.backward(&[(total, 1.0)], &mut |op, o, i| g.handle(model, op, o, i));
                g.flush_nodes(model);
                g
            });
            (phot + orient, phot, orient, grads, stats)
        })
        .collect();
    let mut res = BatchResult {
        loss: 0.0,
        photometric: 0.0,
        orientation: 0.0,
        grads: with_grad.then(|| Gradients::zeros(model)),
        stats: RenderStats::default(),
    };
    for (l, p, o, g, st) in parts {
        res.loss += l;
        res.photometric += p;
        res.orientation += o;
        res.stats.add(&st);
        if let (Some(acc), Some(g)) = (res.grads.as_mut(), g) {
            acc.accumulate(&g);
        }
    }
    res
}

/// Scalars logged per step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
    pub lr_mult: f64,
    pub resolution: usize,
}

/// Parameters, Adam moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: Vec<AdamGroup>,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let adam = group_names()
            .iter()
            .zip(model.groups())
            .enumerate()
            .map(|(g, (name, p))| {
                let lr = if is_grid_group(g) && *name != "feature_basis" { cfg.lr_grid } else { cfg.lr_other };
                AdamGroup::new(name, lr, p.len())
            })
            .collect();
        TrainState { model, adam, step: 0 }
    }

    /// One optimization step. On error the parameters are left at their
    /// values before the step.
    pub fn step(&mut self, views: &[TrainView], cfg: &TrainConfig) -> Result<StepRecord> {
        let step = self.step;
        if let Some(r) = cfg.schedule.upsample_at(step) {
            if r > self.model.scene.grid.res[0] {
                log::info!("step {step}: upsampling grid to {r}^3");
                self.model.scene.grid = self.model.scene.grid.upsample([r; 3])?;
                self.model.refresh();
                let groups = self.model.groups();
                for (g, a) in self.adam.iter_mut().enumerate() {
                    if is_grid_group(g) {
                        a.reset(groups[g].len());
                    }
                }
            }
        }
        let rays = sample_batch(views, cfg.batch_rays, cfg.seed, step);
        let mut logs = vec![DecisionLog::off(); rays.len()];
        let res = evaluate_batch(&self.model, views, &rays, cfg, &mut logs, true);
        if !res.loss.is_finite() {
            return Err(Error::Diverged(step));
        }
        if res.stats.nan_terms > 0 {
            log::debug!("step {step}: {} non-finite shading terms dropped", res.stats.nan_terms);
        }
        let grads = res.grads.expect("gradients requested").into_groups(&self.model)?;
        let lr_mult = cfg.schedule.lr_multiplier(step);
        let mut adam = self.adam.clone();
        let mut updated = Vec::with_capacity(grads.len());
        for ((a, p), g) in adam.iter_mut().zip(self.model.groups()).zip(&grads) {
            updated.push(a.propose(&cfg.adam, p, g, lr_mult, true)?);
        }
        for (dst, src) in self.model.groups_mut().into_iter().zip(updated) {
            *dst = src;
        }
        self.model.refresh();
        self.adam = adam;
        self.step += 1;
        Ok(StepRecord {
            step,
            loss: res.loss,
            psnr: psnr_from_mse(res.photometric),
            lr_mult,
            resolution: self.model.scene.grid.res[0],
        })
    }
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

/// Runs steps until `cfg.steps`, calling `on_step` after each.
pub fn train(
    state: &mut TrainState,
    views: &[TrainView],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    if views.is_empty() {
        return Err(Error::Config("training needs at least one image".into()));
    }
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let rec = state.step(views, cfg)?;
        on_step(state, &rec)?;
        log.push(rec);
    }
    Ok(log)
}

/// Mean linear color a ray batch renders to; handy for checks.
pub fn mean_color(model: &Model, views: &[TrainView], rays: &[RaySample], render: &RenderConfig) -> Vec3 {
    let r = Renderer::new(&model.scene, &model.env, render);
    let tape = Tape::inactive();
    let mut acc = Vec3::ZERO;
    for s in rays {
        let ray = views[s.view].camera.gen_ray(s.x, s.y, s.u, s.v);
        let (out, _) = r.trace(&tape, &mut DecisionLog::off(), &ray, 0, s.key);
        acc += Vec3::from_array(v3_vals(&out.color));
    }
    acc / rays.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Aabb;
    use crate::materials::GainMode;
    use crate::optim::params::ModelConfig;

    fn tiny_model() -> Model {
        Model::init(
            &ModelConfig {
                resolution: 4,
                density_rank: 1,
                feature_rank: 1,
                feature_dim: 2,
                bbox: Aabb::cube(1.0),
                gain_mode: GainMode::Identity,
                gain_hidden: 4,
                gain_layers: 1,
                env_height: 4,
                env_width: 8,
                env_init: 0.5,
                init_scale: 0.1,
            },
            1,
        )
        .unwrap()
    }

    fn flat_views(color: f64) -> Vec<TrainView> {
        let cam = Camera::look_at(4, 4, 0.5, Vec3::new(0.0, -4.0, 0.0), Vec3::ZERO, Vec3::Z);
        vec![TrainView {
            camera: cam,
            rgb: vec![color; 4 * 4 * 3],
        }]
    }

    #[test]
    fn empty_rays_give_no_grid_gradient() {
        let model = tiny_model();
        let views = flat_views(0.3);
        // a ray that misses the box entirely
        let mut cam = views[0].camera.clone();
        cam.pose[0][3] = 10.0;
        let views = vec![TrainView { camera: cam, rgb: views[0].rgb.clone() }];
        let rays = sample_batch(&views, 8, 0, 0);
        let cfg = TrainConfig::default();
        let mut logs = vec![DecisionLog::off(); rays.len()];
        let res = evaluate_batch(&model, &views, &rays, &cfg, &mut logs, true);
        let g = res.grads.unwrap().into_groups(&model).unwrap();
        for (gi, a) in g.iter().enumerate().take(13) {
            assert!(a.iter().all(|&v| v == 0.0), "group {gi}");
        }
    }

    #[test]
    fn batches_are_deterministic_and_in_range() {
        let views = flat_views(0.5);
        let a = sample_batch(&views, 50, 3, 7);
        assert_eq!(a, sample_batch(&views, 50, 3, 7));
        assert_ne!(a, sample_batch(&views, 50, 3, 8));
        assert!(a.iter().all(|r| r.x < 4 && r.y < 4 && (0.0..1.0).contains(&r.u)));
    }

    #[test]
    fn upsample_happens_on_schedule() {
        let views = flat_views(0.5);
        let cfg = TrainConfig {
            steps: 3,
            batch_rays: 4,
            schedule: Schedule {
                upsample_steps: vec![1, 2],
                res_start: 4,
                res_end: 8,
                ..Schedule::default()
            },
            render: RenderConfig {
                max_samples: 16,
                m: 4,
                r: 0,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut st = TrainState::new(tiny_model(), &cfg);
        let recs = train(&mut st, &views, &cfg, |_, _| Ok(())).unwrap();
        let res: Vec<usize> = recs.iter().map(|r| r.resolution).collect();
        assert_eq!(res, vec![4, 6, 8]);
        assert_eq!(st.adam[0].m.len(), st.model.groups()[0].len());
    }
}
