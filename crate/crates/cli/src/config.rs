//! Run configuration: a TOML file whose tables flatten to dotted keys
//! (`render.m`, `train.steps`, ...), plus `key=value` overrides. Unknown
//! keys and out-of-range values are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use toml::Value;

use nmf_core::field::Aabb;
use nmf_core::materials::GainMode;
use nmf_core::math::Vec3;
use nmf_core::optim::adam::AdamHyper;
use nmf_core::optim::params::ModelConfig;
use nmf_core::optim::schedule::Schedule;
use nmf_core::optim::train::TrainConfig;
use nmf_core::render::RenderConfig;
use nmf_core::{Error, Result};

use crate::synthetic::SyntheticConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub data_split: String,
    pub eval_split: String,
    pub background: [f64; 3],
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub render_spp: usize,
    /// Output size for `render`/`relight`; zero takes the dataset size.
    pub render_width: usize,
    pub render_height: usize,
    /// Transforms file with the cameras to render.
    pub cameras: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    /// Factor applied to every step count of `schedule` (not to
    /// resolutions).
    pub schedule_scale: f64,
    pub log_every: usize,
    pub snapshot_every: usize,
    pub snapshot_view: usize,
    pub checkpoint_every: usize,
    pub relight_env: Option<PathBuf>,
    /// Rotation of the relighting map about the vertical axis, degrees.
    pub relight_rotate_deg: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: None,
            data_split: "train".into(),
            eval_split: "test".into(),
            background: [1.0; 3],
            model: ModelConfig::default(),
            render: RenderConfig::default(),
            render_spp: 1,
            render_width: 0,
            render_height: 0,
            cameras: None,
            checkpoint: None,
            train: TrainConfig::default(),
            schedule_scale: 1.0,
            log_every: 10,
            snapshot_every: 0,
            snapshot_view: 0,
            checkpoint_every: 1000,
            relight_env: None,
            relight_rotate_deg: 0.0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for initialization, ray batches and sampling"),
    ("data.dir", "dataset directory with transforms_<split>.json"),
    ("data.split", "training split"),
    ("data.eval_split", "split used by eval"),
    ("data.background", "RGB composited behind transparent pixels and rendered behind the scene"),
    ("model.density_rank", "rank of the density factorization"),
    ("model.feature_rank", "rank of the feature factorization"),
    ("model.feature_dim", "material feature width"),
    ("model.bbox_min", "scene box lower corner"),
    ("model.bbox_max", "scene box upper corner"),
    ("model.gain", "\"neural\" or \"identity\""),
    ("model.gain_hidden", "gain network hidden width"),
    ("model.gain_layers", "gain network hidden layers"),
    ("model.init_scale", "factor initialization half-width"),
    ("env.height", "environment map rows"),
    ("env.width", "environment map columns"),
    ("env.init", "initial constant radiance"),
    ("render.m", "secondary-ray budget per primary ray"),
    ("render.r", "secondary rays retraced per shaded ray"),
    ("render.max_bounces", "path depth"),
    ("render.max_samples", "marching samples per ray"),
    ("render.near", "primary ray start"),
    ("render.far", "primary ray end"),
    ("render.eps_t", "transmittance early-stop threshold"),
    ("render.shade_min_weight", "smallest sample weight that is shaded"),
    ("render.secondary_near", "secondary ray start offset"),
    ("render.noise_scale", "retrace selection noise, relative to the median"),
    ("render.seed", "sampling seed (defaults to seed)"),
    ("render.spp", "samples per pixel for render/relight/eval"),
    ("render.width", "output width, 0 = dataset size"),
    ("render.height", "output height, 0 = dataset size"),
    ("render.cameras", "transforms file with the cameras to render"),
    ("render.checkpoint", "checkpoint for render/relight/eval"),
    ("train.steps", "optimization steps"),
    ("train.batch_rays", "rays per step"),
    ("train.chunk_rays", "rays per tape"),
    ("train.lambda_o", "orientation loss weight"),
    ("train.lr_grid", "learning rate of the factor planes and lines"),
    ("train.lr_other", "learning rate of basis, decoder, gain and environment"),
    ("train.log_every", "CSV log interval"),
    ("train.snapshot_every", "snapshot PNG interval, 0 = off"),
    ("train.snapshot_view", "training view used for snapshots"),
    ("train.checkpoint_every", "checkpoint interval, 0 = final only"),
    ("adam.beta1", "first moment decay"),
    ("adam.beta2", "second moment decay"),
    ("adam.eps", "denominator epsilon"),
    ("schedule.scale", "factor on all schedule step counts"),
    ("schedule.warmup_start", "multiplier at step 0"),
    ("schedule.warmup_steps", "warmup length"),
    ("schedule.decay", "multiplier at total_steps"),
    ("schedule.total_steps", "decay horizon"),
    ("schedule.upsample_steps", "grid upsampling steps"),
    ("schedule.res_start", "initial grid resolution"),
    ("schedule.res_end", "final grid resolution"),
    ("relight.env", "PFM environment map used by relight"),
    ("relight.rotate_deg", "rotation of that map about the vertical axis"),
    ("synthetic.width", "image width"),
    ("synthetic.height", "image height"),
    ("synthetic.n_train", "training views"),
    ("synthetic.n_test", "test views"),
    ("synthetic.spp", "samples per pixel"),
    ("synthetic.env_height", "environment rows"),
    ("synthetic.env_width", "environment columns"),
    ("synthetic.camera_distance", "camera distance from the origin"),
    ("synthetic.camera_angle_x", "horizontal field of view, radians"),
    ("synthetic.m", "secondary-ray budget"),
    ("synthetic.r", "retraced rays"),
    ("synthetic.max_samples", "marching samples per ray"),
];

fn err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Flattens nested tables into dotted keys.
pub fn flatten(table: &toml::Table) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, t: &toml::Table, out: &mut BTreeMap<String, Value>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(sub) => walk(&key, sub, out),
                _ => {
                    out.insert(key, v.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

/// Parses `key=value`; the value is read as TOML and falls back to a bare
/// string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| err(format!("override {s:?} is not key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(err(format!("override {s:?} has an empty key")));
    }
    let value = match format!("v = {v}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(v.to_string()),
    };
    Ok((k.to_string(), value))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(err(format!("{key}: expected a number, got {v}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(err(format!("{key}: expected a non-negative integer, got {v}"))),
    }
}

fn as_str(key: &str, v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        _ => Err(err(format!("{key}: expected a string, got {v}"))),
    }
}

fn as_vec3(key: &str, v: &Value) -> Result<[f64; 3]> {
    match v {
        Value::Array(a) if a.len() == 3 => {
            let mut out = [0.0; 3];
            for (o, x) in out.iter_mut().zip(a) {
                *o = as_f64(key, x)?;
            }
            Ok(out)
        }
        _ => Err(err(format!("{key}: expected an array of 3 numbers, got {v}"))),
    }
}

fn as_usizes(key: &str, v: &Value) -> Result<Vec<usize>> {
    match v {
        Value::Array(a) => a.iter().map(|x| as_usize(key, x)).collect(),
        _ => Err(err(format!("{key}: expected an array of integers, got {v}"))),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Format {
            kind: "config",
            path: path.to_path_buf(),
            reason: e.message().to_string(),
        })?;
        let mut cfg = Self::from_table(&table, overrides)?;
        // relative paths in the file are relative to the file; those given
        // as overrides stay relative to the working directory
        let overridden: Vec<String> = overrides.iter().filter_map(|o| parse_override(o).ok()).map(|(k, _)| k).collect();
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |key: &str, p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() && !overridden.iter().any(|k| k == key) {
                    *q = base.join(&*q);
                }
            }
        };
        fix("data.dir", &mut cfg.data_dir);
        fix("render.cameras", &mut cfg.cameras);
        fix("render.checkpoint", &mut cfg.checkpoint);
        fix("relight.env", &mut cfg.relight_env);
        Ok(cfg)
    }

    pub fn from_table(table: &toml::Table, overrides: &[String]) -> Result<Self> {
        let mut keys = flatten(table);
        for o in overrides {
            let (k, v) = parse_override(o)?;
            keys.insert(k, v);
        }
        let mut cfg = RunConfig::default();
        let render_seed = keys.get("render.seed").cloned();
        for (k, v) in &keys {
            cfg.set(k, v)?;
        }
        if render_seed.is_none() {
            cfg.render.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_table(&toml::Table::new(), overrides)
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let f = || as_f64(key, v);
        let u = || as_usize(key, v);
        let path = || as_str(key, v).map(PathBuf::from);
        let s = &mut self.train.schedule;
        let syn = &mut self.synthetic;
        match key {
            "seed" => self.seed = u()? as u64,
            "data.dir" => self.data_dir = Some(path()?),
            "data.split" => self.data_split = as_str(key, v)?,
            "data.eval_split" => self.eval_split = as_str(key, v)?,
            "data.background" => self.background = as_vec3(key, v)?,
            "model.density_rank" => self.model.density_rank = u()?,
            "model.feature_rank" => self.model.feature_rank = u()?,
            "model.feature_dim" => self.model.feature_dim = u()?,
            "model.bbox_min" => self.model.bbox.lo = Vec3::from_array(as_vec3(key, v)?),
            "model.bbox_max" => self.model.bbox.hi = Vec3::from_array(as_vec3(key, v)?),
            "model.gain" => {
                self.model.gain_mode = match as_str(key, v)?.as_str() {
                    "neural" => GainMode::Neural,
                    "identity" => GainMode::Identity,
                    other => return Err(err(format!("{key}: expected \"neural\" or \"identity\", got {other:?}"))),
                }
            }
            "model.gain_hidden" => self.model.gain_hidden = u()?,
            "model.gain_layers" => self.model.gain_layers = u()?,
            "model.init_scale" => self.model.init_scale = f()?,
            "env.height" => self.model.env_height = u()?,
            "env.width" => self.model.env_width = u()?,
            "env.init" => self.model.env_init = f()?,
            "render.m" => self.render.m = u()?,
            "render.r" => self.render.r = u()?,
            "render.max_bounces" => self.render.max_bounces = u()?,
            "render.max_samples" => self.render.max_samples = u()?,
            "render.near" => self.render.near = f()?,
            "render.far" => self.render.far = f()?,
            "render.eps_t" => self.render.eps_t = f()?,
            "render.shade_min_weight" => self.render.shade_min_weight = f()?,
            "render.secondary_near" => self.render.secondary_near = f()?,
            "render.noise_scale" => self.render.noise_scale = f()?,
            "render.seed" => self.render.seed = u()? as u64,
            "render.spp" => self.render_spp = u()?,
            "render.width" => self.render_width = u()?,
            "render.height" => self.render_height = u()?,
            "render.cameras" => self.cameras = Some(path()?),
            "render.checkpoint" => self.checkpoint = Some(path()?),
            "train.steps" => self.train.steps = u()?,
            "train.batch_rays" => self.train.batch_rays = u()?,
            "train.chunk_rays" => self.train.chunk_rays = u()?,
            "train.lambda_o" => self.train.lambda_o = f()?,
            "train.lr_grid" => self.train.lr_grid = f()?,
            "train.lr_other" => self.train.lr_other = f()?,
            "train.log_every" => self.log_every = u()?,
            "train.snapshot_every" => self.snapshot_every = u()?,
            "train.snapshot_view" => self.snapshot_view = u()?,
            "train.checkpoint_every" => self.checkpoint_every = u()?,
            "adam.beta1" => self.train.adam.beta1 = f()?,
            "adam.beta2" => self.train.adam.beta2 = f()?,
            "adam.eps" => self.train.adam.eps = f()?,
            "schedule.scale" => self.schedule_scale = f()?,
            "schedule.warmup_start" => s.warmup_start = f()?,
            "schedule.warmup_steps" => s.warmup_steps = u()?,
            "schedule.decay" => s.decay = f()?,
            "schedule.total_steps" => s.total_steps = u()?,
            "schedule.upsample_steps" => s.upsample_steps = as_usizes(key, v)?,
            "schedule.res_start" => s.res_start = u()?,
            "schedule.res_end" => s.res_end = u()?,
            "relight.env" => self.relight_env = Some(path()?),
            "relight.rotate_deg" => self.relight_rotate_deg = f()?,
            "synthetic.width" => syn.width = u()?,
            "synthetic.height" => syn.height = u()?,
            "synthetic.n_train" => syn.n_train = u()?,
            "synthetic.n_test" => syn.n_test = u()?,
            "synthetic.spp" => syn.spp = u()?,
            "synthetic.env_height" => syn.env_height = u()?,
            "synthetic.env_width" => syn.env_width = u()?,
            "synthetic.camera_distance" => syn.camera_distance = f()?,
            "synthetic.camera_angle_x" => syn.camera_angle_x = f()?,
            "synthetic.m" => syn.render.m = u()?,
            "synthetic.r" => syn.render.r = u()?,
            "synthetic.max_samples" => syn.render.max_samples = u()?,
            _ => return Err(err(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(err(msg.to_string())) };
        let m = &self.model;
        let r = &self.render;
        let t = &self.train;
        let s = &t.schedule;
        check(m.density_rank >= 1 && m.feature_rank >= 1 && m.feature_dim >= 1, "model ranks and feature_dim must be >= 1")?;
        check((0..3).all(|a| m.bbox.hi[a] > m.bbox.lo[a]), "model.bbox_max must exceed model.bbox_min on every axis")?;
        check(m.gain_hidden >= 1, "model.gain_hidden must be >= 1")?;
        check(m.init_scale.is_finite() && m.init_scale >= 0.0, "model.init_scale must be finite and >= 0")?;
        check(m.env_height >= 1 && m.env_width >= 1, "env.height and env.width must be >= 1")?;
        check(m.env_init > 0.0 && m.env_init.is_finite(), "env.init must be positive")?;
        check(r.m >= 1, "render.m must be >= 1")?;
        check(r.max_bounces >= 1, "render.max_bounces must be >= 1")?;
        check(r.max_samples >= 1, "render.max_samples must be >= 1")?;
        check(r.near >= 0.0 && r.far > r.near, "render.near must be >= 0 and below render.far")?;
        check(r.eps_t > 0.0 && r.eps_t < 1.0, "render.eps_t must lie in (0, 1)")?;
        check(r.shade_min_weight >= 0.0, "render.shade_min_weight must be >= 0")?;
        check(r.secondary_near >= 0.0, "render.secondary_near must be >= 0")?;
        check(r.noise_scale >= 0.0, "render.noise_scale must be >= 0")?;
        check(self.render_spp >= 1, "render.spp must be >= 1")?;
        check(self.background.iter().all(|c| c.is_finite() && *c >= 0.0), "data.background must be finite and >= 0")?;
        check(t.steps >= 1 && t.batch_rays >= 1 && t.chunk_rays >= 1, "train.steps, batch_rays and chunk_rays must be >= 1")?;
        check(t.lambda_o >= 0.0 && t.lambda_o.is_finite(), "train.lambda_o must be >= 0")?;
        check(t.lr_grid > 0.0 && t.lr_other > 0.0, "learning rates must be positive")?;
        check((0.0..1.0).contains(&t.adam.beta1) && (0.0..1.0).contains(&t.adam.beta2), "adam betas must lie in [0, 1)")?;
        check(t.adam.eps > 0.0, "adam.eps must be positive")?;
        check(self.schedule_scale > 0.0 && self.schedule_scale.is_finite(), "schedule.scale must be positive")?;
        check(s.warmup_start > 0.0 && s.warmup_start <= 1.0, "schedule.warmup_start must lie in (0, 1]")?;
        check(s.decay > 0.0 && s.decay <= 1.0, "schedule.decay must lie in (0, 1]")?;
        check(s.total_steps >= 1, "schedule.total_steps must be >= 1")?;
        check(s.res_start >= 2 && s.res_end >= s.res_start, "schedule resolutions need 2 <= res_start <= res_end")?;
        check(s.upsample_steps.windows(2).all(|w| w[0] < w[1]), "schedule.upsample_steps must be strictly increasing")?;
        let syn = &self.synthetic;
        check(syn.width >= 1 && syn.height >= 1 && syn.spp >= 1, "synthetic image size and spp must be >= 1")?;
        check(syn.env_height >= 1 && syn.env_width >= 1, "synthetic environment size must be >= 1")?;
        check(syn.camera_distance > 0.0 && syn.camera_angle_x > 0.0 && syn.camera_angle_x < std::f64::consts::PI, "synthetic camera out of range")?;
        check(syn.render.m >= 1 && syn.render.max_samples >= 1, "synthetic.m and synthetic.max_samples must be >= 1")?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            resolution: self.train.schedule.res_start,
            ..self.model.clone()
        }
    }

    /// Training settings with the schedule scaled and the render settings
    /// and seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule(),
            render: self.render_config(),
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn schedule(&self) -> Schedule {
        if self.schedule_scale == 1.0 {
            self.train.schedule.clone()
        } else {
            self.train.schedule.scaled(self.schedule_scale)
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            background: Vec3::from_array(self.background),
            ..self.render.clone()
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.seed,
            render: RenderConfig {
                background: Vec3::from_array(self.background),
                seed: self.seed,
                ..self.synthetic.render.clone()
            },
            ..self.synthetic.clone()
        }
    }

    pub fn adam(&self) -> AdamHyper {
        self.train.adam
    }

    pub fn bbox(&self) -> Aabb {
        self.model.bbox
    }
}
