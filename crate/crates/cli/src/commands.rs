//! The `nmf` subcommands. Each writes its artifacts under an output
//! directory and returns a short summary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nmf_core::checkpoint::{load_model, save_model, save_state};
use nmf_core::envlight::EnvironmentMap;
use nmf_core::io::{read_pfm, write_pfm, write_png};
use nmf_core::optim::params::Model;
use nmf_core::optim::train::{StepRecord, TrainState};
use nmf_core::render::{Camera, RenderedImage, Renderer};
use nmf_core::{Error, Result};

use crate::config::RunConfig;
use crate::dataset::{load_cameras, load_scene, pose_rows, write_transforms, FrameJson, TransformsJson};
use crate::metrics::{mae_normals, mae_normals_foreground, psnr, ssim};
use crate::synthetic::{make_synthetic, rotate_env_columns, SyntheticDataset};

/// Caps the worker pool at `NMF_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("NMF_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("NMF_THREADS must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(Error::Config("NMF_THREADS must be a positive integer, got 0".into()));
    }
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn data_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.data_dir.as_deref().ok_or_else(|| Error::Config("data.dir is required".into()))
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.checkpoint.as_deref().ok_or_else(|| Error::Config("render.checkpoint is required".into()))
}

struct Csv {
    file: fs::File,
    path: PathBuf,
}

impl Csv {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{header}").map_err(|e| Error::io(&path, e))?;
        Ok(Csv { file, path })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

/// Trains on `data.dir`/`data.split`. Writes `train_log.csv` (step, loss,
/// psnr, lr_multiplier), optional snapshots, periodic checkpoints and
/// `model.nmf`. On divergence the last good state is saved to
/// `last_good.nmf` before the error is returned.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    create_dir(out)?;
    let start = std::time::Instant::now();
    let ds = load_scene(data_dir(cfg)?, &cfg.data_split, cfg.background)?;
    let views = ds.train_views();
    let tcfg = cfg.train_config();
    let model = Model::init(&cfg.model_config(), cfg.seed)?;
    log::info!(
        "training {} parameters on {} views of {}x{} for {} steps",
        model.parameter_count(),
        views.len(),
        ds.width,
        ds.height,
        tcfg.steps
    );
    let mut state = TrainState::new(model, &tcfg);
    let mut csv = Csv::create(out.join("train_log.csv"), "step,loss,psnr,lr_multiplier")?;
    if cfg.snapshot_every > 0 {
        create_dir(&out.join("snapshots"))?;
    }
    let mut records = Vec::with_capacity(tcfg.steps);
    while state.step < tcfg.steps {
        let rec = match state.step(&views, &tcfg) {
            Ok(r) => r,
            Err(e) => {
                let p = out.join("last_good.nmf");
                save_state(&p, &state)?;
                log::error!("step {}: {e}; last good state saved to {}", state.step, p.display());
                return Err(e);
            }
        };
        let last = state.step == tcfg.steps;
        if cfg.log_every > 0 && (rec.step % cfg.log_every == 0 || last) {
            csv.row(&format!("{},{:.9e},{:.6},{:.9e}", rec.step, rec.loss, rec.psnr, rec.lr_mult))?;
            log::info!("step {:>6} loss {:.6e} psnr {:.3} lr x{:.4e} res {}", rec.step, rec.loss, rec.psnr, rec.lr_mult, rec.resolution);
        }
        if cfg.snapshot_every > 0 && (state.step % cfg.snapshot_every == 0 || last) {
            let view = &views[cfg.snapshot_view.min(views.len() - 1)];
            let img = Renderer::new(&state.model.scene, &state.model.env, &tcfg.render).render_image(&view.camera, 1, 0);
            write_png(&out.join(format!("snapshots/step_{:06}.png", state.step)), img.width, img.height, &img.rgb)?;
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && !last {
            save_state(&out.join(format!("checkpoint_{:06}.nmf", state.step)), &state)?;
        }
        records.push(rec);
    }
    let checkpoint = out.join("model.nmf");
    save_state(&checkpoint, &state)?;
    Ok(TrainSummary {
        records,
        checkpoint,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Rounds an image as written to 8-bit PNG.
pub fn quantize_8bit(rgb: &[f64]) -> Vec<f64> {
    rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect()
}

fn normals_png(n: &[f64]) -> Vec<f64> {
    n.iter().map(|v| 0.5 * (v + 1.0)).collect()
}

/// Cameras to render: `render.cameras` or the eval split of `data.dir`,
/// sized by `render.width/height` or by the dataset images.
fn render_cameras(cfg: &RunConfig) -> Result<Vec<(String, Camera)>> {
    let path = match &cfg.cameras {
        Some(p) => p.clone(),
        None => data_dir(cfg)?.join(format!("transforms_{}.json", cfg.eval_split)),
    };
    let (mut w, mut h) = (cfg.render_width, cfg.render_height);
    if w == 0 || h == 0 {
        let dir = path.parent().unwrap_or(Path::new("."));
        let split = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("transforms_"))
            .ok_or_else(|| Error::Config("render.width and render.height are required for this cameras file".into()))?;
        let ds = load_scene(dir, split, cfg.background)?;
        (w, h) = (ds.width, ds.height);
    }
    load_cameras(&path, w, h)
}

#[derive(Clone, Debug)]
pub struct RenderedView {
    pub name: String,
    pub camera: Camera,
    pub image: RenderedImage,
}

fn stem(name: &str) -> String {
    Path::new(name).file_name().and_then(|s| s.to_str()).unwrap_or(name).to_string()
}

/// Renders every camera and writes `<name>.png`, `<name>.pfm` (linear),
/// `<name>_normal.pfm/png` and `<name>_opacity.pfm`, plus
/// `transforms_render.json` so the output is itself a dataset.
fn render_views(model: &Model, cfg: &RunConfig, out: &Path) -> Result<Vec<RenderedView>> {
    create_dir(out)?;
    let rcfg = cfg.render_config();
    let renderer = Renderer::new(&model.scene, &model.env, &rcfg);
    let cams = render_cameras(cfg)?;
    let mut views = Vec::with_capacity(cams.len());
    let mut frames = Vec::new();
    let mut angle = 0.0;
    for (i, (name, cam)) in cams.into_iter().enumerate() {
        let name = stem(&name);
        let img = renderer.render_image(&cam, cfg.render_spp, i as u64);
        let (w, h) = (img.width, img.height);
        write_png(&out.join(format!("{name}.png")), w, h, &img.rgb)?;
        write_pfm(&out.join(format!("{name}.pfm")), w, h, &img.linear)?;
        write_pfm(&out.join(format!("{name}_normal.pfm")), w, h, &img.normals)?;
        write_png(&out.join(format!("{name}_normal.png")), w, h, &normals_png(&img.normals))?;
        let op3: Vec<f64> = img.opacity.iter().flat_map(|&a| [a; 3]).collect();
        write_pfm(&out.join(format!("{name}_opacity.pfm")), w, h, &op3)?;
        frames.push(FrameJson {
            file_path: format!("./{name}"),
            transform_matrix: pose_rows(&cam.pose),
            normal_path: Some(format!("./{name}_normal.pfm")),
            opacity_path: Some(format!("./{name}_opacity.pfm")),
        });
        angle = cam.camera_angle_x;
        log::info!("rendered {name} ({w}x{h}, {} spp)", cfg.render_spp);
        views.push(RenderedView { name, camera: cam, image: img });
    }
    write_transforms(
        &out.join("transforms_render.json"),
        &TransformsJson {
            camera_angle_x: angle,
            frames,
        },
    )?;
    Ok(views)
}

pub fn cmd_render(cfg: &RunConfig, out: &Path) -> Result<Vec<RenderedView>> {
    let model = load_model(checkpoint_path(cfg)?)?;
    render_views(&model, cfg, out)
}

/// Environment for relighting: the PFM at `relight.env`, rotated by
/// `relight.rotate_deg` about the vertical axis (whole columns).
pub fn relight_env(cfg: &RunConfig, model: &Model) -> Result<EnvironmentMap> {
    let path = cfg.relight_env.as_deref().ok_or_else(|| Error::Config("relight.env is required".into()))?;
    let (w, h, mut rgb) = read_pfm(path)?;
    if rgb.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Format {
            kind: "pfm",
            path: path.to_path_buf(),
            reason: "environment radiance must be finite and non-negative".into(),
        });
    }
    let cols = cfg.relight_rotate_deg / 360.0 * w as f64;
    let shift = cols.round();
    if (cols - shift).abs() > 1e-9 {
        log::warn!("relight rotation {}° is not a whole number of columns; using {shift}", cfg.relight_rotate_deg);
    }
    if shift != 0.0 {
        rgb = rotate_env_columns(h, w, &rgb, shift as isize);
    }
    // a map equal to the model's own at file precision keeps the model's
    // environment exactly
    let own = &model.env;
    if (own.h, own.w) == (h, w) && own.radiance().iter().zip(&rgb).all(|(a, b)| *a as f32 == *b as f32) {
        return Ok(own.clone());
    }
    Ok(EnvironmentMap::from_radiance(h, w, &rgb))
}

pub fn cmd_relight(cfg: &RunConfig, out: &Path) -> Result<Vec<RenderedView>> {
    let mut model = load_model(checkpoint_path(cfg)?)?;
    model.env = relight_env(cfg, &model)?;
    render_views(&model, cfg, out)
}

/// Writes the model's environment map as a PFM.
pub fn export_env(model: &Model, path: &Path) -> Result<()> {
    write_pfm(path, model.env.w, model.env.h, model.env.radiance())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Opacity-weighted angular error averaged over all pixels.
    pub mae: Option<f64>,
    /// The same error averaged over ground-truth opacity only.
    pub mae_foreground: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub views: Vec<ViewMetrics>,
    pub mean: ViewMetrics,
}

/// Scores renders of the eval split against its images and, when present,
/// reference normals. Predictions are scored as written to disk: colors
/// at 8 bits, normals at single precision. Writes `eval.csv`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalSummary> {
    create_dir(out)?;
    let model = load_model(checkpoint_path(cfg)?)?;
    let ds = load_scene(data_dir(cfg)?, &cfg.eval_split, cfg.background)?;
    let rcfg = cfg.render_config();
    let renderer = Renderer::new(&model.scene, &model.env, &rcfg);
    let mut views = Vec::new();
    for (i, f) in ds.frames.iter().enumerate() {
        let img = renderer.render_image(&f.camera, cfg.render_spp, i as u64);
        let rgb = quantize_8bit(&img.rgb);
        let normals: Vec<f64> = img.normals.iter().map(|&v| v as f32 as f64).collect();
        let (mae, mae_fg) = match (&f.normals, &f.opacity) {
            (Some(n), Some(a)) => (Some(mae_normals(&normals, n, a)?), Some(mae_normals_foreground(&normals, n, a)?)),
            _ => (None, None),
        };
        let name = f.image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("view").to_string();
        views.push(ViewMetrics {
            name,
            psnr: psnr(&rgb, &f.rgb)?,
            ssim: ssim(&rgb, &f.rgb, ds.width, ds.height)?,
            mae,
            mae_foreground: mae_fg,
        });
    }
    let n = views.len() as f64;
    let mean_opt = |get: fn(&ViewMetrics) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = views.iter().map(get).collect();
        v.map(|v| v.iter().sum::<f64>() / n)
    };
    let mean = ViewMetrics {
        name: "mean".into(),
        psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        mae: mean_opt(|v| v.mae),
        mae_foreground: mean_opt(|v| v.mae_foreground),
    };
    let mut csv = Csv::create(out.join("eval.csv"), "view,psnr,ssim,mae_deg,mae_foreground_deg")?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for v in views.iter().chain(std::iter::once(&mean)) {
        csv.row(&format!("{},{:.6},{:.6},{},{}", v.name, v.psnr, v.ssim, fmt(v.mae), fmt(v.mae_foreground)))?;
    }
    Ok(EvalSummary { views, mean })
}

pub fn cmd_make_synthetic(cfg: &RunConfig, out: &Path) -> Result<SyntheticDataset> {
    make_synthetic(out, &cfg.synthetic_config())
}

/// Copies a trained model's checkpoint next to the outputs; used by
/// callers that chain commands.
pub fn save_model_to(model: &Model, path: &Path) -> Result<()> {
    save_model(path, model)
}
