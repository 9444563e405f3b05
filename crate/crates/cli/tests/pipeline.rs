//! Dataset generation, training, rendering, relighting and evaluation on a
//! tiny synthetic scene.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use nmf_cli::commands::{cmd_eval, cmd_make_synthetic, cmd_relight, cmd_render, cmd_train, export_env, save_model_to};
use nmf_cli::config::RunConfig;
use nmf_cli::dataset::load_scene;
use nmf_core::checkpoint::load_model;

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    checkpoint: PathBuf,
}

fn base(root: &Path) -> Vec<String> {
    vec![
        "synthetic.width = 16".into(),
        "synthetic.height = 16".into(),
        "synthetic.n_train = 4".into(),
        "synthetic.n_test = 2".into(),
        "synthetic.spp = 2".into(),
        format!("data.dir = {:?}", root.join("data").display().to_string()),
        "model.bbox_min = [-1.0, -1.0, -1.0]".into(),
        "model.bbox_max = [1.0, 1.0, 1.0]".into(),
        "schedule.res_start = 16".into(),
        "schedule.res_end = 20".into(),
        "schedule.scale = 0.002".into(),
        "train.steps = 10".into(),
        "train.batch_rays = 128".into(),
        "train.log_every = 5".into(),
        "train.checkpoint_every = 0".into(),
        "render.max_samples = 48".into(),
        "render.spp = 1".into(),
    ]
}

fn cfg(root: &Path, extra: &[String]) -> RunConfig {
    let mut o = base(root);
    o.extend_from_slice(extra);
    RunConfig::from_overrides(&o).unwrap()
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let c = cfg(&root, &[]);
        cmd_make_synthetic(&c, &root.join("data")).unwrap();
        let s = cmd_train(&c, &root.join("train")).unwrap();
        Fixture {
            _tmp: tmp,
            root,
            checkpoint: s.checkpoint,
        }
    })
}

fn with_checkpoint(f: &Fixture, ckpt: &Path, extra: &[&str]) -> RunConfig {
    let mut o = vec![format!("render.checkpoint = {:?}", ckpt.display().to_string())];
    o.extend(extra.iter().map(|s| s.to_string()));
    cfg(&f.root, &o)
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn regeneration_is_bitwise_identical() {
    let f = fixture();
    let c = cfg(&f.root, &[]);
    let again = f.root.join("data_again");
    cmd_make_synthetic(&c, &again).unwrap();
    for name in ["transforms_train.json", "transforms_test.json"] {
        assert_eq!(read(f.root.join("data").join(name)), read(again.join(name)));
    }
    let a = load_scene(&f.root.join("data"), "train", [1.0; 3]).unwrap();
    let b = load_scene(&again, "train", [1.0; 3]).unwrap();
    for (x, y) in a.frames.iter().zip(&b.frames) {
        assert_eq!(read(&x.image_path), read(&y.image_path));
    }
}

#[test]
fn synthetic_views_show_both_spheres() {
    let f = fixture();
    let ds = load_scene(&f.root.join("data"), "test", [1.0; 3]).unwrap();
    for fr in &ds.frames {
        let op = fr.opacity.as_ref().unwrap();
        let covered: Vec<usize> = (0..op.len()).filter(|&i| op[i] > 0.99).collect();
        assert!(covered.len() > 10);
        // sphere pixels are shaded, not black and not the white background
        let lum = |i: usize| (fr.rgb[3 * i] + fr.rgb[3 * i + 1] + fr.rgb[3 * i + 2]) / 3.0;
        assert!(covered.iter().all(|&i| lum(i) > 0.0));
        assert!(covered.iter().any(|&i| lum(i) < 0.95));
        let n = fr.normals.as_ref().unwrap();
        for &i in &covered {
            let l = (n[3 * i].powi(2) + n[3 * i + 1].powi(2) + n[3 * i + 2].powi(2)).sqrt();
            assert!((l - 1.0).abs() < 1e-3);
        }
    }
}

#[test]
fn training_writes_log_and_checkpoint() {
    let f = fixture();
    let log = String::from_utf8(read(f.root.join("train/train_log.csv"))).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,loss,psnr,lr_multiplier"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 2);
    for r in rows {
        let loss: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
    }
    assert!(f.checkpoint.exists());
}

#[test]
fn checkpoint_round_trip_renders_identically() {
    let f = fixture();
    let model = load_model(&f.checkpoint).unwrap();
    let copy = f.root.join("copy.nmf");
    save_model_to(&model, &copy).unwrap();
    let a = cmd_render(&with_checkpoint(f, &f.checkpoint, &[]), &f.root.join("ra")).unwrap();
    let b = cmd_render(&with_checkpoint(f, &copy, &[]), &f.root.join("rb")).unwrap();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image.linear, y.image.linear);
        assert_eq!(read(f.root.join("ra").join(format!("{}.png", x.name))), read(f.root.join("rb").join(format!("{}.png", y.name))));
    }
}

#[test]
fn relighting_with_own_environment_matches_render() {
    let f = fixture();
    let model = load_model(&f.checkpoint).unwrap();
    let env = f.root.join("own_env.pfm");
    export_env(&model, &env).unwrap();
    let env_key = format!("relight.env = {:?}", env.display().to_string());
    let plain = cmd_render(&with_checkpoint(f, &f.checkpoint, &[]), &f.root.join("plain")).unwrap();
    let relit = cmd_relight(&with_checkpoint(f, &f.checkpoint, &[&env_key]), &f.root.join("relit")).unwrap();
    for (x, y) in plain.iter().zip(&relit) {
        let name = format!("{}.png", x.name);
        assert_eq!(read(f.root.join("plain").join(&name)), read(f.root.join("relit").join(&name)));
        assert_eq!(x.image.linear, y.image.linear);
    }
}

#[test]
fn relighting_with_rotated_environment_changes_the_render() {
    let f = fixture();
    let model = load_model(&f.checkpoint).unwrap();
    let env = f.root.join("rot_env.pfm");
    // a single bright column so any rotation moves the lighting
    let (h, w) = (model.env.h, model.env.w);
    let rgb: Vec<f64> = (0..h * w).flat_map(|i| if i % w == 0 { [8.0; 3] } else { [0.1; 3] }).collect();
    nmf_core::io::write_pfm(&env, w, h, &rgb).unwrap();
    let env_key = format!("relight.env = {:?}", env.display().to_string());
    let a = cmd_relight(&with_checkpoint(f, &f.checkpoint, &[&env_key]), &f.root.join("rot0")).unwrap();
    let b = cmd_relight(&with_checkpoint(f, &f.checkpoint, &[&env_key, "relight.rotate_deg = 180.0"]), &f.root.join("rot180")).unwrap();
    assert_ne!(a[0].image.linear, b[0].image.linear);
}

#[test]
fn render_output_scores_perfectly_against_itself() {
    let f = fixture();
    let ckpt = format!("render.checkpoint = {:?}", f.checkpoint.display().to_string());
    let out = f.root.join("selfref");
    cmd_render(&cfg(&f.root, &[ckpt.clone()]), &out).unwrap();
    let c = cfg(
        &f.root,
        &[ckpt, format!("data.dir = {:?}", out.display().to_string()), "data.eval_split = \"render\"".into()],
    );
    let s = cmd_eval(&c, &f.root.join("selfeval")).unwrap();
    assert_eq!(s.views.len(), 2);
    assert_eq!(s.mean.psnr, 99.0);
    assert!((s.mean.ssim - 1.0).abs() < 1e-12);
    assert_eq!(s.mean.mae, Some(0.0));
    assert_eq!(s.mean.mae_foreground, Some(0.0));
    let csv = String::from_utf8(read(f.root.join("selfeval/eval.csv"))).unwrap();
    assert!(csv.starts_with("view,psnr,ssim,mae_deg,mae_foreground_deg\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn binary_runs_the_full_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut toml = String::from("[synthetic]\nwidth = 12\nheight = 12\nn_train = 3\nn_test = 1\nspp = 1\n");
    toml += "[data]\ndir = \"data\"\n[model]\nbbox_min = [-1.0, -1.0, -1.0]\nbbox_max = [1.0, 1.0, 1.0]\n";
    toml += "[schedule]\nres_start = 16\nres_end = 16\nscale = 0.002\n";
    toml += "[train]\nsteps = 4\nbatch_rays = 64\ncheckpoint_every = 0\n";
    toml += "[render]\nmax_samples = 32\ncheckpoint = \"train/model.nmf\"\n";
    std::fs::write(dir.join("run.toml"), toml).unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_nmf"))
            .args(args)
            .current_dir(dir)
            .env("RUST_LOG", "off")
            .env("NMF_THREADS", "1")
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["make-synthetic", "--config", "run.toml", "--out", "data"]);
    assert!(run(&["train", "--config", "run.toml", "--out", "train"]).contains("checkpoint"));
    assert!(run(&["render", "--config", "run.toml", "--out", "render"]).starts_with("rendered 1 views"));
    let eval = run(&["eval", "--config", "run.toml", "--set", "train.steps=4", "--out", "eval"]);
    assert!(eval.starts_with("views 1 psnr"), "{eval}");
    assert!(dir.join("eval/eval.csv").exists());
}
