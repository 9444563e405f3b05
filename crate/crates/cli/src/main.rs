use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nmf_cli::commands;
use nmf_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "nmf", about = "Neural microfacet field reconstruction, rendering and relighting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a posed image set.
    Train(Common),
    /// Render views of a trained model.
    Render(Common),
    /// Render a trained model under a different environment map.
    Relight(Common),
    /// Score renders of a held-out split.
    Eval(Common),
    /// Write the two-sphere synthetic dataset.
    MakeSynthetic(Common),
}

fn run(cli: Cli) -> nmf_core::Result<()> {
    commands::init_threads()?;
    let (Command::Train(c) | Command::Render(c) | Command::Relight(c) | Command::Eval(c) | Command::MakeSynthetic(c)) = &cli.command;
    let cfg = match &c.config {
        Some(p) => RunConfig::from_file(p, &c.set)?,
        None => RunConfig::from_overrides(&c.set)?,
    };
    let out = &c.out;
    match &cli.command {
        Command::Train(_) => {
            let s = commands::cmd_train(&cfg, out)?;
            if let Some(r) = s.records.last() {
                println!("trained {} steps in {:.1}s, final loss {:.6e}, psnr {:.3}", r.step, s.seconds, r.loss, r.psnr);
            }
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Render(_) => {
            let v = commands::cmd_render(&cfg, out)?;
            println!("rendered {} views to {}", v.len(), out.display());
        }
        Command::Relight(_) => {
            let v = commands::cmd_relight(&cfg, out)?;
            println!("relit {} views to {}", v.len(), out.display());
        }
        Command::Eval(_) => {
            let s = commands::cmd_eval(&cfg, out)?;
            let m = &s.mean;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
            println!(
                "views {} psnr {:.3} ssim {:.4} mae {} mae_foreground {}",
                s.views.len(),
                m.psnr,
                m.ssim,
                fmt(m.mae),
                fmt(m.mae_foreground)
            );
        }
        Command::MakeSynthetic(_) => {
            let d = commands::cmd_make_synthetic(&cfg, out)?;
            println!("dataset {} env {}", d.dir.display(), d.env_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
