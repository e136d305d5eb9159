use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crowdpoint_cli::config::RunConfig;
use crowdpoint_cli::{ops, render};

#[derive(Parser)]
#[command(
    name = "crowdpoint",
    about = "Point-regression crowd counting and localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file; writes checkpoints and a log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict points for one image; writes a JSON prediction file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Prediction file path (default: image path with .pred.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 4.0)]
        delta: f64,
        /// Report base path; writes `<out>.json` and `<out>.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold RepConv branches into single kernels for inference.
    Fuse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter counts, multiply-add estimate, and timed forward pass.
    Profile {
        #[arg(long)]
        config: PathBuf,
        /// Input size as H,W (default 128,128).
        #[arg(long, value_parser = parse_hw, default_value = "128,128")]
        hw: (usize, usize),
    },
    /// Draw predicted points and the count onto an image.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
    /// Print the configuration reference page.
    ConfigDoc,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(',')
        .ok_or_else(|| format!("expected H,W — got `{s}`"))?;
    Ok((
        h.trim().parse().map_err(|e| format!("bad H: {e}"))?,
        w.trim().parse().map_err(|e| format!("bad W: {e}"))?,
    ))
}

fn read_config(path: &PathBuf) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    RunConfig::parse(&text)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, resume } => {
            let cfg = read_config(&config)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let log_path = cfg.out_dir.join("train.log");
            let mut log_file = std::fs::File::create(&log_path)?;
            let stdout = std::io::stdout();
            let mut tee = Tee {
                a: &mut log_file,
                b: stdout.lock(),
            };
            let report = ops::train(&cfg, resume.as_deref(), &mut tee)?;
            println!(
                "done: {} steps, final checkpoint {}",
                report.step_losses.len(),
                report.final_checkpoint.display()
            );
        }
        Command::Infer {
            ckpt,
            image,
            tau,
            out,
        } => {
            let (points, out_path) = ops::infer(&ckpt, &image, tau, out.as_deref())?;
            println!("count = {}", points.len());
            println!("predictions = {}", out_path.display());
        }
        Command::Eval {
            ckpt,
            data,
            tau,
            delta,
            out,
        } => {
            let report = ops::evaluate(&ckpt, &data, tau, delta, out.as_deref())?;
            print!("{}", report.flat_text());
        }
        Command::Fuse { input, out } => {
            let n = ops::fuse_checkpoint(&input, &out)?;
            println!("fused {n} repconv blocks -> {}", out.display());
        }
        Command::Profile { config, hw } => {
            let cfg = read_config(&config)?;
            let out = ops::profile_net(&cfg.net, cfg.seed, hw.0, hw.1, true)?;
            print!("{}", ops::profile_text(&out, true));
        }
        Command::Render {
            ckpt,
            image,
            out,
            tau,
        } => {
            let count = render::render(&ckpt, &image, &out, tau)?;
            println!("count = {count}");
            println!("overlay = {}", out.display());
        }
        Command::ConfigDoc => {
            print!("{}", RunConfig::reference_page());
        }
    }
    Ok(())
}

struct Tee<'a, B: Write> {
    a: &'a mut std::fs::File,
    b: B,
}

impl<B: Write> Write for Tee<'_, B> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.a.write_all(buf)?;
        self.b.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.a.flush()?;
        self.b.flush()
    }
}
