//! Command implementations: training, inference, evaluation, fusion, and
//! profiling. Everything is callable as a library; `main` is a thin clap
//! wrapper.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::ArrayD;
use rand::Rng;
use rand::SeedableRng;

use crowdpoint::backbone::image_to_input;
use crowdpoint::checkpoint::{self, Checkpoint};
use crowdpoint::data::{load_annotations, random_crop, random_flip, synth_scenes, Scene};
use crowdpoint::decoder::{make_anchors, DenseNodes, PredPoint};
use crowdpoint::matching::{compute_loss, LossBreakdown};
use crowdpoint::metrics::{counting_metrics, localization_metrics, LocalizationTally};
use crowdpoint::model::{
    dense_forward, infer_image, maybe_load_pretrained, NetConfig, PointNet, ProfileReport,
    ANCHOR_STRIDE,
};
use crowdpoint::nn::{Adam, ParamStore, Session};
use crowdpoint::ChaCha8Rng;

use crate::config::{DataSource, RunConfig};

pub fn load_scenes(source: &DataSource) -> Result<Vec<Scene>> {
    match source {
        DataSource::Root(root) => Ok(load_annotations(root)?),
        DataSource::Synth {
            count,
            min_points,
            max_points,
            size,
            seed,
        } => Ok(synth_scenes(
            *count,
            (*min_points, *max_points),
            *size,
            *seed,
        )?),
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub step_losses: Vec<LossBreakdown>,
    pub val_maes: Vec<f64>,
    pub final_checkpoint: PathBuf,
}

/// Train per the config, logging one machine-parseable line per step and
/// per epoch, writing a checkpoint after every epoch.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, log: &mut dyn Write) -> Result<TrainReport> {
    cfg.validate()?;
    let source = cfg
        .data
        .as_ref()
        .ok_or_else(|| anyhow!("training needs `data.root` or `data.synth.count`"))?;
    let scenes = load_scenes(source)?;
    if scenes.is_empty() {
        bail!("no training scenes");
    }
    let augment = cfg.augment();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let mut model = PointNet::new(&mut store, &mut rng, &cfg.net)?;
    let mut adam = Adam::<f32>::new(cfg.learning_rate);
    let mut start_epoch = 0u32;
    if let Some(path) = resume {
        let ckpt = checkpoint::load::<f32>(path)
            .with_context(|| format!("resume checkpoint {}", path.display()))?;
        let (m, s) = checkpoint::restore_model(&ckpt)?;
        model = m;
        store = s;
        if let Some(state) = ckpt.optimizer.clone() {
            adam = state.into_optimizer();
            adam.lr = cfg.learning_rate;
        }
        start_epoch = ckpt.epoch;
    } else if let Some(warning) = maybe_load_pretrained(&mut store, &cfg.net.backbone)? {
        writeln!(log, "warning: {warning}")?;
    }

    // A resumed run samples a fresh (but deterministic) sequence rather
    // than replaying the draws of the epochs already completed.
    if start_epoch > 0 {
        rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (start_epoch as u64).wrapping_mul(0x9E3779B97F4A7C15),
        );
    }

    let anchors = make_anchors(cfg.crop_size, cfg.crop_size, ANCHOR_STRIDE)?;
    let config_text = cfg.to_text();
    let mut report = TrainReport {
        step_losses: Vec::new(),
        val_maes: Vec::new(),
        final_checkpoint: PathBuf::new(),
    };

    let mut global_step = start_epoch as usize * cfg.steps_per_epoch;
    for epoch in start_epoch as usize..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            global_step += 1;
            let mut grad_acc: BTreeMap<String, (crowdpoint::nn::ParamId, ArrayD<f32>)> =
                BTreeMap::new();
            let mut mean = LossBreakdown {
                total: 0.0,
                cls: 0.0,
                reg: 0.0,
                matches: 0,
            };
            for _ in 0..cfg.batch_size {
                let scene = &scenes[rng.random_range(0..scenes.len())];
                let cropped = random_crop(scene, &augment, &mut rng)?;
                let flipped = random_flip(&cropped, &augment, &mut rng)?;
                let mut sess = Session::new(&mut store, true);
                let input = sess.input(image_to_input::<f32>(&flipped.image));
                let dense: DenseNodes = model.forward(&mut sess, input, None)?;
                let (loss, breakdown) =
                    compute_loss(&mut sess.tape, &dense, &anchors, &flipped.points, &cfg.loss)?;
                mean.total += breakdown.total / cfg.batch_size as f64;
                mean.cls += breakdown.cls / cfg.batch_size as f64;
                mean.reg += breakdown.reg / cfg.batch_size as f64;
                mean.matches += breakdown.matches;
                let scale = 1.0 / cfg.batch_size as f32;
                for (pid, grad) in sess.grads(loss) {
                    let name = sess.store.name(pid).to_string();
                    let scaled = grad.mapv(|g| g * scale);
                    grad_acc
                        .entry(name)
                        .and_modify(|(_, acc)| *acc += &scaled)
                        .or_insert((pid, scaled));
                }
            }
            let grads: Vec<_> = grad_acc.into_values().collect();
            adam.step(&mut store, &grads);
            writeln!(
                log,
                "step={global_step} loss={:.6} cls={:.6} reg={:.6} matches={}",
                mean.total, mean.cls, mean.reg, mean.matches
            )?;
            report.step_losses.push(mean);
        }

        // Validation MAE over the training scenes (no held-out split at
        // desk scale).
        let mut counts = Vec::with_capacity(scenes.len());
        for scene in &scenes {
            let pred = infer_image(&model, &mut store, &scene.image, cfg.tau)?;
            counts.push((scene.count(), pred.len()));
        }
        let val = counting_metrics(&counts)?;
        writeln!(log, "epoch={} val_mae={:.4}", epoch + 1, val.mae)?;
        report.val_maes.push(val.mae);

        let ckpt = Checkpoint::from_store(
            model.config(),
            &store,
            (epoch + 1) as u32,
            &config_text,
            Some(&adam),
        );
        let path = cfg.out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
        checkpoint::save(&path, &ckpt)?;
        checkpoint::save(&cfg.out_dir.join("latest.ckpt"), &ckpt)?;
        report.final_checkpoint = path;
    }
    Ok(report)
}

#[derive(serde::Serialize)]
pub struct PredRecord {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Run a checkpoint over one image; writes the prediction JSON and returns
/// the points.
pub fn infer(
    ckpt_path: &Path,
    image_path: &Path,
    tau: f64,
    out: Option<&Path>,
) -> Result<(Vec<PredPoint>, PathBuf)> {
    let ckpt = checkpoint::load::<f32>(ckpt_path)?;
    let (model, mut store) = checkpoint::restore_model(&ckpt)?;
    let image = load_rgb(image_path)?;
    let points = infer_image(&model, &mut store, &image, tau)?;
    let out_path = out
        .map(PathBuf::from)
        .unwrap_or_else(|| image_path.with_extension("pred.json"));
    write_predictions(&points, &out_path)?;
    Ok((points, out_path))
}

pub fn write_predictions(points: &[PredPoint], path: &Path) -> Result<()> {
    let records: Vec<PredRecord> = points
        .iter()
        .map(|p| PredRecord {
            x: p.x,
            y: p.y,
            score: p.score,
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&records)?)
        .with_context(|| format!("writing predictions to {}", path.display()))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MetricsReport {
    pub fn flat_text(&self) -> String {
        format!(
            "mae = {}\nrmse = {}\nprecision = {}\nrecall = {}\nf1 = {}\ntp = {}\nfp = {}\nfn = {}\n",
            self.mae, self.rmse, self.precision, self.recall, self.f1, self.tp, self.fp, self.fn_
        )
    }
}

/// Evaluate a model over scenes: counting metrics plus micro-averaged
/// localization at `delta`.
pub fn evaluate_scenes(
    model: &PointNet,
    store: &mut ParamStore<f32>,
    scenes: &[Scene],
    tau: f64,
    delta: f64,
) -> Result<MetricsReport> {
    if scenes.is_empty() {
        bail!("evaluation dataset is empty");
    }
    let mut counts = Vec::with_capacity(scenes.len());
    let mut tally = LocalizationTally::default();
    for scene in scenes {
        let pred = infer_image(model, store, &scene.image, tau)?;
        counts.push((scene.count(), pred.len()));
        let loc = localization_metrics(&pred, &scene.points, delta)?;
        tally.add(&loc);
    }
    let count = counting_metrics(&counts)?;
    let loc = tally.finalize();
    Ok(MetricsReport {
        mae: count.mae,
        rmse: count.rmse,
        precision: loc.precision,
        recall: loc.recall,
        f1: loc.f1,
        tp: loc.tp,
        fp: loc.fp,
        fn_: loc.fn_,
    })
}

/// Evaluate a checkpoint over a canonical dataset directory; writes
/// `<out>.json` and `<out>.txt`.
pub fn evaluate(
    ckpt_path: &Path,
    data_dir: &Path,
    tau: f64,
    delta: f64,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let ckpt = checkpoint::load::<f32>(ckpt_path)?;
    let (model, mut store) = checkpoint::restore_model(&ckpt)?;
    let scenes = load_annotations(data_dir)?;
    let report = evaluate_scenes(&model, &mut store, &scenes, tau, delta)?;
    if let Some(base) = out {
        let json_path = base.with_extension("json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
        std::fs::write(base.with_extension("txt"), report.flat_text())?;
    }
    Ok(report)
}

/// Fold every RepConv of a checkpoint; the output checkpoint is flagged
/// fused and drops optimizer state.
pub fn fuse_checkpoint(input: &Path, output: &Path) -> Result<usize> {
    let ckpt = checkpoint::load::<f32>(input)?;
    if ckpt.is_fused() {
        bail!("checkpoint {} is already fused", input.display());
    }
    let (mut model, mut store) = checkpoint::restore_model(&ckpt)?;
    let n = model.fuse(&mut store)?;
    let fused = Checkpoint::from_store(model.config(), &store, ckpt.epoch, &ckpt.config_text, None);
    checkpoint::save(output, &fused)?;
    Ok(n)
}

pub struct ProfileOutput {
    pub report: ProfileReport,
    pub forward_mean_ms: f64,
}

/// Reference values published for the full-scale configuration of this
/// architecture, echoed for comparison.
pub const REFERENCE_FULL_PARAMS: u64 = 2_515_008;
pub const REFERENCE_FULL_FLOPS: &str = "133.871G";

/// Analytic parameter/madd counts plus a timed forward pass (10 warmups,
/// mean of 50 runs).
pub fn profile_net(
    net: &NetConfig,
    seed: u64,
    h: usize,
    w: usize,
    timed: bool,
) -> Result<ProfileOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let model = PointNet::new(&mut store, &mut rng, net)?;
    let report = model.profile(h, w);
    let mut forward_mean_ms = 0.0;
    if timed {
        let image = ndarray::Array3::<f32>::from_elem((3, h, w), 0.5);
        for _ in 0..10 {
            let _ = dense_forward(&model, &mut store, &image)?;
        }
        let start = std::time::Instant::now();
        for _ in 0..50 {
            let _ = dense_forward(&model, &mut store, &image)?;
        }
        forward_mean_ms = start.elapsed().as_secs_f64() * 1000.0 / 50.0;
    }
    Ok(ProfileOutput {
        report,
        forward_mean_ms,
    })
}

pub fn profile_text(out: &ProfileOutput, timed: bool) -> String {
    let r = &out.report;
    let mut s = format!(
        "input = {}x{} (padded {}x{})\nencoder.params = {}\ndecoder.params = {}\nhead.params = {}\ntotal.params = {}\nmadds = {} ({:.3} GMac)\n",
        r.input.0,
        r.input.1,
        r.padded.0,
        r.padded.1,
        r.encoder_params,
        r.decoder_params,
        r.head_params,
        r.total_params,
        r.madds,
        r.madds as f64 / 1e9,
    );
    if timed {
        s.push_str(&format!("forward.mean_ms = {:.3}\n", out.forward_mean_ms));
    }
    s.push_str(&format!(
        "reference.full_scale.params = {REFERENCE_FULL_PARAMS}\nreference.full_scale.flops = {REFERENCE_FULL_FLOPS}\n"
    ));
    s
}

pub fn load_rgb(path: &Path) -> Result<ndarray::Array3<f32>> {
    let img = image::open(path)
        .with_context(|| format!("reading image {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = ndarray::Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = pixel.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}
