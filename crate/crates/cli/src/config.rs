//! Run configuration: flat `key = value` text with dotted sections.
//! `#` starts a comment; unknown keys and malformed values are errors that
//! name the offending field.

use std::path::PathBuf;

use crowdpoint::backbone::Variant;
use crowdpoint::blocks::FuseMode;
use crowdpoint::data::AugmentConfig;
use crowdpoint::matching::LossWeights;
use crowdpoint::model::NetConfig;

use anyhow::{anyhow, bail, Result};

#[derive(Clone, Debug)]
pub enum DataSource {
    /// Canonical directory of images with JSON point sidecars.
    Root(PathBuf),
    /// In-memory synthetic scenes.
    Synth {
        count: usize,
        min_points: usize,
        max_points: usize,
        size: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub delta: f64,
    pub out_dir: PathBuf,
    pub net: NetConfig,
    pub loss: LossWeights,
    pub crop_size: usize,
    pub flip_probability: f64,
    pub data: Option<DataSource>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 20,
            steps_per_epoch: 100,
            batch_size: 1,
            learning_rate: 1e-4,
            tau: 0.5,
            delta: 4.0,
            out_dir: PathBuf::from("runs/default"),
            net: NetConfig::tiny(),
            loss: LossWeights::default(),
            crop_size: 128,
            flip_probability: 0.5,
            data: None,
        }
    }
}

impl RunConfig {
    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            crop_size: self.crop_size,
            flip_probability: self.flip_probability,
            seed: self.seed,
        }
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut synth_count: Option<usize> = None;
        let mut synth_min = 3usize;
        let mut synth_max = 20usize;
        let mut synth_size = 128usize;
        let mut synth_seed = 77u64;
        let mut data_root: Option<PathBuf> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    "config line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                );
            };
            let key = key.trim();
            let value = value.trim();
            let ctx = |what: &str| format!("config field `{key}`: invalid {what} `{value}`");
            macro_rules! num {
                ($ty:ty, $what:expr) => {
                    value.parse::<$ty>().map_err(|_| anyhow!(ctx($what)))?
                };
            }
            let parse_bool = || -> Result<bool> {
                match value {
                    "true" | "1" | "yes" => Ok(true),
                    "false" | "0" | "no" => Ok(false),
                    _ => Err(anyhow!(ctx("boolean"))),
                }
            };
            match key {
                "seed" => cfg.seed = num!(u64, "integer"),
                "epochs" => cfg.epochs = num!(usize, "integer"),
                "steps_per_epoch" => cfg.steps_per_epoch = num!(usize, "integer"),
                "batch_size" => cfg.batch_size = num!(usize, "integer"),
                "learning_rate" => cfg.learning_rate = num!(f64, "number"),
                "tau" => cfg.tau = num!(f64, "number"),
                "delta" => cfg.delta = num!(f64, "number"),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "backbone.variant" => {
                    cfg.net.backbone.variant =
                        Variant::parse(value).map_err(|_| anyhow!(ctx("variant")))?
                }
                "backbone.pretrained" => cfg.net.backbone.pretrained = parse_bool()?,
                "backbone.weights" => cfg.net.backbone.weights_path = Some(PathBuf::from(value)),
                "decoder.width" => cfg.net.decoder.width = num!(usize, "integer"),
                "decoder.use_spam" => cfg.net.decoder.use_spam = parse_bool()?,
                "decoder.use_afam" => cfg.net.decoder.use_afam = parse_bool()?,
                "spam.heads" => cfg.net.spam.heads = num!(usize, "integer"),
                "spam.codebook_size" => cfg.net.spam.codebook_size = num!(usize, "integer"),
                "spam.fuse" => {
                    cfg.net.spam.fuse = match value {
                        "sum" => FuseMode::Sum,
                        "concat_project" => FuseMode::ConcatProject,
                        _ => bail!(ctx("fuse mode (sum|concat_project)")),
                    }
                }
                "afam.reduction" => cfg.net.afam.reduction = num!(usize, "integer"),
                "afam.kernel_a" => cfg.net.afam.kernel_a = num!(usize, "integer"),
                "afam.kernel_b" => cfg.net.afam.kernel_b = num!(usize, "integer"),
                "afam.split_paths" => cfg.net.afam.split_paths = parse_bool()?,
                "loss.w_loc" => cfg.loss.w_loc = num!(f64, "number"),
                "loss.w_cost_loc" => cfg.loss.w_cost_loc = num!(f64, "number"),
                "loss.use_score" => cfg.loss.use_score = parse_bool()?,
                "augment.crop_size" => cfg.crop_size = num!(usize, "integer"),
                "augment.flip_probability" => cfg.flip_probability = num!(f64, "number"),
                "data.root" => data_root = Some(PathBuf::from(value)),
                "data.synth.count" => synth_count = Some(num!(usize, "integer")),
                "data.synth.min_points" => synth_min = num!(usize, "integer"),
                "data.synth.max_points" => synth_max = num!(usize, "integer"),
                "data.synth.size" => synth_size = num!(usize, "integer"),
                "data.synth.seed" => synth_seed = num!(u64, "integer"),
                other => bail!("unknown config field `{other}`"),
            }
        }

        cfg.net = cfg.net.normalized();
        cfg.data = match (data_root, synth_count) {
            (Some(_), Some(_)) => {
                bail!("config fields `data.root` and `data.synth.count` are mutually exclusive")
            }
            (Some(root), None) => Some(DataSource::Root(root)),
            (None, Some(count)) => Some(DataSource::Synth {
                count,
                min_points: synth_min,
                max_points: synth_max,
                size: synth_size,
                seed: synth_seed,
            }),
            (None, None) => None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            bail!("config field `learning_rate` must be positive");
        }
        if self.batch_size == 0 {
            bail!("config field `batch_size` must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            bail!("config field `augment.flip_probability` must be in [0,1]");
        }
        self.net
            .validate()
            .map_err(|e| anyhow!("config model section: {e}"))?;
        self.loss
            .validate()
            .map_err(|e| anyhow!("config loss section: {e}"))?;
        Ok(())
    }

    /// Canonical echo of every field, stored inside checkpoints.
    pub fn to_text(&self) -> String {
        let data_lines = match &self.data {
            None => String::new(),
            Some(DataSource::Root(p)) => format!("data.root = {}\n", p.display()),
            Some(DataSource::Synth {
                count,
                min_points,
                max_points,
                size,
                seed,
            }) => format!(
                "data.synth.count = {count}\ndata.synth.min_points = {min_points}\ndata.synth.max_points = {max_points}\ndata.synth.size = {size}\ndata.synth.seed = {seed}\n"
            ),
        };
        let weights = match &self.net.backbone.weights_path {
            Some(p) => format!("backbone.weights = {}\n", p.display()),
            None => String::new(),
        };
        format!(
            "seed = {}\nepochs = {}\nsteps_per_epoch = {}\nbatch_size = {}\nlearning_rate = {}\ntau = {}\ndelta = {}\nout_dir = {}\nbackbone.variant = {}\nbackbone.pretrained = {}\n{}decoder.width = {}\ndecoder.use_spam = {}\ndecoder.use_afam = {}\nspam.heads = {}\nspam.codebook_size = {}\nspam.fuse = {}\nafam.reduction = {}\nafam.kernel_a = {}\nafam.kernel_b = {}\nafam.split_paths = {}\nloss.w_loc = {}\nloss.w_cost_loc = {}\nloss.use_score = {}\naugment.crop_size = {}\naugment.flip_probability = {}\n{}",
            self.seed,
            self.epochs,
            self.steps_per_epoch,
            self.batch_size,
            self.learning_rate,
            self.tau,
            self.delta,
            self.out_dir.display(),
            self.net.backbone.variant.as_str(),
            self.net.backbone.pretrained,
            weights,
            self.net.decoder.width,
            self.net.decoder.use_spam,
            self.net.decoder.use_afam,
            self.net.spam.heads,
            self.net.spam.codebook_size,
            match self.net.spam.fuse {
                FuseMode::Sum => "sum",
                FuseMode::ConcatProject => "concat_project",
            },
            self.net.afam.reduction,
            self.net.afam.kernel_a,
            self.net.afam.kernel_b,
            self.net.afam.split_paths,
            self.loss.w_loc,
            self.loss.w_cost_loc,
            self.loss.use_score,
            self.crop_size,
            self.flip_probability,
            data_lines,
        )
    }

    /// Reference page listing every field with its default and meaning.
    pub fn reference_page() -> &'static str {
        include_str!("../docs/config.md")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_defaults() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed.to_text(), text);
    }

    #[test]
    fn unknown_field_named_in_error() {
        let err = RunConfig::parse("bogus.key = 3\n").unwrap_err().to_string();
        assert!(err.contains("bogus.key"), "{err}");
    }

    #[test]
    fn invalid_value_names_field() {
        let err = RunConfig::parse("learning_rate = banana\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn root_and_synth_are_exclusive() {
        let err = RunConfig::parse("data.root = x\ndata.synth.count = 5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("mutually exclusive"), "{err}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }
}
