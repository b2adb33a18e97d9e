//! Flat `key=value` configuration with dotted keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adversarial::GanLoss;
use crate::datasets::{PromptMode, DEFAULT_PROMPT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data_root: PathBuf,
    /// 0 means the whole split.
    pub train_limit: usize,
    pub test_limit: usize,

    pub diffusion_size: usize,
    pub pano_height: usize,
    pub satellite_size: usize,

    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
    pub ddim_eta: f64,

    pub unet_base_channels: usize,
    pub unet_depth: usize,
    pub time_embed_dim: usize,
    pub caption_embed_dim: usize,

    pub gan_base_channels: usize,
    pub gan_recon_weight: f64,
    pub gan_loss: GanLoss,
    pub gan_dropout: f64,
    pub branch2_polar: bool,
    pub fusion_include_satellite: bool,

    pub s1_pretrain_epochs: usize,
    pub s1_pretrain_lr: f64,
    pub s1_epochs: usize,
    pub s1_batch: usize,
    pub s1_lr: f64,
    pub s1_weight_decay: f64,
    pub s1_beta1: f64,
    pub s1_beta2: f64,

    pub s2_epochs: usize,
    pub s2_batch: usize,
    pub s2_lr: f64,

    pub s3_epochs: usize,
    pub s3_batch: usize,
    pub s3_lr: f64,

    pub s4_epochs: usize,
    pub s4_batch: usize,
    pub s4_g_lr: f64,
    pub s4_d_lr: f64,

    pub prompt_mode: PromptMode,
    pub prompt_text: String,
    /// Empty means `<data.root>/captions.tsv`.
    pub caption_file: String,

    /// Write a resumable checkpoint every this many updates (0 = only at stage end).
    pub checkpoint_every: u64,
    pub embed_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_root: PathBuf::from("data"),
            train_limit: 0,
            test_limit: 0,
            diffusion_size: 64,
            pano_height: 32,
            satellite_size: 64,
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 50,
            ddim_eta: 0.0,
            unet_base_channels: 32,
            unet_depth: 3,
            time_embed_dim: 32,
            caption_embed_dim: 64,
            gan_base_channels: 32,
            gan_recon_weight: 100.0,
            gan_loss: GanLoss::NonSaturating,
            gan_dropout: 0.5,
            branch2_polar: true,
            fusion_include_satellite: false,
            s1_pretrain_epochs: 10,
            s1_pretrain_lr: 1e-3,
            s1_epochs: 30,
            s1_batch: 4,
            s1_lr: 1e-3,
            s1_weight_decay: 0.01,
            s1_beta1: 0.9,
            s1_beta2: 0.999,
            s2_epochs: 30,
            s2_batch: 4,
            s2_lr: 1e-3,
            s3_epochs: 30,
            s3_batch: 8,
            s3_lr: 1e-3,
            s4_epochs: 55,
            s4_batch: 4,
            s4_g_lr: 1e-4,
            s4_d_lr: 1e-5,
            prompt_mode: PromptMode::PerImage,
            prompt_text: DEFAULT_PROMPT.to_string(),
            caption_file: String::new(),
            checkpoint_every: 0,
            embed_seed: crate::metrics::DEFAULT_EMBED_SEED,
        }
    }
}

/// Every key with its description, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for every random stream"),
    ("data.root", "dataset directory holding train.csv and test.csv"),
    ("data.train_limit", "use at most this many training rows (0 = all)"),
    ("data.test_limit", "use at most this many test rows (0 = all)"),
    ("sizes.diffusion", "square size the diffusion branch works at"),
    ("sizes.pano_height", "panorama height h; panoramas are h x 4h"),
    ("sizes.satellite", "square satellite size fed to the GAN branch"),
    ("schedule.steps", "diffusion steps T"),
    ("schedule.beta_start", "first beta of the linear schedule"),
    ("schedule.beta_end", "last beta of the linear schedule"),
    ("schedule.ddim_steps", "DDIM sampling steps (at most T)"),
    ("schedule.ddim_eta", "DDIM eta; 0 is deterministic"),
    ("unet.base_channels", "U-Net width at the first level"),
    ("unet.depth", "U-Net downsampling levels"),
    ("unet.time_embed_dim", "sinusoidal timestep embedding width"),
    ("unet.caption_embed_dim", "caption hash-embedding width (0 disables captions)"),
    ("gan.base_channels", "generator and discriminator width for all three GANs"),
    ("gan.recon_weight", "L1 reconstruction weight lambda"),
    ("gan.loss", "generator adversarial loss: non_saturating or minimax"),
    ("gan.dropout", "generator decoder dropout rate during training"),
    ("branch2.polar", "polar-warp the satellite before the direct GAN branch (true/false)"),
    ("fusion.include_satellite", "append the satellite as a third fusion input group"),
    ("stage1.pretrain_epochs", "unconditional pretraining epochs before grafting"),
    ("stage1.pretrain_lr", "pretraining learning rate (cosine decayed)"),
    ("stage1.epochs", "grafted training epochs"),
    ("stage1.batch", "stage 1 batch size"),
    ("stage1.lr", "grafted phase learning rate (cosine decayed)"),
    ("stage1.weight_decay", "AdamW weight decay for stage 1"),
    ("stage1.beta1", "AdamW beta1 for stage 1"),
    ("stage1.beta2", "AdamW beta2 for stage 1"),
    ("stage2.epochs", "panorama converter epochs"),
    ("stage2.batch", "stage 2 batch size"),
    ("stage2.lr", "converter learning rate for G and D (cosine decayed)"),
    ("stage3.epochs", "direct GAN branch epochs"),
    ("stage3.batch", "stage 3 batch size"),
    ("stage3.lr", "direct branch learning rate for G and D (cosine decayed)"),
    ("stage4.epochs", "fusion network epochs"),
    ("stage4.batch", "stage 4 batch size"),
    ("stage4.g_lr", "fusion generator learning rate"),
    ("stage4.d_lr", "fusion discriminator learning rate"),
    ("prompt.mode", "caption source: per_image or fixed"),
    ("prompt.text", "caption used in fixed mode"),
    ("prompt.caption_file", "id<TAB>caption file for per_image mode (default <data.root>/captions.tsv)"),
    ("train.checkpoint_every", "write a resumable checkpoint every N updates (0 = stage end only)"),
    ("eval.embed_seed", "seed of the fixed feature embedder used by the metrics"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim().parse().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.root" => self.data_root = PathBuf::from(v),
            "data.train_limit" => self.train_limit = parse(key, v)?,
            "data.test_limit" => self.test_limit = parse(key, v)?,
            "sizes.diffusion" => self.diffusion_size = parse(key, v)?,
            "sizes.pano_height" => self.pano_height = parse(key, v)?,
            "sizes.satellite" => self.satellite_size = parse(key, v)?,
            "schedule.steps" => self.schedule_steps = parse(key, v)?,
            "schedule.beta_start" => self.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.beta_end = parse(key, v)?,
            "schedule.ddim_steps" => self.ddim_steps = parse(key, v)?,
            "schedule.ddim_eta" => self.ddim_eta = parse(key, v)?,
            "unet.base_channels" => self.unet_base_channels = parse(key, v)?,
            "unet.depth" => self.unet_depth = parse(key, v)?,
            "unet.time_embed_dim" => self.time_embed_dim = parse(key, v)?,
            "unet.caption_embed_dim" => self.caption_embed_dim = parse(key, v)?,
            "gan.base_channels" => self.gan_base_channels = parse(key, v)?,
            "gan.recon_weight" => self.gan_recon_weight = parse(key, v)?,
            "gan.loss" => {
                self.gan_loss = match v {
                    "non_saturating" => GanLoss::NonSaturating,
                    "minimax" => GanLoss::Minimax,
                    _ => return Err(Error::Config(format!("gan.loss: unknown loss {v:?}"))),
                }
            }
            "gan.dropout" => self.gan_dropout = parse(key, v)?,
            "branch2.polar" => self.branch2_polar = parse_bool(key, v)?,
            "fusion.include_satellite" => self.fusion_include_satellite = parse_bool(key, v)?,
            "stage1.pretrain_epochs" => self.s1_pretrain_epochs = parse(key, v)?,
            "stage1.pretrain_lr" => self.s1_pretrain_lr = parse(key, v)?,
            "stage1.epochs" => self.s1_epochs = parse(key, v)?,
            "stage1.batch" => self.s1_batch = parse(key, v)?,
            "stage1.lr" => self.s1_lr = parse(key, v)?,
            "stage1.weight_decay" => self.s1_weight_decay = parse(key, v)?,
            "stage1.beta1" => self.s1_beta1 = parse(key, v)?,
            "stage1.beta2" => self.s1_beta2 = parse(key, v)?,
            "stage2.epochs" => self.s2_epochs = parse(key, v)?,
            "stage2.batch" => self.s2_batch = parse(key, v)?,
            "stage2.lr" => self.s2_lr = parse(key, v)?,
            "stage3.epochs" => self.s3_epochs = parse(key, v)?,
            "stage3.batch" => self.s3_batch = parse(key, v)?,
            "stage3.lr" => self.s3_lr = parse(key, v)?,
            "stage4.epochs" => self.s4_epochs = parse(key, v)?,
            "stage4.batch" => self.s4_batch = parse(key, v)?,
            "stage4.g_lr" => self.s4_g_lr = parse(key, v)?,
            "stage4.d_lr" => self.s4_d_lr = parse(key, v)?,
            "prompt.mode" => {
                self.prompt_mode = match v {
                    "per_image" => PromptMode::PerImage,
                    "fixed" => PromptMode::Fixed,
                    _ => return Err(Error::Config(format!("prompt.mode: unknown mode {v:?}"))),
                }
            }
            "prompt.text" => self.prompt_text = v.to_string(),
            "prompt.caption_file" => self.caption_file = v.to_string(),
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "eval.embed_seed" => self.embed_seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of every key, formatted so that `set` reads it back unchanged.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let f = |x: f64| format!("{x:?}");
        let b = |x: bool| x.to_string();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("data.root", self.data_root.display().to_string()),
            ("data.train_limit", self.train_limit.to_string()),
            ("data.test_limit", self.test_limit.to_string()),
            ("sizes.diffusion", self.diffusion_size.to_string()),
            ("sizes.pano_height", self.pano_height.to_string()),
            ("sizes.satellite", self.satellite_size.to_string()),
            ("schedule.steps", self.schedule_steps.to_string()),
            ("schedule.beta_start", f(self.beta_start)),
            ("schedule.beta_end", f(self.beta_end)),
            ("schedule.ddim_steps", self.ddim_steps.to_string()),
            ("schedule.ddim_eta", f(self.ddim_eta)),
            ("unet.base_channels", self.unet_base_channels.to_string()),
            ("unet.depth", self.unet_depth.to_string()),
            ("unet.time_embed_dim", self.time_embed_dim.to_string()),
            ("unet.caption_embed_dim", self.caption_embed_dim.to_string()),
            ("gan.base_channels", self.gan_base_channels.to_string()),
            ("gan.recon_weight", f(self.gan_recon_weight)),
            (
                "gan.loss",
                match self.gan_loss {
                    GanLoss::NonSaturating => "non_saturating".into(),
                    GanLoss::Minimax => "minimax".into(),
                },
            ),
            ("gan.dropout", f(self.gan_dropout)),
            ("branch2.polar", b(self.branch2_polar)),
            ("fusion.include_satellite", b(self.fusion_include_satellite)),
            ("stage1.pretrain_epochs", self.s1_pretrain_epochs.to_string()),
            ("stage1.pretrain_lr", f(self.s1_pretrain_lr)),
            ("stage1.epochs", self.s1_epochs.to_string()),
            ("stage1.batch", self.s1_batch.to_string()),
            ("stage1.lr", f(self.s1_lr)),
            ("stage1.weight_decay", f(self.s1_weight_decay)),
            ("stage1.beta1", f(self.s1_beta1)),
            ("stage1.beta2", f(self.s1_beta2)),
            ("stage2.epochs", self.s2_epochs.to_string()),
            ("stage2.batch", self.s2_batch.to_string()),
            ("stage2.lr", f(self.s2_lr)),
            ("stage3.epochs", self.s3_epochs.to_string()),
            ("stage3.batch", self.s3_batch.to_string()),
            ("stage3.lr", f(self.s3_lr)),
            ("stage4.epochs", self.s4_epochs.to_string()),
            ("stage4.batch", self.s4_batch.to_string()),
            ("stage4.g_lr", f(self.s4_g_lr)),
            ("stage4.d_lr", f(self.s4_d_lr)),
            (
                "prompt.mode",
                match self.prompt_mode {
                    PromptMode::PerImage => "per_image".into(),
                    PromptMode::Fixed => "fixed".into(),
                },
            ),
            ("prompt.text", self.prompt_text.clone()),
            ("prompt.caption_file", self.caption_file.clone()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("eval.embed_seed", self.embed_seed.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sizes.diffusion", self.diffusion_size),
            ("sizes.pano_height", self.pano_height),
            ("sizes.satellite", self.satellite_size),
            ("schedule.steps", self.schedule_steps),
            ("schedule.ddim_steps", self.ddim_steps),
            ("unet.base_channels", self.unet_base_channels),
            ("unet.depth", self.unet_depth),
            ("unet.time_embed_dim", self.time_embed_dim),
            ("gan.base_channels", self.gan_base_channels),
            ("stage1.batch", self.s1_batch),
            ("stage2.batch", self.s2_batch),
            ("stage3.batch", self.s3_batch),
            ("stage4.batch", self.s4_batch),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        let rates = [
            ("stage1.pretrain_lr", self.s1_pretrain_lr),
            ("stage1.lr", self.s1_lr),
            ("stage2.lr", self.s2_lr),
            ("stage3.lr", self.s3_lr),
            ("stage4.g_lr", self.s4_g_lr),
            ("stage4.d_lr", self.s4_d_lr),
            ("schedule.beta_start", self.beta_start),
            ("schedule.beta_end", self.beta_end),
        ];
        for (k, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.ddim_steps > self.schedule_steps {
            return Err(Error::Config(format!(
                "schedule.ddim_steps {} exceeds schedule.steps {}",
                self.ddim_steps, self.schedule_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.ddim_eta) || !(0.0..1.0).contains(&self.gan_dropout) {
            return Err(Error::Config("schedule.ddim_eta must be in [0, 1] and gan.dropout in [0, 1)".into()));
        }
        if self.beta_start > self.beta_end || self.beta_end >= 1.0 {
            return Err(Error::Config("need 0 < beta_start <= beta_end < 1".into()));
        }
        if !self.diffusion_size.is_multiple_of(1 << self.unet_depth) {
            return Err(Error::Config(format!(
                "sizes.diffusion {} must be divisible by 2^unet.depth",
                self.diffusion_size
            )));
        }
        if !self.satellite_size.is_multiple_of(self.diffusion_size) || !(self.satellite_size / self.diffusion_size).is_power_of_two() {
            return Err(Error::Config("sizes.satellite must be sizes.diffusion times a power of two".into()));
        }
        if self.prompt_mode == PromptMode::Fixed && self.prompt_text.is_empty() {
            return Err(Error::Config("prompt.text is empty in fixed mode".into()));
        }
        Ok(())
    }

    pub fn caption_path(&self) -> PathBuf {
        if self.caption_file.is_empty() {
            self.data_root.join("captions.tsv")
        } else {
            PathBuf::from(&self.caption_file)
        }
    }

    pub fn limit(n: usize) -> Option<usize> {
        (n > 0).then_some(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip_and_cover_every_documented_key() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text("stage1.epochs = 2 # short\n\nprompt.mode=fixed\nschedule.beta_end=0.015\n").unwrap();
        let back = PipelineConfig::from_entries(&cfg.entries()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.s1_epochs, 2);
        let keys: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(sorted, cfg.entries().keys().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(PipelineConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = PipelineConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(Error::Config(_))));
        assert!(cfg.set("stage1.epochs", "x").is_err());
        assert!(cfg.apply_override("stage1.epochs").is_err());
        cfg.ddim_steps = 2000;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.s3_batch = 0;
        assert!(cfg.validate().is_err());
        assert!(PipelineConfig::default().validate().is_ok());
    }
}
