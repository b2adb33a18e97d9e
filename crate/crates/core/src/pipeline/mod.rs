//! The four-stage training pipeline, inference, evaluation and reporting.

pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod manifest;
pub mod report;
pub mod stages;

use crate::adversarial::{build_pair, AdversarialPair, PairConfig};
use crate::datasets::{embed_caption, load_split, PairedSample, PromptMode, PromptSource, ResizeContract, Split};
use crate::diffusion::{make_schedule, EpsilonModel, NoiseSchedule, ScheduleKind};
use crate::error::{shape_err, Error, Result};
use crate::graft::{graft, GraftedDenoiser, GRAFT_PREFIX};
use crate::image::{ImageTensor, ResizeMode, ValueRange};
use crate::nn::{Graph, Tensor, Var};
use crate::rng::RngStream;
use crate::unet::{build_unet, UNet, UNetConfig};

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::PipelineConfig;
pub use infer::{BranchOutputs, Pipeline};
pub use report::{write_report, ReportRow};
pub use stages::{run_all, run_stage1, run_stage2, run_stage3, run_stage4, StageOutcome};

pub const BASE_PREFIX: &str = "base/";
pub const CONVERTER_PREFIX: &str = "converter/";
pub const BRANCH2_PREFIX: &str = "branch2/";
pub const FUSION_PREFIX: &str = "fusion/";

pub fn schedule(cfg: &PipelineConfig) -> Result<NoiseSchedule> {
    make_schedule(ScheduleKind::Linear, cfg.schedule_steps, cfg.beta_start, cfg.beta_end)
}

pub fn unet_config(cfg: &PipelineConfig) -> UNetConfig {
    UNetConfig {
        in_channels: 3,
        base_channels: cfg.unet_base_channels,
        depth: cfg.unet_depth,
        out_channels: 3,
        spatial: (cfg.diffusion_size, cfg.diffusion_size),
        time_embed_dim: cfg.time_embed_dim,
        caption_embed_dim: cfg.caption_embed_dim,
    }
}

pub fn pano_shape(cfg: &PipelineConfig) -> (usize, usize) {
    (cfg.pano_height, 4 * cfg.pano_height)
}

fn gan_config(cfg: &PipelineConfig, in_channels: usize, in_spatial: (usize, usize)) -> PairConfig {
    PairConfig {
        gan_loss: cfg.gan_loss,
        recon_weight: cfg.gan_recon_weight,
        dropout: cfg.gan_dropout,
        ..PairConfig::new(in_channels, in_spatial, pano_shape(cfg), cfg.gan_base_channels)
    }
}

/// Square branch-1 sample to panorama.
pub fn converter_config(cfg: &PipelineConfig) -> PairConfig {
    gan_config(cfg, 3, (cfg.diffusion_size, cfg.diffusion_size))
}

/// Satellite to panorama.
pub fn branch2_config(cfg: &PipelineConfig) -> PairConfig {
    PairConfig { polar: cfg.branch2_polar, ..gan_config(cfg, 3, (cfg.satellite_size, cfg.satellite_size)) }
}

pub fn fusion_channels(cfg: &PipelineConfig) -> usize {
    if cfg.fusion_include_satellite {
        9
    } else {
        6
    }
}

pub fn fusion_config(cfg: &PipelineConfig) -> PairConfig {
    gan_config(cfg, fusion_channels(cfg), pano_shape(cfg))
}

fn init_rng(cfg: &PipelineConfig, what: &str) -> RngStream {
    RngStream::new(cfg.seed, format!("init/{what}"))
}

pub fn new_base(cfg: &PipelineConfig) -> Result<UNet<f32>> {
    build_unet(&unet_config(cfg), BASE_PREFIX, &mut init_rng(cfg, "base"))
}

pub fn new_grafted(cfg: &PipelineConfig, base: UNet<f32>) -> Result<GraftedDenoiser<f32>> {
    graft(base, 3, (cfg.satellite_size, cfg.satellite_size), &mut init_rng(cfg, "graft"))
}

pub fn new_pair(cfg: &PipelineConfig, pair_cfg: &PairConfig, prefix: &str) -> Result<AdversarialPair<f32>> {
    build_pair(pair_cfg, prefix, &mut init_rng(cfg, prefix.trim_end_matches('/')))
}

/// Rebuilds a pair and overwrites its parameters from `ckpt`.
pub fn load_pair(cfg: &PipelineConfig, pair_cfg: &PairConfig, prefix: &str, ckpt: &Checkpoint) -> Result<AdversarialPair<f32>> {
    if !ckpt.has_prefix(prefix) {
        return Err(Error::Checkpoint(format!("checkpoint has no {prefix} component")));
    }
    let mut pair = new_pair(cfg, pair_cfg, prefix)?;
    pair.generator.store.import(&ckpt.arrays, "")?;
    pair.discriminator.store.import(&ckpt.arrays, "")?;
    Ok(pair)
}

pub fn insert_pair(ckpt: &mut Checkpoint, pair: &AdversarialPair<f32>) {
    ckpt.insert_store(&pair.generator.store);
    ckpt.insert_store(&pair.discriminator.store);
}

/// The diffusion-branch denoiser before and after grafting.
pub enum Denoiser {
    Base(UNet<f32>),
    Grafted(GraftedDenoiser<f32>),
}

impl Denoiser {
    pub fn from_checkpoint(cfg: &PipelineConfig, ckpt: &Checkpoint) -> Result<Self> {
        if !ckpt.has_prefix(BASE_PREFIX) {
            return Err(Error::Checkpoint("checkpoint has no base/ component".into()));
        }
        let mut base = new_base(cfg)?;
        base.store.import(&ckpt.arrays, "")?;
        if !ckpt.has_prefix(GRAFT_PREFIX) {
            return Ok(Denoiser::Base(base));
        }
        let mut g = new_grafted(cfg, base)?;
        g.store.import(&ckpt.arrays, "")?;
        Ok(Denoiser::Grafted(g))
    }

    pub fn insert_into(&self, ckpt: &mut Checkpoint) {
        match self {
            Denoiser::Base(b) => ckpt.insert_store(&b.store),
            Denoiser::Grafted(g) => {
                ckpt.insert_store(&g.base.store);
                ckpt.insert_store(&g.store);
            }
        }
    }

    pub fn grafted(&self) -> Result<&GraftedDenoiser<f32>> {
        match self {
            Denoiser::Grafted(g) => Ok(g),
            Denoiser::Base(_) => Err(Error::Checkpoint("denoiser has not been grafted; finish stage 1".into())),
        }
    }

    pub fn base(&self) -> &UNet<f32> {
        match self {
            Denoiser::Base(b) => b,
            Denoiser::Grafted(g) => &g.base,
        }
    }

    /// Hash of every diffusion parameter, used to key cached samples.
    pub fn hash(&self) -> String {
        let mut c = Checkpoint::new(0);
        self.insert_into(&mut c);
        c.hash_prefix("")
    }
}

impl EpsilonModel<f32> for Denoiser {
    fn image_shape(&self) -> (usize, usize, usize) {
        self.base().image_shape()
    }

    fn predict_eps(&self, g: &Graph<f32>, x_t: Var, ts: &[usize], caption: Option<Var>, control: Option<Var>) -> Result<Var> {
        match self {
            Denoiser::Base(b) => b.predict_eps(g, x_t, ts, caption, control),
            Denoiser::Grafted(m) => m.predict_eps(g, x_t, ts, caption, control),
        }
    }
}

pub fn prompt_source(cfg: &PipelineConfig) -> Result<PromptSource> {
    match cfg.prompt_mode {
        PromptMode::Fixed => Ok(PromptSource::fixed(cfg.prompt_text.clone())),
        PromptMode::PerImage => PromptSource::per_image(cfg.caption_path()),
    }
}

fn symmetric(img: &ImageTensor, h: usize, w: usize) -> Result<Tensor<f32>> {
    Ok(img.convert_range(ValueRange::Symmetric).resize(h, w, ResizeMode::Bilinear)?.tensor().clone())
}

/// A split materialized at every size the stages need, in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub ids: Vec<String>,
    /// `[3, S, S]` satellites.
    pub satellite: Vec<Tensor<f32>>,
    /// `[3, h, 4h]` panoramas.
    pub panorama: Vec<Tensor<f32>>,
    /// `[3, D, D]` panoramas stretched to the diffusion square.
    pub pano_square: Vec<Tensor<f32>>,
    pub captions: Vec<String>,
    pub caption_vecs: Vec<Vec<f32>>,
}

impl TrainSet {
    pub fn load(cfg: &PipelineConfig, split: Split) -> Result<Self> {
        let limit = PipelineConfig::limit(match split {
            Split::Train => cfg.train_limit,
            Split::Test => cfg.test_limit,
        });
        // Sizes are applied per consumer below; the loader keeps native resolution.
        let samples = crate::datasets::load_cvusa_layout(&cfg.data_root, split, limit)?.collect::<Result<Vec<_>>>()?;
        Self::from_samples(cfg, &samples, &prompt_source(cfg)?)
    }

    pub fn from_samples(cfg: &PipelineConfig, samples: &[PairedSample], prompts: &PromptSource) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        let (s, d) = (cfg.satellite_size, cfg.diffusion_size);
        let gan = ResizeContract::gan(s, cfg.pano_height);
        let mut set = TrainSet {
            ids: vec![],
            satellite: vec![],
            panorama: vec![],
            pano_square: vec![],
            captions: vec![],
            caption_vecs: vec![],
        };
        for sample in samples {
            let text = prompts.text_for(&sample.id)?.to_string();
            set.ids.push(sample.id.clone());
            set.satellite.push(symmetric(&sample.satellite, gan.satellite.0, gan.satellite.1)?);
            set.panorama.push(symmetric(&sample.panorama, gan.panorama.0, gan.panorama.1)?);
            set.pano_square.push(symmetric(&sample.panorama, d, d)?);
            set.caption_vecs.push(embed_caption(&text, cfg.caption_embed_dim));
            set.captions.push(text);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn gather(items: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
        Tensor::stack(&idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>())
    }

    /// `[n, dim]` caption batch, `None` when captions are disabled.
    pub fn caption_batch(&self, idx: &[usize]) -> Result<Option<Tensor<f32>>> {
        let dim = self.caption_vecs.first().map_or(0, Vec::len);
        if dim == 0 {
            return Ok(None);
        }
        let data = idx.iter().flat_map(|&i| self.caption_vecs[i].iter().copied()).collect();
        Ok(Some(Tensor::new(&[idx.len(), dim], data)?))
    }
}

/// Loads split samples resized for the GAN branches, for evaluation ground truth.
pub fn load_eval_samples(cfg: &PipelineConfig, split: Split) -> Result<Vec<PairedSample>> {
    let limit = PipelineConfig::limit(match split {
        Split::Train => cfg.train_limit,
        Split::Test => cfg.test_limit,
    });
    load_split(&cfg.data_root, split, limit, ResizeContract::gan(cfg.satellite_size, cfg.pano_height))
}

pub(crate) fn image_of(t: &Tensor<f32>) -> Result<ImageTensor> {
    if t.shape().len() != 3 {
        return Err(shape_err(format!("expected [C,H,W], got {:?}", t.shape())));
    }
    ImageTensor::from_tensor(t, ValueRange::Symmetric)
}
