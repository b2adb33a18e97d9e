//! Inference through both branches and the fusion network, and split evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::config::PipelineConfig;
use super::report::{write_report, ReportRow};
use super::{
    branch2_config, converter_config, fusion_config, image_of, load_eval_samples, load_pair, prompt_source, schedule,
    Denoiser, BRANCH2_PREFIX, CONVERTER_PREFIX, FUSION_PREFIX,
};
use crate::adversarial::AdversarialPair;
use crate::datasets::{embed_caption, Split};
use crate::diffusion::{ddim_sample, DdimConfig, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::fusion::fuse_concat_batch;
use crate::graft::GraftedDenoiser;
use crate::image::{ImageTensor, ResizeMode, ValueRange};
use crate::metrics::{evaluate_set, FeatureEmbedder, MetricReport};
use crate::nn::{ParamStore, Tensor};
use crate::rng::RngStream;

/// Cache directory key: denoiser parameters plus everything else the sample depends on.
pub fn ddim_cache_key(denoiser_hash: &str, cfg: &PipelineConfig) -> String {
    let mut h = Sha256::new();
    h.update(denoiser_hash.as_bytes());
    h.update(cfg.seed.to_le_bytes());
    h.update((cfg.ddim_steps as u64).to_le_bytes());
    h.update(cfg.ddim_eta.to_le_bytes());
    h.update(cfg.beta_start.to_le_bytes());
    h.update(cfg.beta_end.to_le_bytes());
    h.update((cfg.schedule_steps as u64).to_le_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Branch-1 square for one sample: DDIM from the grafted denoiser, seeded by the sample id.
///
/// With a cache directory the result is stored under `ddim/<key>/<id>.bin` and reused.
#[allow(clippy::too_many_arguments)]
pub fn sample_branch1(
    denoiser: &GraftedDenoiser<f32>,
    cfg: &PipelineConfig,
    schedule: &NoiseSchedule,
    cache_key: &str,
    id: &str,
    satellite: &Tensor<f32>,
    caption: &[f32],
    cache_dir: Option<&Path>,
) -> Result<Tensor<f32>> {
    let path = cache_dir.map(|d| d.join("ddim").join(cache_key).join(format!("{id}.bin")));
    if let Some(p) = path.as_ref().filter(|p| p.is_file()) {
        if let Some(x) = Checkpoint::load(p)?.arrays.remove("x") {
            return Ok(x);
        }
    }
    let (c, s) = (satellite.shape()[0], satellite.shape()[1]);
    let control = satellite.clone().reshape(&[1, c, s, satellite.shape()[2]])?;
    let cap = if caption.is_empty() { None } else { Some(Tensor::new(&[1, caption.len()], caption.to_vec())?) };
    let mut rng = RngStream::new(cfg.seed, format!("ddim/{id}"));
    let ddim = DdimConfig { num_steps: cfg.ddim_steps, eta: cfg.ddim_eta };
    let x = ddim_sample(denoiser, 1, Some(&control), cap.as_ref(), schedule, ddim, &mut rng, None)?.batch_item(0)?;
    if let Some(p) = path {
        let mut ck = Checkpoint::new(0);
        ck.arrays.insert("x".into(), x.clone());
        ck.save(p)?;
    }
    Ok(x)
}

/// Single-sample generation, so results never depend on batch composition.
pub fn generate_one(pair: &AdversarialPair<f32>, condition: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(condition.shape());
    pair.generate(&condition.clone().reshape(&shape)?)?.batch_item(0)
}

/// Fusion-network condition for one sample from the two `[3, h, 4h]` branch outputs.
pub fn fusion_input(cfg: &PipelineConfig, b1: &Tensor<f32>, b2: &Tensor<f32>, satellite: &Tensor<f32>) -> Result<Tensor<f32>> {
    let add_axis = |t: &Tensor<f32>| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(&shape)
    };
    let sat = if cfg.fusion_include_satellite { Some(add_axis(satellite)?) } else { None };
    fuse_concat_batch(&add_axis(b1)?, &add_axis(b2)?, sat.as_ref())?.batch_item(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub branch1_square: ImageTensor,
    pub branch1_pano: ImageTensor,
    pub branch2_pano: ImageTensor,
    pub fused: ImageTensor,
}

impl BranchOutputs {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.branch1_square.save_png(dir.join("branch1_square.png"))?;
        self.branch1_pano.save_png(dir.join("branch1_pano.png"))?;
        self.branch2_pano.save_png(dir.join("branch2_pano.png"))?;
        self.fused.save_png(dir.join("fused_pano.png"))
    }
}

/// Every trained component, ready for inference.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub schedule: NoiseSchedule,
    pub denoiser: Denoiser,
    pub converter: AdversarialPair<f32>,
    pub branch2: AdversarialPair<f32>,
    pub fusion: AdversarialPair<f32>,
    pub cache_dir: Option<PathBuf>,
    cache_key: String,
}

impl Pipeline {
    pub fn from_checkpoint(cfg: &PipelineConfig, ckpt: &Checkpoint) -> Result<Self> {
        let denoiser = Denoiser::from_checkpoint(cfg, ckpt)?;
        denoiser.grafted()?;
        let converter = load_pair(cfg, &converter_config(cfg), CONVERTER_PREFIX, ckpt)?;
        let branch2 = load_pair(cfg, &branch2_config(cfg), BRANCH2_PREFIX, ckpt)?;
        let fusion = load_pair(cfg, &fusion_config(cfg), FUSION_PREFIX, ckpt)?;
        let cache_key = ddim_cache_key(&denoiser.hash(), cfg);
        Ok(Self { cfg: cfg.clone(), schedule: schedule(cfg)?, denoiser, converter, branch2, fusion, cache_dir: None, cache_key })
    }

    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn branch_hashes(&self) -> [String; 3] {
        let h = |s: [&ParamStore<f32>; 2]| s[0].hash_prefix("") + &s[1].hash_prefix("");
        [
            self.denoiser.hash(),
            h([&self.converter.generator.store, &self.converter.discriminator.store]),
            h([&self.branch2.generator.store, &self.branch2.discriminator.store]),
        ]
    }

    /// Runs both branches and the fusion network on a `[3, S, S]` symmetric-range satellite.
    pub fn run_tensor(&self, id: &str, satellite: &Tensor<f32>, caption: &[f32]) -> Result<BranchOutputs> {
        let s = self.cfg.satellite_size;
        if satellite.shape() != [3, s, s] {
            return Err(shape_err(format!("satellite {:?}, expected [3, {s}, {s}]", satellite.shape())));
        }
        let g = self.denoiser.grafted()?;
        let square =
            sample_branch1(g, &self.cfg, &self.schedule, &self.cache_key, id, satellite, caption, self.cache_dir.as_deref())?;
        let b1 = generate_one(&self.converter, &square)?;
        let b2 = generate_one(&self.branch2, satellite)?;
        let fused = self.fuse(&b1, &b2, satellite)?;
        Ok(BranchOutputs { branch1_square: image_of(&square)?, branch1_pano: image_of(&b1)?, branch2_pano: image_of(&b2)?, fused: image_of(&fused)? })
    }

    fn fuse(&self, b1: &Tensor<f32>, b2: &Tensor<f32>, satellite: &Tensor<f32>) -> Result<Tensor<f32>> {
        generate_one(&self.fusion, &fusion_input(&self.cfg, b1, b2, satellite)?)
    }

    pub fn run(&self, id: &str, satellite: &ImageTensor, caption_text: &str) -> Result<BranchOutputs> {
        let s = self.cfg.satellite_size;
        let sat = satellite.convert_range(ValueRange::Symmetric).resize(s, s, ResizeMode::Bilinear)?;
        self.run_tensor(id, sat.tensor(), &embed_caption(caption_text, self.cfg.caption_embed_dim))
    }
}

/// Loads a checkpoint, runs one satellite PNG and writes the four output images.
pub fn infer(
    cfg: &PipelineConfig,
    ckpt_path: &Path,
    satellite_png: &Path,
    caption: Option<&str>,
    out_dir: &Path,
) -> Result<BranchOutputs> {
    let pipe = Pipeline::from_checkpoint(cfg, &Checkpoint::load(ckpt_path)?)?;
    let sat = ImageTensor::load_png(satellite_png)?;
    if sat.channels() != 3 {
        return Err(Error::InvalidArgument("satellite must be an RGB image".into()));
    }
    let id = satellite_png.file_stem().map_or_else(|| "input".to_string(), |s| s.to_string_lossy().into_owned());
    let out = pipe.run(&id, &sat, caption.unwrap_or(&cfg.prompt_text))?;
    out.write(out_dir)?;
    Ok(out)
}

/// Fused outputs and ground-truth panoramas for a split, in the pipeline's output range.
pub fn split_outputs(pipe: &Pipeline, split: Split) -> Result<Vec<(String, BranchOutputs, ImageTensor)>> {
    let cfg = &pipe.cfg;
    let samples = load_eval_samples(cfg, split)?;
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let prompts = prompt_source(cfg)?;
    let mut out = Vec::with_capacity(samples.len());
    for s in &samples {
        let outputs = pipe.run(&s.id, &s.satellite, prompts.text_for(&s.id)?)?;
        out.push((s.id.clone(), outputs, s.panorama.convert_range(ValueRange::Symmetric)));
    }
    Ok(out)
}

/// Runs the split through the full pipeline, scores the fused panoramas and writes the report files.
pub fn evaluate(cfg: &PipelineConfig, pipe: &Pipeline, split: Split, out_dir: &Path) -> Result<MetricReport> {
    let outputs = split_outputs(pipe, split)?;
    let pairs: Vec<(ImageTensor, ImageTensor)> = outputs.into_iter().map(|(_, o, gt)| (o.fused, gt)).collect();
    let report = evaluate_set(&pairs, &FeatureEmbedder::new(cfg.embed_seed))?;
    write_report(out_dir, &[ReportRow::computed(&report)], report.warning.as_deref())?;
    fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
