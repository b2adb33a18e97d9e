//! The four training stages as resumable step-wise trainers.
//!
//! Every trainer owns an explicit update counter, one running RNG stream and its
//! optimizer moments; [`Trainer::checkpoint`] captures all of it, so training for
//! k updates, saving, loading and continuing matches an uninterrupted run bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::checkpoint::Checkpoint;
use super::config::PipelineConfig;
use super::infer::{ddim_cache_key, fusion_input, generate_one, sample_branch1};
use super::{
    branch2_config, converter_config, fusion_config, insert_pair, load_pair, new_base, new_grafted, new_pair, schedule,
    Denoiser, TrainSet, BASE_PREFIX, BRANCH2_PREFIX, CONVERTER_PREFIX, FUSION_PREFIX,
};
use crate::adversarial::{train_step, AdversarialPair, GanOptimizers, PairConfig};
use crate::datasets::Split;
use crate::diffusion::{epsilon_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graft::GRAFT_PREFIX;
use crate::nn::{Adam, AdamConfig, CosineSchedule, Float, Graph, Tensor};
use crate::rng::RngStream;

pub fn stage_path(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}.ckpt"))
}

pub fn partial_path(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}.partial.ckpt"))
}

pub fn full_path(out: &Path) -> PathBuf {
    out.join("full.ckpt")
}

pub fn cache_dir(out: &Path) -> PathBuf {
    out.join("cache")
}

pub fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch.max(1)) as u64
}

/// Sample indices of global update `step`: a fresh permutation per epoch, cut into batches.
pub fn batch_indices(seed: u64, label: &str, n: usize, batch: usize, step: u64) -> Vec<usize> {
    let spe = steps_per_epoch(n, batch);
    let (epoch, b) = ((step / spe) as usize, (step % spe) as usize);
    let perm = RngStream::new(seed, format!("{label}/order")).derive(&epoch.to_string()).permutation(n);
    perm[b * batch..((b + 1) * batch).min(n)].to_vec()
}

fn checked(loss: f64, step: u64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss { step, what: what.into() })
    }
}

fn load_complete(path: &Path, stage: u8) -> Result<Checkpoint> {
    let c = Checkpoint::load(path)?;
    if c.meta.stage != stage || !c.meta.complete {
        return Err(Error::Checkpoint(format!("{} is not a completed stage {stage} checkpoint", path.display())));
    }
    Ok(c)
}

fn meta_for(ckpt: &mut Checkpoint, cfg: &PipelineConfig, step: u64, total: u64, rng: &RngStream, history: &[f64]) {
    ckpt.meta.step = step;
    ckpt.meta.complete = step == total;
    ckpt.meta.config = cfg.entries();
    ckpt.meta.rng = Some(rng.state());
    ckpt.meta.loss_history = history.to_vec();
}

fn check_resume(ckpt: &Checkpoint, stage: u8, total: u64) -> Result<RngStream> {
    if ckpt.meta.stage != stage {
        return Err(Error::Checkpoint(format!("checkpoint is from stage {}, expected {stage}", ckpt.meta.stage)));
    }
    if ckpt.meta.step > total || ckpt.meta.loss_history.len() as u64 != ckpt.meta.step {
        return Err(Error::Checkpoint(format!("checkpoint step {} does not fit a {total}-update stage", ckpt.meta.step)));
    }
    let state = ckpt.meta.rng.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no rng state".into()))?;
    RngStream::from_state(state)
}

/// A stage that advances one update at a time.
pub trait Trainer {
    fn stage(&self) -> u8;
    fn steps_done(&self) -> u64;
    fn total_steps(&self) -> u64;
    /// Runs one update and returns its training loss.
    fn step(&mut self) -> Result<f64>;
    fn history(&self) -> &[f64];
    fn checkpoint(&self) -> Result<Checkpoint>;
}

/// Diffusion branch: an unconditional pretraining phase for the base U-Net,
/// then caption- and satellite-conditioned training of the grafted denoiser
/// with the base frozen.
pub struct Stage1Trainer {
    cfg: PipelineConfig,
    data: TrainSet,
    schedule: NoiseSchedule,
    denoiser: Option<Denoiser>,
    opt: Adam<f32>,
    rng: RngStream,
    step: u64,
    pretrain_steps: u64,
    graft_steps: u64,
    history: Vec<f64>,
    frozen_hash: Option<String>,
}

impl Stage1Trainer {
    fn adam(cfg: &PipelineConfig) -> AdamConfig {
        AdamConfig { beta1: cfg.s1_beta1, beta2: cfg.s1_beta2, weight_decay: cfg.s1_weight_decay, ..AdamConfig::adamw() }
    }

    fn phase_lengths(cfg: &PipelineConfig, n: usize) -> (u64, u64) {
        let spe = steps_per_epoch(n, cfg.s1_batch);
        (cfg.s1_pretrain_epochs as u64 * spe, cfg.s1_epochs as u64 * spe)
    }

    pub fn new(cfg: &PipelineConfig, data: TrainSet) -> Result<Self> {
        let (pretrain_steps, graft_steps) = Self::phase_lengths(cfg, data.len());
        let mut t = Self {
            cfg: cfg.clone(),
            schedule: schedule(cfg)?,
            data,
            denoiser: Some(Denoiser::Base(new_base(cfg)?)),
            opt: Adam::new(Self::adam(cfg)),
            rng: RngStream::new(cfg.seed, "stage1/train"),
            step: 0,
            pretrain_steps,
            graft_steps,
            history: vec![],
            frozen_hash: None,
        };
        if pretrain_steps == 0 {
            t.graft_now()?;
        }
        Ok(t)
    }

    pub fn from_checkpoint(cfg: &PipelineConfig, data: TrainSet, ckpt: &Checkpoint) -> Result<Self> {
        let (pretrain_steps, graft_steps) = Self::phase_lengths(cfg, data.len());
        let rng = check_resume(ckpt, 1, pretrain_steps + graft_steps)?;
        let denoiser = Denoiser::from_checkpoint(cfg, ckpt)?;
        let step = ckpt.meta.step;
        let grafted = matches!(denoiser, Denoiser::Grafted(_));
        if grafted != (step >= pretrain_steps) {
            return Err(Error::Checkpoint("stage 1 checkpoint phase does not match its step".into()));
        }
        let store = match &denoiser {
            Denoiser::Base(b) => &b.store,
            Denoiser::Grafted(g) => &g.store,
        };
        let opt_steps = ckpt.meta.optimizer_steps.get("stage1").copied().unwrap_or(0);
        let opt = Adam::import(Self::adam(cfg), opt_steps, store, &ckpt.arrays, "opt/stage1/")?;
        Ok(Self {
            cfg: cfg.clone(),
            schedule: schedule(cfg)?,
            data,
            denoiser: Some(denoiser),
            opt,
            rng,
            step,
            pretrain_steps,
            graft_steps,
            history: ckpt.meta.loss_history.clone(),
            frozen_hash: ckpt.meta.notes.get("frozen_base_hash").cloned(),
        })
    }

    fn graft_now(&mut self) -> Result<()> {
        let base = match self.denoiser.take() {
            Some(Denoiser::Base(b)) => b,
            other => {
                self.denoiser = other;
                return Err(Error::Checkpoint("denoiser already grafted".into()));
            }
        };
        let g = new_grafted(&self.cfg, base)?;
        self.frozen_hash = Some(g.base_hash());
        self.denoiser = Some(Denoiser::Grafted(g));
        self.opt = Adam::new(Self::adam(&self.cfg));
        Ok(())
    }

    pub fn denoiser(&self) -> &Denoiser {
        self.denoiser.as_ref().expect("denoiser is present between updates")
    }

    pub fn frozen_base_hash(&self) -> Option<&str> {
        self.frozen_hash.as_deref()
    }

    fn timesteps(&mut self, n: usize) -> Vec<usize> {
        let t = self.schedule.num_steps() as i64;
        (0..n).map(|_| self.rng.int_inclusive(1, t) as usize).collect()
    }
}

impl Trainer for Stage1Trainer {
    fn stage(&self) -> u8 {
        1
    }

    fn steps_done(&self) -> u64 {
        self.step
    }

    fn total_steps(&self) -> u64 {
        self.pretrain_steps + self.graft_steps
    }

    fn step(&mut self) -> Result<f64> {
        if self.step >= self.total_steps() {
            return Err(Error::InvalidArgument("stage 1 already finished".into()));
        }
        let (seed, n, batch) = (self.cfg.seed, self.data.len(), self.cfg.s1_batch);
        let k = self.step;
        let loss = if k < self.pretrain_steps {
            let idx = batch_indices(seed, "stage1/pretrain", n, batch, k);
            let x0 = TrainSet::gather(&self.data.pano_square, &idx)?;
            let ts = self.timesteps(idx.len());
            let Some(Denoiser::Base(base)) = &mut self.denoiser else { unreachable!("pretrain phase runs on the base") };
            let g = Graph::new();
            let l = epsilon_loss(&g, &*base, &x0, None, None, &ts, &self.schedule, &mut self.rng)?;
            let v = checked(g.scalar_value(l).as_f64(), k + 1, "stage 1 pretrain")?;
            let grads = g.backward(l)?.for_store(&base.store);
            drop(g);
            let lr = CosineSchedule::new(self.cfg.s1_pretrain_lr, self.pretrain_steps).lr(k);
            self.opt.step(&mut base.store, &grads, lr)?;
            v
        } else {
            let j = k - self.pretrain_steps;
            let idx = batch_indices(seed, "stage1/graft", n, batch, j);
            let x0 = TrainSet::gather(&self.data.pano_square, &idx)?;
            let control = TrainSet::gather(&self.data.satellite, &idx)?;
            let caption = self.data.caption_batch(&idx)?;
            let ts = self.timesteps(idx.len());
            let Some(Denoiser::Grafted(gd)) = &mut self.denoiser else { unreachable!("graft phase runs grafted") };
            let g = Graph::new();
            let l = epsilon_loss(&g, &*gd, &x0, caption.as_ref(), Some(&control), &ts, &self.schedule, &mut self.rng)?;
            let v = checked(g.scalar_value(l).as_f64(), k + 1, "stage 1 grafted")?;
            let grads = g.backward(l)?.for_store(&gd.store);
            drop(g);
            let lr = CosineSchedule::new(self.cfg.s1_lr, self.graft_steps).lr(j);
            self.opt.step(&mut gd.store, &grads, lr)?;
            v
        };
        self.step += 1;
        self.history.push(loss);
        if self.step == self.pretrain_steps {
            self.graft_now()?;
        }
        if self.step == self.total_steps() {
            let now = self.denoiser().grafted()?.base_hash();
            if self.frozen_hash.as_deref() != Some(now.as_str()) {
                return Err(Error::Numerical("frozen base parameters changed during grafted training".into()));
            }
        }
        Ok(loss)
    }

    fn history(&self) -> &[f64] {
        &self.history
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(1);
        self.denoiser().insert_into(&mut c);
        let store = match self.denoiser() {
            Denoiser::Base(b) => &b.store,
            Denoiser::Grafted(g) => &g.store,
        };
        c.insert_prefixed("opt/stage1/", self.opt.export(store));
        c.meta.optimizer_steps.insert("stage1".into(), self.opt.steps_taken());
        meta_for(&mut c, &self.cfg, self.step, self.total_steps(), &self.rng, &self.history);
        let phase = if matches!(self.denoiser(), Denoiser::Grafted(_)) { "grafted" } else { "pretrain" };
        c.meta.notes.insert("phase".into(), phase.into());
        c.meta.notes.insert("pretrain_steps".into(), self.pretrain_steps.to_string());
        if let Some(h) = &self.frozen_hash {
            c.meta.notes.insert("frozen_base_hash".into(), h.clone());
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrPlan {
    /// Cosine decay of both rates over the stage.
    Cosine { g: f64, d: f64 },
    Constant { g: f64, d: f64 },
}

impl LrPlan {
    fn rates(&self, step: u64, total: u64) -> (f64, f64) {
        match *self {
            LrPlan::Cosine { g, d } => (CosineSchedule::new(g, total).lr(step), CosineSchedule::new(d, total).lr(step)),
            LrPlan::Constant { g, d } => (g, d),
        }
    }
}

/// Conditional GAN training on fixed per-sample conditions and targets.
///
/// Used by stage 2 (branch-1 squares to panoramas), stage 3 (satellites to
/// panoramas) and stage 4 (concatenated branch outputs to panoramas).
pub struct GanTrainer {
    stage: u8,
    cfg: PipelineConfig,
    pub pair: AdversarialPair<f32>,
    opt: GanOptimizers<f32>,
    conditions: Vec<Tensor<f32>>,
    targets: Vec<Tensor<f32>>,
    batch: usize,
    lr: LrPlan,
    rng: RngStream,
    step: u64,
    total: u64,
    history: Vec<f64>,
    /// Earlier components written unchanged into every checkpoint of this stage.
    carried: Checkpoint,
}

impl GanTrainer {
    fn label(stage: u8) -> String {
        format!("stage{stage}")
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        stage: u8,
        cfg: &PipelineConfig,
        pair: AdversarialPair<f32>,
        opt: GanOptimizers<f32>,
        conditions: Vec<Tensor<f32>>,
        targets: Vec<Tensor<f32>>,
        batch: usize,
        epochs: usize,
        lr: LrPlan,
        carried: Checkpoint,
    ) -> Result<Self> {
        if conditions.len() != targets.len() || conditions.is_empty() {
            return Err(Error::InsufficientSamples { needed: 1, got: conditions.len().min(targets.len()) });
        }
        let total = epochs as u64 * steps_per_epoch(conditions.len(), batch);
        let rng = RngStream::new(cfg.seed, format!("{}/train", Self::label(stage)));
        Ok(Self { stage, cfg: cfg.clone(), pair, opt, conditions, targets, batch, lr, rng, step: 0, total, history: vec![], carried })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stage: u8,
        cfg: &PipelineConfig,
        pair_cfg: &PairConfig,
        prefix: &str,
        conditions: Vec<Tensor<f32>>,
        targets: Vec<Tensor<f32>>,
        batch: usize,
        epochs: usize,
        lr: LrPlan,
        carried: Checkpoint,
    ) -> Result<Self> {
        let pair = new_pair(cfg, pair_cfg, prefix)?;
        let opt = GanOptimizers::new(AdamConfig::adam());
        Self::assemble(stage, cfg, pair, opt, conditions, targets, batch, epochs, lr, carried)
    }

    /// Continues from a partial checkpoint written by the same stage.
    #[allow(clippy::too_many_arguments)]
    pub fn resume(
        stage: u8,
        cfg: &PipelineConfig,
        pair_cfg: &PairConfig,
        prefix: &str,
        conditions: Vec<Tensor<f32>>,
        targets: Vec<Tensor<f32>>,
        batch: usize,
        epochs: usize,
        lr: LrPlan,
        carried: Checkpoint,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let pair = load_pair(cfg, pair_cfg, prefix, ckpt)?;
        let label = Self::label(stage);
        let steps = |k: &str| ckpt.meta.optimizer_steps.get(&format!("{label}/{k}")).copied().unwrap_or(0);
        let opt = GanOptimizers {
            g: Adam::import(AdamConfig::adam(), steps("g"), &pair.generator.store, &ckpt.arrays, &format!("opt/{label}/"))?,
            d: Adam::import(AdamConfig::adam(), steps("d"), &pair.discriminator.store, &ckpt.arrays, &format!("opt/{label}/"))?,
        };
        let mut t = Self::assemble(stage, cfg, pair, opt, conditions, targets, batch, epochs, lr, carried)?;
        t.rng = check_resume(ckpt, stage, t.total)?;
        t.step = ckpt.meta.step;
        t.history = ckpt.meta.loss_history.clone();
        Ok(t)
    }
}

impl Trainer for GanTrainer {
    fn stage(&self) -> u8 {
        self.stage
    }

    fn steps_done(&self) -> u64 {
        self.step
    }

    fn total_steps(&self) -> u64 {
        self.total
    }

    /// Returns the generator's weighted reconstruction term.
    fn step(&mut self) -> Result<f64> {
        if self.step >= self.total {
            return Err(Error::InvalidArgument(format!("stage {} already finished", self.stage)));
        }
        let label = Self::label(self.stage);
        let idx = batch_indices(self.cfg.seed, &label, self.conditions.len(), self.batch, self.step);
        let cond = TrainSet::gather(&self.conditions, &idx)?;
        let target = TrainSet::gather(&self.targets, &idx)?;
        let (g_lr, d_lr) = self.lr.rates(self.step, self.total);
        let report = train_step(&mut self.pair, &cond, &target, g_lr, d_lr, &mut self.opt, &mut self.rng).map_err(|e| match e {
            Error::NonFiniteLoss { what, .. } => Error::NonFiniteLoss { step: self.step + 1, what: format!("{label} {what}") },
            e => e,
        })?;
        let loss = checked(report.g_loss_recon, self.step + 1, &format!("{label} reconstruction"))?;
        self.step += 1;
        self.history.push(loss);
        Ok(loss)
    }

    fn history(&self) -> &[f64] {
        &self.history
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = self.carried.clone();
        c.meta = Checkpoint::new(self.stage).meta;
        insert_pair(&mut c, &self.pair);
        let label = Self::label(self.stage);
        c.insert_prefixed(&format!("opt/{label}/"), self.opt.g.export(&self.pair.generator.store));
        c.insert_prefixed(&format!("opt/{label}/"), self.opt.d.export(&self.pair.discriminator.store));
        c.meta.optimizer_steps.insert(format!("{label}/g"), self.opt.g.steps_taken());
        c.meta.optimizer_steps.insert(format!("{label}/d"), self.opt.d.steps_taken());
        meta_for(&mut c, &self.cfg, self.step, self.total, &self.rng, &self.history);
        Ok(c)
    }
}

/// Result of running a stage to completion.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: u8,
    pub path: PathBuf,
    pub checkpoint: Checkpoint,
    pub history: Vec<f64>,
}

/// Drives `trainer` to the end, writing partial checkpoints on the configured cadence.
pub fn drive(trainer: &mut dyn Trainer, cfg: &PipelineConfig, out: &Path) -> Result<StageOutcome> {
    let stage = trainer.stage();
    let partial = partial_path(out, stage);
    let total = trainer.total_steps();
    while trainer.steps_done() < total {
        let loss = trainer.step()?;
        let k = trainer.steps_done();
        if k == total || k.is_multiple_of(50) {
            info!("stage {stage}: update {k}/{total}, loss {loss:.5}");
        }
        if cfg.checkpoint_every > 0 && k < total && k.is_multiple_of(cfg.checkpoint_every) {
            trainer.checkpoint()?.save(&partial)?;
        }
    }
    let checkpoint = trainer.checkpoint()?;
    let path = if stage == 4 { full_path(out) } else { stage_path(out, stage) };
    checkpoint.save(&path)?;
    if partial.exists() {
        fs::remove_file(&partial)?;
    }
    Ok(StageOutcome { stage, path, history: checkpoint.meta.loss_history.clone(), checkpoint })
}

fn resume_source(out: &Path, stage: u8, resume: bool) -> Result<Option<Checkpoint>> {
    let p = partial_path(out, stage);
    if resume && p.is_file() {
        info!("stage {stage}: resuming from {}", p.display());
        return Ok(Some(Checkpoint::load(&p)?));
    }
    Ok(None)
}

pub fn run_stage1(cfg: &PipelineConfig, out: &Path, resume: bool) -> Result<StageOutcome> {
    let data = TrainSet::load(cfg, Split::Train)?;
    let mut t = match resume_source(out, 1, resume)? {
        Some(c) => Stage1Trainer::from_checkpoint(cfg, data, &c)?,
        None => Stage1Trainer::new(cfg, data)?,
    };
    drive(&mut t, cfg, out)
}

/// Branch-1 squares for every training sample, sampled once per denoiser and cached on disk.
pub fn branch1_squares(cfg: &PipelineConfig, denoiser: &Denoiser, data: &TrainSet, cache: Option<&Path>) -> Result<Vec<Tensor<f32>>> {
    let g = denoiser.grafted()?;
    let sched = schedule(cfg)?;
    let key = ddim_cache_key(&denoiser.hash(), cfg);
    (0..data.len())
        .map(|i| sample_branch1(g, cfg, &sched, &key, &data.ids[i], &data.satellite[i], &data.caption_vecs[i], cache))
        .collect()
}

fn carry(from: &[&Checkpoint], prefixes: &[&str]) -> Checkpoint {
    let mut c = Checkpoint::new(0);
    for src in from {
        for p in prefixes {
            c.merge_prefix(src, p);
        }
    }
    c
}

fn gan_run(t: Result<GanTrainer>, cfg: &PipelineConfig, out: &Path) -> Result<StageOutcome> {
    drive(&mut t?, cfg, out)
}

pub fn stage2_trainer(cfg: &PipelineConfig, out: &Path, resume: Option<&Checkpoint>) -> Result<GanTrainer> {
    let s1 = load_complete(&stage_path(out, 1), 1)?;
    let denoiser = Denoiser::from_checkpoint(cfg, &s1)?;
    let data = TrainSet::load(cfg, Split::Train)?;
    let squares = branch1_squares(cfg, &denoiser, &data, Some(&cache_dir(out)))?;
    let carried = carry(&[&s1], &[BASE_PREFIX, GRAFT_PREFIX]);
    let lr = LrPlan::Cosine { g: cfg.s2_lr, d: cfg.s2_lr };
    let pc = converter_config(cfg);
    match resume {
        Some(c) => GanTrainer::resume(2, cfg, &pc, CONVERTER_PREFIX, squares, data.panorama, cfg.s2_batch, cfg.s2_epochs, lr, carried, c),
        None => GanTrainer::new(2, cfg, &pc, CONVERTER_PREFIX, squares, data.panorama, cfg.s2_batch, cfg.s2_epochs, lr, carried),
    }
}

pub fn run_stage2(cfg: &PipelineConfig, out: &Path, resume: bool) -> Result<StageOutcome> {
    let r = resume_source(out, 2, resume)?;
    gan_run(stage2_trainer(cfg, out, r.as_ref()), cfg, out)
}

pub fn stage3_trainer(cfg: &PipelineConfig, resume: Option<&Checkpoint>) -> Result<GanTrainer> {
    let data = TrainSet::load(cfg, Split::Train)?;
    let lr = LrPlan::Cosine { g: cfg.s3_lr, d: cfg.s3_lr };
    let pc = branch2_config(cfg);
    let carried = Checkpoint::new(0);
    match resume {
        Some(c) => GanTrainer::resume(3, cfg, &pc, BRANCH2_PREFIX, data.satellite, data.panorama, cfg.s3_batch, cfg.s3_epochs, lr, carried, c),
        None => GanTrainer::new(3, cfg, &pc, BRANCH2_PREFIX, data.satellite, data.panorama, cfg.s3_batch, cfg.s3_epochs, lr, carried),
    }
}

pub fn run_stage3(cfg: &PipelineConfig, out: &Path, resume: bool) -> Result<StageOutcome> {
    let r = resume_source(out, 3, resume)?;
    gan_run(stage3_trainer(cfg, r.as_ref()), cfg, out)
}

/// Fusion inputs for every training sample from the frozen branches.
fn fusion_inputs(cfg: &PipelineConfig, s2: &Checkpoint, s3: &Checkpoint, data: &TrainSet, cache: &Path) -> Result<Vec<Tensor<f32>>> {
    let denoiser = Denoiser::from_checkpoint(cfg, s2)?;
    let squares = branch1_squares(cfg, &denoiser, data, Some(cache))?;
    let converter = load_pair(cfg, &converter_config(cfg), CONVERTER_PREFIX, s2)?;
    let branch2 = load_pair(cfg, &branch2_config(cfg), BRANCH2_PREFIX, s3)?;
    (0..data.len())
        .map(|i| {
            let b1 = generate_one(&converter, &squares[i])?;
            let b2 = generate_one(&branch2, &data.satellite[i])?;
            fusion_input(cfg, &b1, &b2, &data.satellite[i])
        })
        .collect()
}

pub fn stage4_trainer(cfg: &PipelineConfig, out: &Path, resume: Option<&Checkpoint>) -> Result<GanTrainer> {
    let s2 = load_complete(&stage_path(out, 2), 2)?;
    let s3 = load_complete(&stage_path(out, 3), 3)?;
    let data = TrainSet::load(cfg, Split::Train)?;
    let inputs = fusion_inputs(cfg, &s2, &s3, &data, &cache_dir(out))?;
    let mut carried = carry(&[&s2], &[BASE_PREFIX, GRAFT_PREFIX, CONVERTER_PREFIX]);
    carried.merge_prefix(&s3, BRANCH2_PREFIX);
    let lr = LrPlan::Constant { g: cfg.s4_g_lr, d: cfg.s4_d_lr };
    let pc = fusion_config(cfg);
    match resume {
        Some(c) => GanTrainer::resume(4, cfg, &pc, FUSION_PREFIX, inputs, data.panorama, cfg.s4_batch, cfg.s4_epochs, lr, carried, c),
        None => GanTrainer::new(4, cfg, &pc, FUSION_PREFIX, inputs, data.panorama, cfg.s4_batch, cfg.s4_epochs, lr, carried),
    }
}

pub fn run_stage4(cfg: &PipelineConfig, out: &Path, resume: bool) -> Result<StageOutcome> {
    let r = resume_source(out, 4, resume)?;
    let mut outcome = gan_run(stage4_trainer(cfg, out, r.as_ref()), cfg, out)?;
    // Branch parameters must arrive in the full checkpoint untouched.
    let s2 = load_complete(&stage_path(out, 2), 2)?;
    let s3 = load_complete(&stage_path(out, 3), 3)?;
    for (src, prefix) in [(&s2, BASE_PREFIX), (&s2, GRAFT_PREFIX), (&s2, CONVERTER_PREFIX), (&s3, BRANCH2_PREFIX)] {
        let (before, after) = (src.hash_prefix(prefix), outcome.checkpoint.hash_prefix(prefix));
        if before != after {
            return Err(Error::Numerical(format!("{prefix} parameters changed during fusion training")));
        }
        outcome.checkpoint.meta.notes.insert(format!("hash/{prefix}"), after);
    }
    outcome.checkpoint.save(&outcome.path)?;
    Ok(outcome)
}

pub fn run_all(cfg: &PipelineConfig, out: &Path, resume: bool) -> Result<Vec<StageOutcome>> {
    Ok(vec![
        run_stage1(cfg, out, resume)?,
        run_stage2(cfg, out, resume)?,
        run_stage3(cfg, out, resume)?,
        run_stage4(cfg, out, resume)?,
    ])
}
