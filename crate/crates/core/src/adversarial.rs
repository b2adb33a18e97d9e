//! Conditional encoder-decoder generator, patch discriminator and the GAN objectives.
//!
//! Generator: three stride-2 4×4 convolutions (leaky ReLU) down to a bottleneck at
//! 1/8 of the input size, then three non-overlapping up-convolutions whose
//! per-axis strides reach the target size (so a square input can leave as a 1:4
//! strip), each followed by a 3×3 convolution with ReLU. Whenever an
//! up-convolution output matches the spatial size of an encoder feature (or the
//! input itself) that feature is concatenated first. Dropout at rate
//! `dropout` follows the first two decoder blocks in training mode and is the
//! generator's only noise source. When the input already lies on the output
//! grid (fusion, or a polar-warped satellite) a 1×1 convolution of the input,
//! initialized to average its RGB groups, is added before the final `tanh`.
//!
//! Discriminator: the image concatenated with its condition (resized to the
//! image size), two stride-2 4×4 convolutions and a 3×3 convolution to one
//! logit per patch.

use serde::{Deserialize, Serialize};

use crate::datasets::{CAMERA_HEIGHT, SCENE_SIZE};
use crate::error::{shape_err, Error, Result};
use crate::image::{resize_batch, ResizeMode};
use crate::nn::{Adam, AdamConfig, Conv2d, Float, Graph, ParamStore, Tensor, UpConv, Var};
use crate::rng::RngStream;

pub const LOGIT_CAP: f64 = 20.0;
const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GanLoss {
    Minimax,
    NonSaturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub in_channels: usize,
    pub in_spatial: (usize, usize),
    pub out_shape: (usize, usize),
    pub base_channels: usize,
    pub gan_loss: GanLoss,
    pub recon_weight: f64,
    pub dropout: f64,
    /// Resample the condition onto an (range × azimuth) grid of the output size before use.
    pub polar: bool,
}

impl PairConfig {
    pub fn new(in_channels: usize, in_spatial: (usize, usize), out_shape: (usize, usize), base_channels: usize) -> Self {
        Self {
            in_channels,
            in_spatial,
            out_shape,
            base_channels,
            gan_loss: GanLoss::NonSaturating,
            recon_weight: 100.0,
            dropout: 0.5,
            polar: false,
        }
    }

    /// Spatial size the generator actually consumes.
    pub fn generator_spatial(&self) -> (usize, usize) {
        if self.polar {
            self.out_shape
        } else {
            self.in_spatial
        }
    }
}

/// Fixed bilinear resampling of a top-down image into panorama layout.
///
/// Output column `j` looks along azimuth `θ = 2πj / out_w` (0 = east, counter-clockwise,
/// north = up in the source). Rows below the mid-height horizon sample the ground
/// point a camera at height `c R` sees at that elevation, `R` being half the shorter
/// side and rows spanning `π / (2 out_h)` radians each; rows above mirror those
/// below, which is roughly where a raised object at that range reaches. Ranges
/// past `R` clamp to the rim.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarWarp {
    pub src: (usize, usize),
    pub out: (usize, usize),
    taps: Vec<[(usize, f64); 4]>,
}

impl PolarWarp {
    /// Camera height as a fraction of `R`; matches the synthetic renderer.
    pub const CAMERA: f64 = CAMERA_HEIGHT / (SCENE_SIZE as f64 / 2.0);

    pub fn new(src: (usize, usize), out: (usize, usize)) -> Self {
        let (h, w) = src;
        let (oh, ow) = out;
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let radius = h.min(w) as f64 / 2.0;
        let horizon = oh / 2;
        let mut taps = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            let below = if i >= horizon { i - horizon } else { horizon - 1 - i };
            let elevation = (below as f64 + 0.5) * std::f64::consts::PI / (2.0 * oh as f64);
            let r = (radius * Self::CAMERA / elevation.tan()).min(radius);
            for j in 0..ow {
                let theta = 2.0 * std::f64::consts::PI * j as f64 / ow as f64;
                let fx = (cx + r * theta.cos() - 0.5).clamp(0.0, (w - 1) as f64);
                let fy = (cy - r * theta.sin() - 0.5).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                taps.push([
                    (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
                    (y0 * w + x1, tx * (1.0 - ty)),
                    (y1 * w + x0, (1.0 - tx) * ty),
                    (y1 * w + x1, tx * ty),
                ]);
            }
        }
        Self { src, out, taps }
    }

    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if (h, w) != self.src {
            return Err(shape_err(format!("polar warp built for {:?}, got {h}x{w}", self.src)));
        }
        let plane = self.out.0 * self.out.1;
        let mut out = Vec::with_capacity(n * c * plane);
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            out.extend(self.taps.iter().map(|t| t.iter().map(|&(i, wt)| src[i] * T::of_f64(wt)).fold(T::zero(), |a, b| a + b)));
        }
        Tensor::new(&[n, c, self.out.0, self.out.1], out)
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    up: UpConv,
    conv: Conv2d,
    /// Encoder feature concatenated after upsampling (0 = the input itself).
    skip: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Generator<T: Float> {
    pub store: ParamStore<T>,
    encoder: Vec<Conv2d>,
    decoder: Vec<DecoderBlock>,
    out: Conv2d,
    /// 1×1 input-to-output path, present when input and output grids coincide.
    bridge: Option<Conv2d>,
    dropout: f64,
    in_channels: usize,
    in_spatial: (usize, usize),
}

/// Split `2^k` into three power-of-two factors, larger ones first.
fn split_ratio(total: usize) -> Option<[usize; 3]> {
    if total == 0 || !total.is_power_of_two() {
        return None;
    }
    let k = total.trailing_zeros() as usize;
    let mut e = [k / 3; 3];
    for slot in e.iter_mut().take(k % 3) {
        *slot += 1;
    }
    Some(e.map(|x| 1 << x))
}

impl<T: Float> Generator<T> {
    pub const LEVELS: usize = 3;

    fn build(
        prefix: &str,
        in_channels: usize,
        in_spatial: (usize, usize),
        out_spatial: (usize, usize),
        base: usize,
        dropout: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let (h, w) = in_spatial;
        let m = 1 << Self::LEVELS;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::InvalidArgument(format!("generator input {h}x{w} must be divisible by {m}")));
        }
        let (bh, bw) = (h / m, w / m);
        let (sh, sw) = match (
            out_spatial.0.is_multiple_of(bh).then(|| split_ratio(out_spatial.0 / bh)).flatten(),
            out_spatial.1.is_multiple_of(bw).then(|| split_ratio(out_spatial.1 / bw)).flatten(),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "output {:?} is not a power-of-two upscale of the {bh}x{bw} bottleneck",
                    out_spatial
                )))
            }
        };
        let mut store = ParamStore::new();
        let enc_w = [in_channels, base, 2 * base, 4 * base];
        let mut encoder = Vec::new();
        for i in 0..Self::LEVELS {
            encoder.push(Conv2d::build(&mut store, &format!("{prefix}enc{i}"), enc_w[i], enc_w[i + 1], 4, 2, 1, rng)?);
        }
        let enc_spatial: Vec<(usize, usize)> = (0..Self::LEVELS).map(|i| (h >> i, w >> i)).collect();
        let dec_w = [4 * base, 2 * base, base, base];
        let mut decoder = Vec::new();
        let (mut ch, mut cw) = (bh, bw);
        for i in 0..Self::LEVELS {
            ch *= sh[i];
            cw *= sw[i];
            let skip = enc_spatial.iter().position(|&s| s == (ch, cw));
            let skip_ch = skip.map_or(0, |j| enc_w[j]);
            let up = UpConv::build(&mut store, &format!("{prefix}dec{i}/up"), dec_w[i], dec_w[i + 1], sh[i], sw[i], rng)?;
            let conv = Conv2d::same3(&mut store, &format!("{prefix}dec{i}/conv"), dec_w[i + 1] + skip_ch, dec_w[i + 1], rng)?;
            decoder.push(DecoderBlock { up, conv, skip });
        }
        let out = Conv2d::same3(&mut store, &format!("{prefix}out"), base, 3, rng)?;
        let bridge = if in_spatial == out_spatial && in_channels.is_multiple_of(3) {
            let groups = in_channels / 3;
            let mut w = Tensor::<T>::zeros(&[3, in_channels, 1, 1]);
            for o in 0..3 {
                for k in 0..groups {
                    w.data_mut()[o * in_channels + 3 * k + o] = T::of_f64(1.0 / groups as f64);
                }
            }
            let wid = store.add(format!("{prefix}bridge/w"), w)?;
            let bid = store.add_zeros(format!("{prefix}bridge/b"), &[3])?;
            Some(Conv2d { w: wid, b: bid, in_ch: in_channels, out_ch: 3, kernel: 1, stride: 1, pad: 0 })
        } else {
            None
        };
        Ok(Self { store, encoder, decoder, out, bridge, dropout, in_channels, in_spatial })
    }

    /// Decoder blocks that receive an encoder skip, by index.
    pub fn skip_levels(&self) -> Vec<Option<usize>> {
        self.decoder.iter().map(|d| d.skip).collect()
    }

    /// `x: [N, C, H, W]`. With `train_rng` set, dropout masks are drawn from it.
    pub fn forward(&self, g: &Graph<T>, x: Var, mut train_rng: Option<&mut RngStream>) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.in_channels || (s[2], s[3]) != self.in_spatial {
            return Err(shape_err(format!(
                "generator input {:?}, expected [N, {}, {}, {}]",
                s, self.in_channels, self.in_spatial.0, self.in_spatial.1
            )));
        }
        let mut feats = vec![x];
        let mut h = x;
        for conv in &self.encoder {
            h = g.leaky_relu(conv.forward(g, &self.store, h)?, LEAK);
            feats.push(h);
        }
        for (i, block) in self.decoder.iter().enumerate() {
            h = block.up.forward(g, &self.store, h)?;
            if let Some(j) = block.skip {
                h = g.concat(&[h, feats[j]])?;
            }
            h = g.relu(block.conv.forward(g, &self.store, h)?);
            if i < 2 && self.dropout > 0.0 {
                if let Some(rng) = train_rng.as_deref_mut() {
                    let keep = 1.0 - self.dropout;
                    let scale = T::of_f64(1.0 / keep);
                    let shape = g.shape(h);
                    let n: usize = shape.iter().product();
                    let mask = (0..n).map(|_| if rng.uniform() < keep { scale } else { T::zero() }).collect();
                    h = g.mul_const(h, Tensor::new(&shape, mask)?)?;
                }
            }
        }
        let mut y = self.out.forward(g, &self.store, h)?;
        if let Some(b) = &self.bridge {
            y = g.add(y, b.forward(g, &self.store, x)?)?;
        }
        Ok(g.tanh(y))
    }
}

/// Anything that scores (image, condition) pairs with a grid of logits.
pub trait Critic<T: Float> {
    fn store(&self) -> &ParamStore<T>;
    fn logits(&self, g: &Graph<T>, image: Var, condition: Var) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct PatchDiscriminator<T: Float> {
    pub store: ParamStore<T>,
    convs: Vec<Conv2d>,
}

impl<T: Float> PatchDiscriminator<T> {
    fn build(prefix: &str, in_channels: usize, base: usize, rng: &mut RngStream) -> Result<Self> {
        let mut store = ParamStore::new();
        let convs = vec![
            Conv2d::build(&mut store, &format!("{prefix}c0"), in_channels, base, 4, 2, 1, rng)?,
            Conv2d::build(&mut store, &format!("{prefix}c1"), base, 2 * base, 4, 2, 1, rng)?,
            Conv2d::build(&mut store, &format!("{prefix}c2"), 2 * base, 1, 3, 1, 1, rng)?,
        ];
        Ok(Self { store, convs })
    }
}

impl<T: Float> Critic<T> for PatchDiscriminator<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn logits(&self, g: &Graph<T>, image: Var, condition: Var) -> Result<Var> {
        let mut h = g.concat(&[image, condition])?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, &self.store, h)?;
            if i < last {
                h = g.leaky_relu(h, LEAK);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct AdversarialPair<T: Float> {
    pub cfg: PairConfig,
    pub prefix: String,
    pub generator: Generator<T>,
    pub discriminator: PatchDiscriminator<T>,
    pub warp: Option<PolarWarp>,
}

/// Build generator `{prefix}g/...` and discriminator `{prefix}d/...`.
pub fn build_pair<T: Float>(cfg: &PairConfig, prefix: &str, rng: &mut RngStream) -> Result<AdversarialPair<T>> {
    let (oh, ow) = cfg.out_shape;
    if oh == 0 || ow == 0 || ow % oh != 0 {
        return Err(Error::InvalidArgument(format!("output width {ow} must be a multiple of height {oh}")));
    }
    if cfg.base_channels == 0 || cfg.in_channels == 0 {
        return Err(Error::InvalidArgument("pair channel counts must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout) || !(cfg.recon_weight >= 0.0) {
        return Err(Error::InvalidArgument("dropout must be in [0, 1) and recon_weight >= 0".into()));
    }
    let warp = cfg.polar.then(|| PolarWarp::new(cfg.in_spatial, cfg.out_shape));
    let generator = Generator::build(
        &format!("{prefix}g/"),
        cfg.in_channels,
        cfg.generator_spatial(),
        cfg.out_shape,
        cfg.base_channels,
        cfg.dropout,
        &mut rng.derive("g"),
    )?;
    let discriminator =
        PatchDiscriminator::build(&format!("{prefix}d/"), 3 + cfg.in_channels, cfg.base_channels, &mut rng.derive("d"))?;
    Ok(AdversarialPair { cfg: cfg.clone(), prefix: prefix.to_string(), generator, discriminator, warp })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GanLossReport {
    pub d_loss_real: f64,
    pub d_loss_fake: f64,
    pub g_loss_adv: f64,
    pub g_loss_recon: f64,
    /// Value function `E[log D(x|y)] + E[log(1 - D(G(z|y)|y))]`.
    pub value_v: f64,
}

impl GanLossReport {
    pub fn d_loss(&self) -> f64 {
        self.d_loss_real + self.d_loss_fake
    }

    pub fn g_loss(&self) -> f64 {
        self.g_loss_adv + self.g_loss_recon
    }

    pub fn all_finite(&self) -> bool {
        [self.d_loss_real, self.d_loss_fake, self.g_loss_adv, self.g_loss_recon, self.value_v]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Discriminator objective on `g`; `fake` is re-entered as a constant.
/// Returns `(loss, real term, fake term)`.
pub fn discriminator_objective<T: Float, C: Critic<T> + ?Sized>(
    g: &Graph<T>,
    critic: &C,
    real: Var,
    fake: Var,
    condition: Var,
) -> Result<(Var, f64, f64)> {
    let fake = g.constant((*g.value(fake)).clone());
    let lr = g.clamp(critic.logits(g, real, condition)?, -LOGIT_CAP, LOGIT_CAP);
    let lf = g.clamp(critic.logits(g, fake, condition)?, -LOGIT_CAP, LOGIT_CAP);
    let real_term = g.neg(g.mean(g.log_sigmoid(lr)));
    let fake_term = g.neg(g.mean(g.log_sigmoid(g.neg(lf))));
    let loss = g.add(real_term, fake_term)?;
    Ok((loss, g.scalar_value(real_term).as_f64(), g.scalar_value(fake_term).as_f64()))
}

/// Generator objective on `g`. Returns `(total, adversarial term, weighted L1 term)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Float, C: Critic<T> + ?Sized>(
    g: &Graph<T>,
    critic: &C,
    fake: Var,
    real: Var,
    condition: Var,
    kind: GanLoss,
    recon_weight: f64,
) -> Result<(Var, f64, f64)> {
    let lf = g.clamp(critic.logits(g, fake, condition)?, -LOGIT_CAP, LOGIT_CAP);
    let adv = match kind {
        GanLoss::NonSaturating => g.neg(g.mean(g.log_sigmoid(lf))),
        GanLoss::Minimax => g.mean(g.log_sigmoid(g.neg(lf))),
    };
    let l1 = g.mean(g.abs(g.sub(fake, real)?));
    let recon = g.scale(l1, recon_weight);
    let total = if recon_weight == 0.0 { adv } else { g.add(adv, recon)? };
    Ok((total, g.scalar_value(adv).as_f64(), g.scalar_value(recon).as_f64()))
}

fn check_finite<T: Float>(what: &str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite values in {what}")))
    }
}

impl<T: Float> AdversarialPair<T> {
    /// Condition as the generator consumes it (polar-warped when configured).
    pub fn generator_input(&self, condition: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = condition.dims4()?;
        if c != self.cfg.in_channels || (h, w) != self.cfg.in_spatial {
            return Err(shape_err(format!(
                "condition {:?}, expected [N, {}, {}, {}]",
                condition.shape(),
                self.cfg.in_channels,
                self.cfg.in_spatial.0,
                self.cfg.in_spatial.1
            )));
        }
        match &self.warp {
            Some(w) => w.apply(condition),
            None => Ok(condition.clone()),
        }
    }

    /// Generator input resized to the output size, as the discriminator sees it.
    pub fn critic_condition(&self, generator_input: &Tensor<T>) -> Result<Tensor<T>> {
        let (oh, ow) = self.cfg.out_shape;
        let (_, _, h, w) = generator_input.dims4()?;
        if (h, w) == (oh, ow) {
            return Ok(generator_input.clone());
        }
        Ok(resize_batch(&generator_input.cast::<f32>(), oh, ow, ResizeMode::Bilinear)?.cast::<T>())
    }

    /// Inference (no dropout): `[N, C, H, W]` condition to `[N, 3, h, w]` output in `[-1, 1]`.
    pub fn generate(&self, condition: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let x = g.constant(self.generator_input(condition)?);
        let y = self.generator.forward(&g, x, None)?;
        Ok((*g.value(y)).clone())
    }

    fn check_target(&self, target: &Tensor<T>, n: usize) -> Result<()> {
        let (oh, ow) = self.cfg.out_shape;
        if target.shape() != [n, 3, oh, ow] {
            return Err(shape_err(format!("target {:?}, expected [{n}, 3, {oh}, {ow}]", target.shape())));
        }
        Ok(())
    }

    /// All loss terms for given real/fake images and raw condition, without updating anything.
    pub fn loss_report(&self, real: &Tensor<T>, fake: &Tensor<T>, condition: &Tensor<T>) -> Result<GanLossReport> {
        check_finite("real", real)?;
        check_finite("fake", fake)?;
        check_finite("condition", condition)?;
        let n = condition.dims4()?.0;
        self.check_target(real, n)?;
        self.check_target(fake, n)?;
        let dc = self.critic_condition(&self.generator_input(condition)?)?;
        let g = Graph::new();
        let (r, f, c) = (g.constant(real.clone()), g.constant(fake.clone()), g.constant(dc));
        let (_, rt, ft) = discriminator_objective(&g, &self.discriminator, r, f, c)?;
        let (_, adv, rec) =
            generator_objective(&g, &self.discriminator, f, r, c, self.cfg.gan_loss, self.cfg.recon_weight)?;
        Ok(GanLossReport { d_loss_real: rt, d_loss_fake: ft, g_loss_adv: adv, g_loss_recon: rec, value_v: -(rt + ft) })
    }

    pub fn discriminator_loss(&self, real: &Tensor<T>, fake: &Tensor<T>, condition: &Tensor<T>) -> Result<GanLossReport> {
        self.loss_report(real, fake, condition)
    }

    pub fn generator_loss(&self, fake: &Tensor<T>, real: &Tensor<T>, condition: &Tensor<T>) -> Result<GanLossReport> {
        self.loss_report(real, fake, condition)
    }

    /// Fraction of patches classified correctly (real logit > 0, fake logit < 0).
    pub fn patch_accuracy(&self, real: &Tensor<T>, fake: &Tensor<T>, condition: &Tensor<T>) -> Result<f64> {
        let dc = self.critic_condition(&self.generator_input(condition)?)?;
        let g = Graph::new();
        let c = g.constant(dc);
        let lr = g.value(self.discriminator.logits(&g, g.constant(real.clone()), c)?);
        let lf = g.value(self.discriminator.logits(&g, g.constant(fake.clone()), c)?);
        let good = lr.data().iter().filter(|v| **v > T::zero()).count() + lf.data().iter().filter(|v| **v < T::zero()).count();
        Ok(good as f64 / (lr.numel() + lf.numel()) as f64)
    }
}

/// Adam state for both networks of a pair.
#[derive(Debug, Clone)]
pub struct GanOptimizers<T> {
    pub g: Adam<T>,
    pub d: Adam<T>,
}

impl<T: Float> GanOptimizers<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { g: Adam::new(config), d: Adam::new(config) }
    }
}

/// One discriminator update on fixed fakes.
pub fn discriminator_step<T: Float>(
    pair: &mut AdversarialPair<T>,
    condition: &Tensor<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    d_lr: f64,
    opt: &mut Adam<T>,
) -> Result<(f64, f64)> {
    let dc = pair.critic_condition(&pair.generator_input(condition)?)?;
    let grads = {
        let g = Graph::new();
        let (r, f, c) = (g.constant(real.clone()), g.constant(fake.clone()), g.constant(dc));
        let (loss, rt, ft) = discriminator_objective(&g, &pair.discriminator, r, f, c)?;
        if !(rt + ft).is_finite() {
            return Err(Error::NonFiniteLoss { step: opt.steps_taken() + 1, what: "discriminator".into() });
        }
        (g.backward(loss)?.for_store(&pair.discriminator.store), rt, ft)
    };
    opt.step(&mut pair.discriminator.store, &grads.0, d_lr)?;
    Ok((grads.1, grads.2))
}

/// One discriminator update followed by one generator update.
///
/// The reported discriminator terms are measured before its update; the
/// generator terms are measured against the updated discriminator, before the
/// generator update.
pub fn train_step<T: Float>(
    pair: &mut AdversarialPair<T>,
    condition: &Tensor<T>,
    target: &Tensor<T>,
    g_lr: f64,
    d_lr: f64,
    opt: &mut GanOptimizers<T>,
    rng: &mut RngStream,
) -> Result<GanLossReport> {
    let n = condition.dims4()?.0;
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    pair.check_target(target, n)?;
    let step = opt.g.steps_taken() + 1;
    let gin = pair.generator_input(condition)?;
    let dc = pair.critic_condition(&gin)?;
    let gg = Graph::new();
    let fake = pair.generator.forward(&gg, gg.constant(gin), Some(rng))?;
    let (d_real, d_fake) = {
        let gd = Graph::new();
        let (r, f, c) = (gd.constant(target.clone()), gd.constant((*gg.value(fake)).clone()), gd.constant(dc.clone()));
        let (loss, rt, ft) = discriminator_objective(&gd, &pair.discriminator, r, f, c)?;
        if !(rt + ft).is_finite() {
            return Err(Error::NonFiniteLoss { step, what: "discriminator".into() });
        }
        let grads = gd.backward(loss)?.for_store(&pair.discriminator.store);
        drop(gd);
        opt.d.step(&mut pair.discriminator.store, &grads, d_lr)?;
        (rt, ft)
    };
    gg.detach_store(&pair.discriminator.store);
    let (r, c) = (gg.constant(target.clone()), gg.constant(dc));
    let (total, adv, rec) =
        generator_objective(&gg, &pair.discriminator, fake, r, c, pair.cfg.gan_loss, pair.cfg.recon_weight)?;
    if !(adv + rec).is_finite() {
        return Err(Error::NonFiniteLoss { step, what: "generator".into() });
    }
    let grads = gg.backward(total)?.for_store(&pair.generator.store);
    drop(gg);
    opt.g.step(&mut pair.generator.store, &grads, g_lr)?;
    Ok(GanLossReport { d_loss_real: d_real, d_loss_fake: d_fake, g_loss_adv: adv, g_loss_recon: rec, value_v: -(d_real + d_fake) })
}
