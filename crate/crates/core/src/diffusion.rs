//! Noise schedule, forward noising, ε-prediction loss and samplers.
//!
//! Timesteps are 1-based: `t = 1..=T`, with `t = 0` denoting clean data.
//! `alpha_bar(0) = 1` by convention.

use crate::error::{shape_err, Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::nn::{Float, Graph, Tensor, Var};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from explicit betas, each in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside [0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.num_steps())));
        }
        Ok(())
    }
}

pub fn make_schedule(kind: ScheduleKind, t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t < 1 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear => (0..t)
            .map(|i| {
                if t == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

/// A noisy sample `x_t` (unbounded reals, `[C, H, W]` or `[N, C, H, W]`) at timestep `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x: Tensor<f32>,
    pub t: usize,
}

impl DiffusionState {
    /// Clean data at `t = 0`, in symmetric range.
    pub fn from_image(img: &ImageTensor) -> Self {
        Self { x: img.convert_range(ValueRange::Symmetric).tensor().clone(), t: 0 }
    }
}

/// One Markov step: `x_t = sqrt(1 - β_t) x_{t-1} + sqrt(β_t) ε`.
pub fn forward_step(prev: &DiffusionState, schedule: &NoiseSchedule, rng: &mut RngStream) -> Result<DiffusionState> {
    if prev.t >= schedule.num_steps() {
        return Err(Error::InvalidArgument(format!("cannot step past T = {}", schedule.num_steps())));
    }
    let t = prev.t + 1;
    let beta = schedule.beta(t);
    let (a, s) = ((1.0 - beta).sqrt() as f32, beta.sqrt() as f32);
    let mut x = prev.x.clone();
    if beta != 0.0 {
        x.data_mut().iter_mut().for_each(|v| *v = a * *v + s * rng.normal_f32());
    }
    Ok(DiffusionState { x, t })
}

/// Closed-form marginal `x_t = sqrt(ᾱ_t) x_0 + sqrt(1 - ᾱ_t) ε`; returns the drawn `ε`.
pub fn forward_to(
    x0: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<(DiffusionState, Tensor<f32>)> {
    let x0 = DiffusionState::from_image(x0).x;
    let (x, eps) = noise_to(&x0, &[t; 1], schedule, rng)?;
    Ok((DiffusionState { x, t }, eps))
}

/// Batched marginal on a raw tensor whose leading axis matches `ts` (or a single item when `ts.len() == 1`).
pub fn noise_to<T: Float>(
    x0: &Tensor<T>,
    ts: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let per = x0.numel() / ts.len().max(1);
    if ts.is_empty() || per * ts.len() != x0.numel() {
        return Err(shape_err(format!("{} timesteps for tensor {:?}", ts.len(), x0.shape())));
    }
    let mut eps = Vec::with_capacity(x0.numel());
    let mut x = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let ab = schedule.alpha_bar(t);
        let (a, s) = (T::of_f64(ab.sqrt()), T::of_f64((1.0 - ab).sqrt()));
        for &v in &x0.data()[i * per..(i + 1) * per] {
            let e = T::of_f64(rng.normal());
            eps.push(e);
            x.push(a * v + s * e);
        }
    }
    Ok((Tensor::new(x0.shape(), x)?, Tensor::new(x0.shape(), eps)?))
}

/// Ancestral reverse step with ε-parameterized mean and fixed variance `β_t I`:
/// `x_{t-1} = (x_t - β_t / sqrt(1 - ᾱ_t) ε̂) / sqrt(1 - β_t) + sqrt(β_t) z`, with `z = 0` at `t = 1`.
pub fn reverse_step(
    state: &DiffusionState,
    eps_pred: &Tensor<f32>,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<DiffusionState> {
    schedule.check_t(state.t)?;
    if eps_pred.shape() != state.x.shape() {
        return Err(shape_err(format!("ε shape {:?} vs x {:?}", eps_pred.shape(), state.x.shape())));
    }
    let t = state.t;
    let beta = schedule.beta(t);
    let coef = (beta / (1.0 - schedule.alpha_bar(t)).sqrt()) as f32;
    let inv = (1.0 / (1.0 - beta).sqrt()) as f32;
    let sigma = if t > 1 { beta.sqrt() as f32 } else { 0.0 };
    let mut x = state.x.zip_map(eps_pred, |x, e| (x - coef * e) * inv)?;
    if sigma > 0.0 {
        x.data_mut().iter_mut().for_each(|v| *v += sigma * rng.normal_f32());
    }
    Ok(DiffusionState { x, t: t - 1 })
}

/// Anything that predicts the added noise for a batch of noisy images.
pub trait EpsilonModel<T: Float> {
    /// `(channels, height, width)` of the images this model denoises.
    fn image_shape(&self) -> (usize, usize, usize);

    /// `x_t: [N, C, H, W]`, `ts: [N]`, `caption: [N, D]`, `control: [N, C', H', W']`.
    fn predict_eps(
        &self,
        g: &Graph<T>,
        x_t: Var,
        ts: &[usize],
        caption: Option<Var>,
        control: Option<Var>,
    ) -> Result<Var>;
}

/// Mean squared error between the model's prediction and freshly drawn noise, recorded on `g`.
#[allow(clippy::too_many_arguments)]
pub fn epsilon_loss<T: Float, M: EpsilonModel<T> + ?Sized>(
    g: &Graph<T>,
    model: &M,
    x0: &Tensor<T>,
    caption: Option<&Tensor<T>>,
    control: Option<&Tensor<T>>,
    ts: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Var> {
    let (x_t, eps) = noise_to(x0, ts, schedule, rng)?;
    let x_t = g.constant(x_t);
    let eps = g.constant(eps);
    let caption = caption.map(|c| g.constant(c.clone()));
    let control = control.map(|c| g.constant(c.clone()));
    let pred = model.predict_eps(g, x_t, ts, caption, control)?;
    if g.shape(pred) != g.shape(eps) {
        return Err(shape_err(format!("prediction {:?} vs noise {:?}", g.shape(pred), g.shape(eps))));
    }
    g.mse(pred, eps)
}

/// Descending DDIM timesteps: `t_k = 1 + floor(k (T - 1) / (S - 1))`, so the first is `T` and the last `1`.
pub fn ddim_timesteps(total: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps < 1 || num_steps > total {
        return Err(Error::InvalidArgument(format!("ddim steps {num_steps} outside 1..={total}")));
    }
    if num_steps == 1 {
        return Ok(vec![total]);
    }
    let mut ts: Vec<usize> = (0..num_steps).map(|k| 1 + k * (total - 1) / (num_steps - 1)).collect();
    ts.reverse();
    Ok(ts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimConfig {
    pub num_steps: usize,
    pub eta: f64,
}

impl Default for DdimConfig {
    fn default() -> Self {
        Self { num_steps: 50, eta: 0.0 }
    }
}

/// DDIM sampling of `n` images from standard-normal noise.
///
/// `observer` sees the state after every update (before the final clamp). Any
/// non-finite value aborts with [`Error::Numerical`]. The result is clamped
/// to `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample<M: EpsilonModel<f32> + ?Sized>(
    model: &M,
    n: usize,
    control: Option<&Tensor<f32>>,
    caption: Option<&Tensor<f32>>,
    schedule: &NoiseSchedule,
    cfg: DdimConfig,
    rng: &mut RngStream,
    mut observer: Option<&mut dyn FnMut(usize, &Tensor<f32>)>,
) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&cfg.eta) {
        return Err(Error::InvalidArgument(format!("eta {} outside [0, 1]", cfg.eta)));
    }
    let steps = ddim_timesteps(schedule.num_steps(), cfg.num_steps)?;
    let (c, h, w) = model.image_shape();
    let shape = [n, c, h, w];
    let mut x = Tensor::new(&shape, rng.normals(n * c * h * w))?;
    for (k, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(k + 1).copied().unwrap_or(0);
        let g = Graph::<f32>::new();
        let xv = g.constant(x.clone());
        let cap = caption.map(|v| g.constant(v.clone()));
        let ctl = control.map(|v| g.constant(v.clone()));
        let eps = model.predict_eps(&g, xv, &vec![t; n], cap, ctl)?;
        let eps = g.value(eps);
        if eps.shape() != shape {
            return Err(shape_err(format!("prediction {:?} vs sample {:?}", eps.shape(), shape)));
        }
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let sigma = cfg.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let (sa, s1a, sap) = (ab.sqrt(), (1.0 - ab).sqrt(), ab_prev.sqrt());
        let mut next = Vec::with_capacity(x.numel());
        for (&xv, &ev) in x.data().iter().zip(eps.data()) {
            let (xv, ev) = (xv as f64, ev as f64);
            let x0 = (xv - s1a * ev) / sa;
            let mut v = sap * x0 + dir * ev;
            if sigma > 0.0 {
                v += sigma * rng.normal();
            }
            next.push(v as f32);
        }
        x = Tensor::new(&shape, next)?;
        if !x.all_finite() {
            return Err(Error::Numerical(format!("non-finite DDIM state at t = {t}")));
        }
        if let Some(obs) = observer.as_mut() {
            obs(t, &x);
        }
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

/// Single-image convenience wrapper around [`ddim_sample`].
pub fn ddim_sample_image<M: EpsilonModel<f32> + ?Sized>(
    model: &M,
    control: Option<&ImageTensor>,
    caption: Option<&[f32]>,
    schedule: &NoiseSchedule,
    cfg: DdimConfig,
    rng: &mut RngStream,
) -> Result<ImageTensor> {
    let control = match control {
        Some(c) => {
            let c = c.convert_range(ValueRange::Symmetric);
            let (ch, h, w) = c.dims();
            Some(c.tensor().clone().reshape(&[1, ch, h, w])?)
        }
        None => None,
    };
    let caption = match caption {
        Some(v) => Some(Tensor::new(&[1, v.len()], v.to_vec())?),
        None => None,
    };
    let out = ddim_sample(model, 1, control.as_ref(), caption.as_ref(), schedule, cfg, rng, None)?;
    ImageTensor::from_tensor(&out.batch_item(0)?, ValueRange::Symmetric)
}

/// Maps images into the space the diffusion model runs in.
pub trait LatentCodec {
    fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Pixel-space diffusion.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(x.clone())
    }
    fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(z.clone())
    }
}
