//! Control grafting: a frozen base U-Net, a trainable copy of its contracting
//! path and middle block, and zero-initialized 1×1 bridges.
//!
//! The control image passes through a small conv encoder and an input bridge
//! (`z1`) and is added to `x_t` before entering the copy. Each copy level's
//! output and the copy's middle output pass through an output bridge (`z2`)
//! and are added to the corresponding base skip / middle feature.

use crate::diffusion::EpsilonModel;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Float, Graph, ParamStore, Var, ZeroConv};
use crate::rng::RngStream;
use crate::unet::{ControlResiduals, Encoder, UNet};

pub const GRAFT_PREFIX: &str = "graft/";
const COPY_PREFIX: &str = "graft/copy/";

/// Three 3×3 convs with ReLU; the first `log2(ratio)` have stride 2.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub convs: Vec<Conv2d>,
    pub out_channels: usize,
}

impl ConditionEncoder {
    pub const LAYERS: usize = 3;

    fn build<T: Float>(
        store: &mut ParamStore<T>,
        in_ch: usize,
        hidden: usize,
        downsample_steps: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let widths = [in_ch, hidden / 2, hidden, hidden];
        let convs = (0..Self::LAYERS)
            .map(|i| {
                let stride = if i < downsample_steps { 2 } else { 1 };
                Conv2d::build(store, &format!("{GRAFT_PREFIX}cond{i}"), widths[i], widths[i + 1], 3, stride, 1, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs, out_channels: hidden })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, c: Var) -> Result<Var> {
        let mut h = c;
        for conv in &self.convs {
            h = g.relu(conv.forward(g, store, h)?);
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct GraftedDenoiser<T: Float> {
    pub base: UNet<T>,
    /// Every grafted parameter (`graft/...`): the copy, condition encoder and bridges.
    pub store: ParamStore<T>,
    pub copy: Encoder,
    pub cond: ConditionEncoder,
    pub z1: ZeroConv,
    pub z2: Vec<ZeroConv>,
    pub control_channels: usize,
    pub control_spatial: (usize, usize),
}

/// Width of the condition encoder's output features.
pub const COND_FEATURES: usize = 32;

/// Freeze `base` and attach a trainable copy fed by control images of the given shape.
pub fn graft<T: Float>(
    mut base: UNet<T>,
    control_channels: usize,
    control_spatial: (usize, usize),
    rng: &mut RngStream,
) -> Result<GraftedDenoiser<T>> {
    let (h, w) = base.cfg.spatial;
    let steps = downsample_steps(control_spatial, (h, w))?;
    base.store.set_trainable_prefix("", false);
    let mut store = ParamStore::new();
    // The copy gets throwaway init and is then overwritten with the base values.
    let copy = Encoder::build(&mut store, COPY_PREFIX, &base.cfg, rng)?;
    let copied = store.copy_values_from(&base.store, &base.prefix, COPY_PREFIX)?;
    debug_assert_eq!(copied, store.len());
    let cond = ConditionEncoder::build(&mut store, control_channels, COND_FEATURES, steps, rng)?;
    let z1 = ZeroConv::build(&mut store, &format!("{GRAFT_PREFIX}z1"), COND_FEATURES, base.cfg.in_channels)?;
    let mut z2 = Vec::with_capacity(base.cfg.depth + 1);
    for l in 0..base.cfg.depth {
        let ch = base.cfg.level_channels(l);
        z2.push(ZeroConv::build(&mut store, &format!("{GRAFT_PREFIX}z2/down{l}"), ch, ch)?);
    }
    let mid = base.cfg.level_channels(base.cfg.depth);
    z2.push(ZeroConv::build(&mut store, &format!("{GRAFT_PREFIX}z2/mid"), mid, mid)?);
    Ok(GraftedDenoiser { base, store, copy, cond, z1, z2, control_channels, control_spatial })
}

fn downsample_steps(control: (usize, usize), x: (usize, usize)) -> Result<usize> {
    let ratio = |c: usize, s: usize| -> Option<usize> {
        if !c.is_multiple_of(s) {
            return None;
        }
        let r = c / s;
        r.is_power_of_two().then(|| r.trailing_zeros() as usize)
    };
    match (ratio(control.0, x.0), ratio(control.1, x.1)) {
        (Some(a), Some(b)) if a == b && a <= ConditionEncoder::LAYERS => Ok(a),
        _ => Err(Error::InvalidArgument(format!(
            "control size {}x{} must be the denoiser size {}x{} times a power of two up to {}",
            control.0,
            control.1,
            x.0,
            x.1,
            1 << ConditionEncoder::LAYERS
        ))),
    }
}

impl<T: Float> GraftedDenoiser<T> {
    pub fn num_bridges(&self) -> usize {
        self.z2.len()
    }

    /// SHA-256 of the frozen base parameters.
    pub fn base_hash(&self) -> String {
        self.base.store.hash_prefix("")
    }

    pub fn bridges_are_zero(&self) -> bool {
        self.z1.is_zero(&self.store) && self.z2.iter().all(|z| z.is_zero(&self.store))
    }

    pub fn zero_bridges(&mut self) {
        for z in std::iter::once(&self.z1).chain(&self.z2) {
            self.store.get_mut(z.w).data_mut().fill(T::zero());
            self.store.get_mut(z.b).data_mut().fill(T::zero());
        }
    }

    /// Sum of squared output-bridge parameters.
    pub fn z2_sq_norm(&self) -> f64 {
        self.z2.iter().map(|z| self.store.get(z.w).sq_norm() + self.store.get(z.b).sq_norm()).sum()
    }

    pub fn forward(&self, g: &Graph<T>, x: Var, ts: &[usize], caption: Option<Var>, control: Var) -> Result<Var> {
        let n = self.base.check_input(g, x, ts)?;
        let cs = g.shape(control);
        if cs != [n, self.control_channels, self.control_spatial.0, self.control_spatial.1] {
            return Err(shape_err(format!(
                "control {:?}, expected [{n}, {}, {}, {}]",
                cs, self.control_channels, self.control_spatial.0, self.control_spatial.1
            )));
        }
        let temb = self.base.time_input(g, ts)?;
        let cap = self.base.caption_input(g, n, caption)?;
        let feats = self.cond.forward(g, &self.store, control)?;
        let xc = g.add(x, self.z1.forward(g, &self.store, feats)?)?;
        let (skips, mid) = self.copy.forward(g, &self.store, xc, temb, cap)?;
        let skips = skips
            .iter()
            .zip(&self.z2)
            .map(|(&s, z)| z.forward(g, &self.store, s))
            .collect::<Result<Vec<_>>>()?;
        let middle = self.z2[self.z2.len() - 1].forward(g, &self.store, mid)?;
        self.base.forward(g, x, ts, cap, Some(&ControlResiduals { skips, middle }))
    }
}

impl<T: Float> EpsilonModel<T> for GraftedDenoiser<T> {
    fn image_shape(&self) -> (usize, usize, usize) {
        self.base.image_shape()
    }

    fn predict_eps(&self, g: &Graph<T>, x_t: Var, ts: &[usize], caption: Option<Var>, control: Option<Var>) -> Result<Var> {
        let control = control.ok_or_else(|| Error::InvalidArgument("grafted denoiser needs a control image".into()))?;
        self.forward(g, x_t, ts, caption, control)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{epsilon_loss, make_schedule, ScheduleKind};
    use crate::nn::{Adam, AdamConfig, Tensor};
    use crate::unet::{build_unet, UNetConfig};

    fn cfg() -> UNetConfig {
        UNetConfig {
            in_channels: 3,
            base_channels: 4,
            depth: 2,
            out_channels: 3,
            spatial: (8, 8),
            time_embed_dim: 8,
            caption_embed_dim: 4,
        }
    }

    fn randn(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn grafted(seed: u64) -> GraftedDenoiser<f64> {
        let mut rng = RngStream::new(seed, "g");
        let base = build_unet::<f64>(&cfg(), "base/", &mut rng).unwrap();
        graft(base, 3, (16, 16), &mut rng).unwrap()
    }

    #[test]
    fn copy_equals_base_and_bridges_zero() {
        let gd = grafted(0);
        assert!(gd.bridges_are_zero());
        assert_eq!(gd.num_bridges(), 3);
        for (name, id) in gd.store.names_sorted().filter(|(n, _)| n.starts_with(COPY_PREFIX)) {
            let base_name = format!("base/{}", &name[COPY_PREFIX.len()..]);
            assert_eq!(gd.store.get(id), gd.base.store.get_by_name(&base_name).unwrap(), "{name}");
        }
        assert!(gd.base.store.trainable_ids().is_empty());
    }

    #[test]
    fn control_resolution_contract() {
        let mut rng = RngStream::new(0, "g");
        let base = build_unet::<f64>(&cfg(), "base/", &mut rng).unwrap();
        assert!(graft(base.clone(), 3, (12, 12), &mut rng).is_err());
        assert!(graft(base.clone(), 3, (16, 8), &mut rng).is_err());
        let same = graft(base, 3, (8, 8), &mut rng).unwrap();
        assert!(same.cond.convs.iter().all(|c| c.stride == 1));
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let bad = g.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(same.forward(&g, x, &[1], None, bad).is_err());
    }

    fn outputs(gd: &GraftedDenoiser<f64>, x: &Tensor<f64>, c: &Tensor<f64>, t: usize) -> (Tensor<f64>, Tensor<f64>) {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let cv = g.constant(c.clone());
        let y = gd.forward(&g, xv, &[t], None, cv).unwrap();
        let yb = gd.base.forward(&g, xv, &[t], None, None).unwrap();
        ((*g.value(y)).clone(), (*g.value(yb)).clone())
    }

    #[test]
    fn init_identity_is_exact() {
        let gd = grafted(1);
        let mut rng = RngStream::new(2, "in");
        for t in [1, 50, 999] {
            let x = randn(&[1, 3, 8, 8], &mut rng);
            let c = randn(&[1, 3, 16, 16], &mut rng);
            let (y, yb) = outputs(&gd, &x, &c, t);
            assert_eq!(y.data(), yb.data());
        }
    }

    fn train(gd: &mut GraftedDenoiser<f64>, steps: usize) -> Vec<f64> {
        let schedule = make_schedule(ScheduleKind::Linear, 100, 1e-3, 0.05).unwrap();
        let mut opt = Adam::new(AdamConfig::adam());
        let mut rng = RngStream::new(3, "train");
        let x0 = randn(&[2, 3, 8, 8], &mut rng).map(|v| v.tanh());
        let c = randn(&[2, 3, 16, 16], &mut rng);
        let mut norms = Vec::new();
        for _ in 0..steps {
            let g = Graph::new();
            let l = epsilon_loss(&g, &*gd, &x0, None, Some(&c), &[20, 60], &schedule, &mut rng).unwrap();
            let grads = g.backward(l).unwrap().for_store(&gd.store);
            opt.step(&mut gd.store, &grads, 1e-2).unwrap();
            norms.push(gd.z2_sq_norm());
        }
        norms
    }

    #[test]
    fn one_step_moves_bridges_not_base() {
        let mut gd = grafted(4);
        let h0 = gd.base_hash();
        let norms = train(&mut gd, 1);
        assert_eq!(gd.base_hash(), h0);
        assert!(norms[0] > 0.0);
    }

    #[test]
    fn bridges_grow_and_control_matters_after_training() {
        let mut gd = grafted(5);
        let h0 = gd.base_hash();
        let norms = train(&mut gd, 10);
        assert!(norms[9] > norms[0]);
        assert_eq!(gd.base_hash(), h0);
        let mut rng = RngStream::new(6, "cmp");
        let x = randn(&[1, 3, 8, 8], &mut rng);
        let c1 = randn(&[1, 3, 16, 16], &mut rng);
        let c2 = randn(&[1, 3, 16, 16], &mut rng);
        let (y1, base) = outputs(&gd, &x, &c1, 30);
        let (y2, _) = outputs(&gd, &x, &c2, 30);
        assert_ne!(y1, y2);
        assert_ne!(y1, base);
        gd.zero_bridges();
        let (y0, base) = outputs(&gd, &x, &c1, 30);
        assert_eq!(y0.data(), base.data());
    }

    #[test]
    fn bridge_weight_gradient_matches_finite_differences() {
        let mut gd = grafted(7);
        train(&mut gd, 3); // move off the all-zero point so every bridge gets signal
        let mut rng = RngStream::new(8, "fd");
        let x = randn(&[1, 3, 8, 8], &mut rng);
        let c = randn(&[1, 3, 16, 16], &mut rng);
        let loss = |gd: &GraftedDenoiser<f64>| {
            let g = Graph::new();
            let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
            let y = gd.forward(&g, xv, &[25], None, cv).unwrap();
            let l = g.sum(g.square(y));
            (g.scalar_value(l), g, l)
        };
        let (_, g, l) = loss(&gd);
        let grads = g.backward(l).unwrap().for_store(&gd.store);
        let bridge_ids: Vec<_> = std::iter::once(gd.z1.w).chain(gd.z2.iter().map(|z| z.w)).collect();
        for id in bridge_ids {
            let grad = &grads.iter().find(|(i, _)| *i == id).unwrap().1;
            for idx in [0, grad.numel() - 1] {
                let an = grad.data()[idx];
                let orig = gd.store.get(id).data()[idx];
                let h = 1e-6;
                gd.store.get_mut(id).data_mut()[idx] = orig + h;
                let up = loss(&gd).0;
                gd.store.get_mut(id).data_mut()[idx] = orig - h;
                let down = loss(&gd).0;
                gd.store.get_mut(id).data_mut()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{}: {an} vs {fd}", gd.store.name(id));
            }
        }
    }
}
