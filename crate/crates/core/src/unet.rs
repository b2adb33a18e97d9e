//! Plain U-Net ε-predictor with additive timestep and caption conditioning.
//!
//! Each level is `conv3x3 -> ReLU -> (+ time + caption) -> conv3x3 -> ReLU`.
//! The contracting path max-pools after every level; the middle block runs at
//! `base * 2^depth` channels; the expansive path up-convolves (halving
//! channels), concatenates the matching skip and runs a level block. A final
//! 1×1 convolution maps to `out_channels`.

use crate::diffusion::EpsilonModel;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Float, Graph, Linear, ParamStore, Tensor, UpConv, Var};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub out_channels: usize,
    pub spatial: (usize, usize),
    pub time_embed_dim: usize,
    pub caption_embed_dim: usize,
}

impl UNetConfig {
    pub fn desk_default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 32,
            depth: 3,
            out_channels: 3,
            spatial: (64, 64),
            time_embed_dim: 32,
            caption_embed_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_channels < 4 {
            return Err(Error::InvalidArgument(format!(
                "need depth >= 1 and base_channels >= 4, got {} / {}",
                self.depth, self.base_channels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.time_embed_dim == 0 {
            return Err(Error::InvalidArgument("channel counts and time_embed_dim must be positive".into()));
        }
        let m = 1usize << self.depth;
        let (h, w) = self.spatial;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::InvalidArgument(format!("spatial {h}x{w} not divisible by 2^{}", self.depth)));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Feature-map size entering `level` (level `depth` is the middle block).
    pub fn level_spatial(&self, level: usize) -> (usize, usize) {
        (self.spatial.0 >> level, self.spatial.1 >> level)
    }
}

/// Sinusoidal embedding: `[sin(t f_0), cos(t f_0), sin(t f_1), ...]` with
/// `f_i = 10000^(-i / (dim / 2))`. Odd `dim` leaves the last slot zero.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[2 * i] = (t as f64 * f).sin();
        out[2 * i + 1] = (t as f64 * f).cos();
    }
    out
}

/// Per-level channel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelRecord {
    pub down: Vec<usize>,
    pub middle: usize,
    pub up: Vec<usize>,
}

/// Two 3×3 convolutions with embedding injection between them.
#[derive(Debug, Clone)]
pub struct Level {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub time: Linear,
    pub caption: Option<Linear>,
    pub channels: usize,
}

impl Level {
    fn build<T: Float>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        cfg: &UNetConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let conv1 = Conv2d::same3(store, &format!("{prefix}/conv1"), in_ch, out_ch, rng)?;
        let time = Linear::build(store, &format!("{prefix}/time"), cfg.time_embed_dim, out_ch, rng)?;
        let caption = match cfg.caption_embed_dim {
            0 => None,
            d => Some(Linear::build(store, &format!("{prefix}/caption"), d, out_ch, rng)?),
        };
        let conv2 = Conv2d::same3(store, &format!("{prefix}/conv2"), out_ch, out_ch, rng)?;
        Ok(Self { conv1, conv2, time, caption, channels: out_ch })
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params()
            + self.conv2.num_params()
            + self.time.num_params()
            + self.caption.as_ref().map_or(0, |c| c.num_params())
    }

    pub fn forward<T: Float>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        temb: Var,
        caption: Option<Var>,
    ) -> Result<Var> {
        let mut h = g.relu(self.conv1.forward(g, store, x)?);
        h = g.add_per_sample_channel(h, self.time.forward(g, store, temb)?)?;
        if let (Some(lin), Some(c)) = (&self.caption, caption) {
            h = g.add_per_sample_channel(h, lin.forward(g, store, c)?)?;
        }
        Ok(g.relu(self.conv2.forward(g, store, h)?))
    }
}

/// Contracting path plus middle block.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub levels: Vec<Level>,
    pub middle: Level,
}

impl Encoder {
    pub fn build<T: Float>(store: &mut ParamStore<T>, prefix: &str, cfg: &UNetConfig, rng: &mut RngStream) -> Result<Self> {
        let mut levels = Vec::with_capacity(cfg.depth);
        let mut in_ch = cfg.in_channels;
        for l in 0..cfg.depth {
            let ch = cfg.level_channels(l);
            levels.push(Level::build(store, &format!("{prefix}down{l}"), in_ch, ch, cfg, rng)?);
            in_ch = ch;
        }
        let middle = Level::build(store, &format!("{prefix}mid"), in_ch, cfg.level_channels(cfg.depth), cfg, rng)?;
        Ok(Self { levels, middle })
    }

    pub fn num_params(&self) -> usize {
        self.levels.iter().map(Level::num_params).sum::<usize>() + self.middle.num_params()
    }

    /// Returns the per-level skip features and the middle-block output.
    pub fn forward<T: Float>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        temb: Var,
        caption: Option<Var>,
    ) -> Result<(Vec<Var>, Var)> {
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut h = x;
        for level in &self.levels {
            let s = level.forward(g, store, h, temb, caption)?;
            skips.push(s);
            h = g.max_pool2(s)?;
        }
        let mid = self.middle.forward(g, store, h, temb, caption)?;
        Ok((skips, mid))
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub ups: Vec<UpConv>,
    pub levels: Vec<Level>,
    pub out: Conv2d,
}

/// Residuals added to the base's skips (one per level) and middle output.
#[derive(Debug, Clone)]
pub struct ControlResiduals {
    pub skips: Vec<Var>,
    pub middle: Var,
}

#[derive(Debug, Clone)]
pub struct UNet<T: Float> {
    pub cfg: UNetConfig,
    pub prefix: String,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Build a U-Net whose parameters are named `{prefix}down0/conv1/w` and so on.
pub fn build_unet<T: Float>(cfg: &UNetConfig, prefix: &str, rng: &mut RngStream) -> Result<UNet<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let encoder = Encoder::build(&mut store, prefix, cfg, rng)?;
    // Decoder levels are built and stored from the bottom up (level depth-1 first).
    let mut ups = Vec::with_capacity(cfg.depth);
    let mut levels = Vec::with_capacity(cfg.depth);
    for l in (0..cfg.depth).rev() {
        let ch = cfg.level_channels(l);
        ups.push(UpConv::build(&mut store, &format!("{prefix}up{l}/upconv"), 2 * ch, ch, 2, 2, rng)?);
        levels.push(Level::build(&mut store, &format!("{prefix}up{l}"), 2 * ch, ch, cfg, rng)?);
    }
    let out = Conv2d::build(&mut store, &format!("{prefix}out"), cfg.base_channels, cfg.out_channels, 1, 1, 0, rng)?;
    Ok(UNet { cfg: cfg.clone(), prefix: prefix.to_string(), store, encoder, decoder: Decoder { ups, levels, out } })
}

impl<T: Float> UNet<T> {
    pub fn channel_record(&self) -> ChannelRecord {
        ChannelRecord {
            down: self.encoder.levels.iter().map(|l| l.channels).collect(),
            middle: self.encoder.middle.channels,
            up: self.decoder.levels.iter().map(|l| l.channels).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params()
            + self.decoder.ups.iter().map(UpConv::num_params).sum::<usize>()
            + self.decoder.levels.iter().map(Level::num_params).sum::<usize>()
            + self.decoder.out.num_params()
    }

    /// `[N, time_embed_dim]` sinusoid table as a graph constant.
    pub fn time_input(&self, g: &Graph<T>, ts: &[usize]) -> Result<Var> {
        let d = self.cfg.time_embed_dim;
        let data = ts.iter().flat_map(|&t| timestep_embedding(t, d)).map(T::of_f64).collect();
        Ok(g.constant(Tensor::new(&[ts.len(), d], data)?))
    }

    /// Caption input, substituting zeros when absent.
    pub fn caption_input(&self, g: &Graph<T>, n: usize, caption: Option<Var>) -> Result<Option<Var>> {
        let d = self.cfg.caption_embed_dim;
        if d == 0 {
            return Ok(None);
        }
        match caption {
            Some(c) => {
                if g.shape(c) != [n, d] {
                    return Err(shape_err(format!("caption {:?}, expected [{n}, {d}]", g.shape(c))));
                }
                Ok(Some(c))
            }
            None => Ok(Some(g.constant(Tensor::zeros(&[n, d])))),
        }
    }

    pub fn check_input(&self, g: &Graph<T>, x: Var, ts: &[usize]) -> Result<usize> {
        let s = g.shape(x);
        let (h, w) = self.cfg.spatial;
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != h || s[3] != w {
            return Err(shape_err(format!(
                "denoiser input {:?}, expected [N, {}, {h}, {w}]",
                s, self.cfg.in_channels
            )));
        }
        if ts.len() != s[0] {
            return Err(shape_err(format!("{} timesteps for batch of {}", ts.len(), s[0])));
        }
        Ok(s[0])
    }

    /// Full forward pass; `residuals` are added to skips and the middle output before decoding.
    pub fn forward(
        &self,
        g: &Graph<T>,
        x: Var,
        ts: &[usize],
        caption: Option<Var>,
        residuals: Option<&ControlResiduals>,
    ) -> Result<Var> {
        let n = self.check_input(g, x, ts)?;
        let temb = self.time_input(g, ts)?;
        let cap = self.caption_input(g, n, caption)?;
        let (mut skips, mut h) = self.encoder.forward(g, &self.store, x, temb, cap)?;
        if let Some(r) = residuals {
            if r.skips.len() != skips.len() {
                return Err(shape_err(format!("{} skip residuals for {} levels", r.skips.len(), skips.len())));
            }
            for (s, &rs) in skips.iter_mut().zip(&r.skips) {
                *s = g.add(*s, rs)?;
            }
            h = g.add(h, r.middle)?;
        }
        for (i, (up, level)) in self.decoder.ups.iter().zip(&self.decoder.levels).enumerate() {
            let skip = skips[self.cfg.depth - 1 - i];
            let u = up.forward(g, &self.store, h)?;
            let cat = g.concat(&[skip, u])?;
            h = level.forward(g, &self.store, cat, temb, cap)?;
        }
        self.decoder.out.forward(g, &self.store, h)
    }
}

impl<T: Float> EpsilonModel<T> for UNet<T> {
    fn image_shape(&self) -> (usize, usize, usize) {
        (self.cfg.out_channels, self.cfg.spatial.0, self.cfg.spatial.1)
    }

    fn predict_eps(&self, g: &Graph<T>, x_t: Var, ts: &[usize], caption: Option<Var>, control: Option<Var>) -> Result<Var> {
        if control.is_some() {
            return Err(Error::InvalidArgument("an ungrafted denoiser takes no control image".into()));
        }
        self.forward(g, x_t, ts, caption, None)
    }
}

/// Predicted ε for one `[C, H, W]` noisy image.
pub fn denoise(unet: &UNet<f32>, x_t: &Tensor<f32>, t: usize, caption: Option<&[f32]>) -> Result<Tensor<f32>> {
    let (c, h, w) = match *x_t.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(shape_err(format!("expected [C,H,W], got {:?}", x_t.shape()))),
    };
    let g = Graph::new();
    let x = g.constant(x_t.clone().reshape(&[1, c, h, w])?);
    let cap = match caption {
        Some(v) => Some(g.constant(Tensor::new(&[1, v.len()], v.to_vec())?)),
        None => None,
    };
    let out = unet.forward(&g, x, &[t], cap, None)?;
    let v = (*g.value(out)).clone();
    let oc = v.shape()[1];
    v.reshape(&[oc, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(depth: usize, base: usize, hw: (usize, usize)) -> UNetConfig {
        UNetConfig {
            in_channels: 3,
            base_channels: base,
            depth,
            out_channels: 3,
            spatial: hw,
            time_embed_dim: 8,
            caption_embed_dim: 4,
        }
    }

    fn rand_input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed, "x");
        Tensor::new(&[n, c, h, w], (0..n * c * h * w).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn channel_law_and_output_shape() {
        let cfg = tiny(2, 8, (32, 32));
        let net = build_unet::<f32>(&cfg, "base/", &mut RngStream::new(0, "u")).unwrap();
        let rec = net.channel_record();
        assert_eq!(rec.down, vec![8, 16]);
        assert_eq!(rec.middle, 32);
        assert_eq!(rec.up, vec![16, 8]);
        let x = Tensor::zeros(&[3, 32, 32]);
        let y = denoise(&net, &x, 5, None).unwrap();
        assert_eq!(y.shape(), &[3, 32, 32]);
    }

    #[test]
    fn rejects_indivisible_spatial() {
        assert!(build_unet::<f32>(&tiny(3, 8, (20, 32)), "b/", &mut RngStream::new(0, "u")).is_err());
        assert!(build_unet::<f32>(&tiny(0, 8, (32, 32)), "b/", &mut RngStream::new(0, "u")).is_err());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = tiny(2, 4, (8, 8));
        let net = build_unet::<f64>(&cfg, "b/", &mut RngStream::new(0, "u")).unwrap();
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let lin = |i: usize, o: usize| o * i + o;
        let level = |i: usize, o: usize| conv(i, o, 3) + conv(o, o, 3) + lin(8, o) + lin(4, o);
        let expected = level(3, 4)
            + level(4, 8)
            + level(8, 16)
            + (16 * 8 * 4 + 8)
            + level(16, 8)
            + (8 * 4 * 4 + 4)
            + level(8, 4)
            + conv(4, 3, 1);
        assert_eq!(net.num_params(), expected);
        assert_eq!(net.store.count_scalars(""), expected);
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let cfg = tiny(2, 4, (8, 8));
        let mut net = build_unet::<f64>(&cfg, "b/", &mut RngStream::new(0, "u")).unwrap();
        let (w, b) = (net.decoder.out.w, net.decoder.out.b);
        net.store.get_mut(w).data_mut().fill(0.0);
        net.store.get_mut(b).data_mut().fill(0.0);
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let y = net.forward(&g, x, &[3], None, None).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let cfg = tiny(2, 4, (8, 8));
        let net = build_unet::<f32>(&cfg, "b/", &mut RngStream::new(1, "u")).unwrap();
        let x = rand_input(1, 3, 8, 8, 2).cast::<f32>().reshape(&[3, 8, 8]).unwrap();
        let cap = [0.1f32, 0.2, 0.3, 0.4];
        assert_eq!(denoise(&net, &x, 9, Some(&cap)).unwrap(), denoise(&net, &x, 9, Some(&cap)).unwrap());
    }

    #[test]
    fn timestep_and_caption_are_wired() {
        let cfg = tiny(2, 4, (8, 8));
        let net = build_unet::<f32>(&cfg, "b/", &mut RngStream::new(1, "u")).unwrap();
        let x = rand_input(1, 3, 8, 8, 3).cast::<f32>().reshape(&[3, 8, 8]).unwrap();
        assert_ne!(denoise(&net, &x, 1, None).unwrap(), denoise(&net, &x, 999, None).unwrap());
        let c1 = [1.0f32, 0.0, 0.0, 0.0];
        let c2 = [0.0f32, 0.0, 1.0, 0.0];
        assert_ne!(denoise(&net, &x, 5, Some(&c1)).unwrap(), denoise(&net, &x, 5, Some(&c2)).unwrap());
    }

    #[test]
    fn skips_are_wired() {
        let cfg = tiny(2, 4, (8, 8));
        let net = build_unet::<f64>(&cfg, "b/", &mut RngStream::new(4, "u")).unwrap();
        let x0 = rand_input(1, 3, 8, 8, 5);
        let run = |ablate: Option<usize>| {
            let g = Graph::new();
            let x = g.constant(x0.clone());
            let temb = net.time_input(&g, &[10]).unwrap();
            let cap = net.caption_input(&g, 1, None).unwrap();
            let (skips, mid) = net.encoder.forward(&g, &net.store, x, temb, cap).unwrap();
            // residual that cancels one skip exactly
            let res: Vec<Var> = skips
                .iter()
                .enumerate()
                .map(|(i, &s)| if Some(i) == ablate { g.neg(s) } else { g.constant(Tensor::zeros(&g.shape(s))) })
                .collect();
            let zm = g.constant(Tensor::zeros(&g.shape(mid)));
            let r = ControlResiduals { skips: res, middle: zm };
            let y = net.forward(&g, x, &[10], None, Some(&r)).unwrap();
            (*g.value(y)).clone()
        };
        let full = run(None);
        for l in 0..2 {
            assert_ne!(full, run(Some(l)), "skip {l} has no effect");
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let cfg = tiny(1, 4, (4, 4));
        let mut net = build_unet::<f64>(&cfg, "b/", &mut RngStream::new(6, "u")).unwrap();
        let x0 = rand_input(2, 3, 4, 4, 7);
        let cap = Tensor::new(&[2, 4], vec![0.5, -0.2, 0.1, 0.0, 0.3, 0.3, -0.4, 0.9]).unwrap();
        let loss_of = |net: &UNet<f64>| {
            let g = Graph::new();
            let x = g.constant(x0.clone());
            let c = g.constant(cap.clone());
            let y = net.forward(&g, x, &[3, 40], Some(c), None).unwrap();
            let l = g.sum(g.square(y));
            (g.scalar_value(l), g, l)
        };
        let (_, g, l) = loss_of(&net);
        let grads = g.backward(l).unwrap().for_store(&net.store);
        let mut checked = 0;
        for (id, grad) in grads.iter() {
            let name = net.store.name(*id).to_string();
            let idx = grad.numel() / 2;
            let an = grad.data()[idx];
            if an.abs() < 1e-6 {
                continue;
            }
            let orig = net.store.get(*id).data()[idx];
            let h = 1e-6;
            net.store.get_mut(*id).data_mut()[idx] = orig + h;
            let up = loss_of(&net).0;
            net.store.get_mut(*id).data_mut()[idx] = orig - h;
            let down = loss_of(&net).0;
            net.store.get_mut(*id).data_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((an - fd).abs() / fd.abs().max(1e-6) < 1e-4, "{name}: {an} vs {fd}");
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn embedding_is_deterministic() {
        assert_eq!(timestep_embedding(17, 9), timestep_embedding(17, 9));
        let e = timestep_embedding(0, 4);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(timestep_embedding(3, 5)[4], 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10))]
        #[test]
        fn output_shape_equals_input_shape(depth in 1usize..4, base in 4usize..7, mh in 1usize..3, mw in 1usize..4) {
            let m = 1 << depth;
            let cfg = tiny(depth, base, (m * mh, m * mw));
            let net = build_unet::<f32>(&cfg, "p/", &mut RngStream::new(0, "p")).unwrap();
            let x = Tensor::zeros(&[3, m * mh, m * mw]);
            let y = denoise(&net, &x, 1, None).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            let rec = net.channel_record();
            for (l, &c) in rec.down.iter().enumerate() {
                prop_assert_eq!(c, base << l);
            }
            prop_assert_eq!(rec.middle, base << depth);
            let mut up = rec.down.clone();
            up.reverse();
            prop_assert_eq!(rec.up, up);
        }
    }
}
