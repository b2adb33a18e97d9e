use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Float;
use crate::error::Result;
use crate::rng::RngStream;

/// Square-kernel convolution with bias. Weight `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add_uniform(format!("{name}/w"), &[out_ch, in_ch, kernel, kernel], fan_in, rng)?;
        let b = store.add_uniform(format!("{name}/b"), &[out_ch], fan_in, rng)?;
        Ok(Self { w, b, in_ch, out_ch, kernel, stride, pad })
    }

    /// 3×3, stride 1, same padding.
    pub fn same3<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Self::build(store, name, in_ch, out_ch, 3, 1, 1, rng)
    }

    pub fn num_params(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// 1×1 convolution whose weights and biases start at exactly zero.
#[derive(Debug, Clone)]
pub struct ZeroConv {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ZeroConv {
    pub fn build<T: Float>(store: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let w = store.add_zeros(format!("{name}/w"), &[out_ch, in_ch, 1, 1])?;
        let b = store.add_zeros(format!("{name}/b"), &[out_ch])?;
        Ok(Self { w, b, in_ch, out_ch })
    }

    pub fn num_params(&self) -> usize {
        self.out_ch * self.in_ch + self.out_ch
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), 1, 0)
    }

    pub fn is_zero<T: Float>(&self, store: &ParamStore<T>) -> bool {
        store.get(self.w).data().iter().chain(store.get(self.b).data()).all(|v| *v == T::zero())
    }
}

/// Transposed convolution with kernel equal to stride, `(sh, sw)` per axis.
#[derive(Debug, Clone)]
pub struct UpConv {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub sh: usize,
    pub sw: usize,
}

impl UpConv {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        sh: usize,
        sw: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let fan_in = in_ch;
        let w = store.add_uniform(format!("{name}/w"), &[in_ch, out_ch, sh, sw], fan_in, rng)?;
        let b = store.add_uniform(format!("{name}/b"), &[out_ch], fan_in, rng)?;
        Ok(Self { w, b, in_ch, out_ch, sh, sw })
    }

    pub fn num_params(&self) -> usize {
        self.in_ch * self.out_ch * self.sh * self.sw + self.out_ch
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.up_conv(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn build<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}/w"), &[out_dim, in_dim], in_dim, rng)?;
        let b = store.add_uniform(format!("{name}/b"), &[out_dim], in_dim, rng)?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }
}
