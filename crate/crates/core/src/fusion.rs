//! Channel-wise fusion of the two branch panoramas and the fusion generator call.

use crate::adversarial::AdversarialPair;
use crate::error::{shape_err, Error, Result};
use crate::image::{resize_batch, ImageTensor, ResizeMode, ValueRange};
use crate::nn::Tensor;

#[derive(Debug, Clone)]
pub struct FusionInput {
    pub branch1_pano: ImageTensor,
    pub branch2_pano: ImageTensor,
    /// Appended as a third group, resized to the panorama size, when present.
    pub satellite: Option<ImageTensor>,
}

/// `[C, H, W]` stack of symmetric-range channel groups in order `[branch1, branch2, (satellite)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedStack {
    pub data: Tensor<f32>,
    pub groups: usize,
}

impl FusedStack {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Channels `[3 g, 3 g + 3)` as an image.
    pub fn group(&self, g: usize) -> Result<ImageTensor> {
        if g >= self.groups {
            return Err(Error::InvalidArgument(format!("group {g} of {}", self.groups)));
        }
        let (h, w) = (self.data.shape()[1], self.data.shape()[2]);
        let plane = h * w;
        let data = self.data.data()[3 * g * plane..(3 * g + 3) * plane].to_vec();
        ImageTensor::new(3, h, w, data, ValueRange::Symmetric)
    }
}

pub fn fuse_concat(f: &FusionInput) -> Result<FusedStack> {
    let b1 = f.branch1_pano.convert_range(ValueRange::Symmetric);
    let b2 = f.branch2_pano.convert_range(ValueRange::Symmetric);
    if b1.dims() != b2.dims() || b1.channels() != 3 {
        return Err(shape_err(format!("branch panoramas {:?} and {:?} differ", b1.dims(), b2.dims())));
    }
    let (_, h, w) = b1.dims();
    let mut data = Vec::with_capacity(9 * h * w);
    data.extend_from_slice(b1.data());
    data.extend_from_slice(b2.data());
    let mut groups = 2;
    if let Some(sat) = &f.satellite {
        if sat.channels() != 3 {
            return Err(shape_err("fusion satellite must have 3 channels"));
        }
        let s = sat.convert_range(ValueRange::Symmetric).resize(h, w, ResizeMode::Bilinear)?;
        data.extend_from_slice(s.data());
        groups = 3;
    }
    Ok(FusedStack { data: Tensor::new(&[3 * groups, h, w], data)?, groups })
}

/// Batched form: `[N, 3, h, w]` branch outputs (and optional `[N, 3, H', W']` satellites) to `[N, 6 | 9, h, w]`.
pub fn fuse_concat_batch(b1: &Tensor<f32>, b2: &Tensor<f32>, satellite: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
    let (n, c, h, w) = b1.dims4()?;
    if b2.shape() != b1.shape() || c != 3 {
        return Err(shape_err(format!("branch batches {:?} and {:?} differ", b1.shape(), b2.shape())));
    }
    let sat = match satellite {
        Some(s) => {
            if s.dims4()?.0 != n || s.dims4()?.1 != 3 {
                return Err(shape_err(format!("satellite batch {:?}", s.shape())));
            }
            Some(resize_batch(s, h, w, ResizeMode::Bilinear)?)
        }
        None => None,
    };
    let per = 3 * h * w;
    let groups = if sat.is_some() { 3 } else { 2 };
    let mut data = Vec::with_capacity(n * groups * per);
    for i in 0..n {
        data.extend_from_slice(&b1.data()[i * per..(i + 1) * per]);
        data.extend_from_slice(&b2.data()[i * per..(i + 1) * per]);
        if let Some(s) = &sat {
            data.extend_from_slice(&s.data()[i * per..(i + 1) * per]);
        }
    }
    Tensor::new(&[n, 3 * groups, h, w], data)
}

pub fn fusion_generate(pair: &AdversarialPair<f32>, f: &FusionInput) -> Result<ImageTensor> {
    let stack = fuse_concat(f)?;
    if stack.channels() != pair.cfg.in_channels {
        return Err(shape_err(format!(
            "fusion network expects {} channels, input has {}",
            pair.cfg.in_channels,
            stack.channels()
        )));
    }
    let (c, h, w) = (stack.channels(), stack.data.shape()[1], stack.data.shape()[2]);
    let out = pair.generate(&stack.data.reshape(&[1, c, h, w])?)?;
    ImageTensor::from_tensor(&out.batch_item(0)?, ValueRange::Symmetric)
}
