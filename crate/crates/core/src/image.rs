//! Image carrier type, value-range conversion, resizing and PNG I/O.
//!
//! Models consume [`ValueRange::Symmetric`] images (`[-1, 1]`); metrics consume
//! [`ValueRange::Unit`] images (`[0, 1]`). [`ImageTensor::convert_range`] is the
//! only bridge between them.
//!
//! Resizing convention: bilinear sampling uses half-pixel centers
//! (`align_corners = false`): output pixel `i` samples source coordinate
//! `(i + 0.5) * in / out - 0.5`, clamped to the valid index range. Nearest uses
//! `floor((i + 0.5) * in / out)`. No antialiasing filter is applied.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Symmetric,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// A `[channels, height, width]` image whose every element lies in its declared range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Tensor<f32>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>, range: ValueRange) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(shape_err(format!("image channels must be 1 or 3, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(shape_err("image with zero extent"));
        }
        let data = Tensor::new(&[channels, height, width], data)?;
        let (lo, hi) = range.bounds();
        if let Some(bad) = data.data().iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(Error::Range(format!("element {bad} outside {range:?}")));
        }
        Ok(Self { data, range })
    }

    /// Build from arbitrary reals, clamping into `range` (NaN maps to the midpoint).
    pub fn clamped(channels: usize, height: usize, width: usize, mut data: Vec<f32>, range: ValueRange) -> Result<Self> {
        let (lo, hi) = range.bounds();
        for v in &mut data {
            *v = if v.is_nan() { 0.5 * (lo + hi) } else { v.clamp(lo, hi) };
        }
        Self::new(channels, height, width, data, range)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32, range: ValueRange) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width], range)
    }

    /// Build from a `[C, H, W]` tensor, clamping into range.
    pub fn from_tensor(t: &Tensor<f32>, range: ValueRange) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::clamped(c, h, w, t.data().to_vec(), range),
            _ => Err(shape_err(format!("expected [C,H,W], got {:?}", t.shape()))),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        self.data.data()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Affine map between `[0,1]` and `[-1,1]`.
    pub fn convert_range(&self, target: ValueRange) -> ImageTensor {
        let data = match (self.range, target) {
            (a, b) if a == b => return self.clone(),
            (ValueRange::Unit, ValueRange::Symmetric) => self.data.map(|v| (v * 2.0 - 1.0).clamp(-1.0, 1.0)),
            (ValueRange::Symmetric, ValueRange::Unit) => self.data.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)),
            _ => unreachable!(),
        };
        ImageTensor { data, range: target }
    }

    pub fn resize(&self, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<ImageTensor> {
        let (c, h, w) = self.dims();
        let out = resize_planes(self.data.data(), c, h, w, out_h, out_w, mode)?;
        Self::clamped(c, out_h, out_w, out, self.range)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
        let path = path.as_ref();
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path.to_path_buf())),
            Err(e) => return Err(e.into()),
        };
        let malformed = |reason: String| Error::MalformedPng { path: path.to_path_buf(), reason };
        let mut decoder = png::Decoder::new(BufReader::new(file));
        let header = decoder.read_header_info().map_err(|e| malformed(e.to_string()))?;
        if header.bit_depth != png::BitDepth::Eight {
            return Err(Error::UnsupportedBitDepth { path: path.to_path_buf(), depth: header.bit_depth as u8 });
        }
        if header.color_type == png::ColorType::Indexed {
            decoder.set_transformations(png::Transformations::EXPAND);
        }
        let mut reader = decoder.read_info().map_err(|e| malformed(e.to_string()))?;
        let size = reader.output_buffer_size().ok_or_else(|| malformed("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let frame = reader.next_frame(&mut buf).map_err(|e| malformed(e.to_string()))?;
        let (w, h) = (frame.width as usize, frame.height as usize);
        let (src_ch, out_ch) = match frame.color_type {
            png::ColorType::Rgb => (3, 3),
            png::ColorType::Rgba => (4, 3),
            png::ColorType::Grayscale => (1, 1),
            png::ColorType::GrayscaleAlpha => (2, 1),
            png::ColorType::Indexed => return Err(malformed("palette expansion failed".into())),
        };
        let bytes = &buf[..frame.buffer_size()];
        let mut data = vec![0f32; out_ch * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = &bytes[(y * w + x) * src_ch..];
                for ch in 0..out_ch {
                    data[(ch * h + y) * w + x] = px[ch] as f32 / 255.0;
                }
            }
        }
        Self::new(out_ch, h, w, data, ValueRange::Unit)
    }

    /// Write as 8-bit RGB (or grayscale) PNG. Symmetric images are mapped to unit range first.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let unit = self.convert_range(ValueRange::Unit);
        let (c, h, w) = unit.dims();
        let mut bytes = vec![0u8; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = unit.get(ch, y, x);
                    bytes[(y * w + x) * c + ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        let file = File::create(path.as_ref())?;
        let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        enc.set_color(if c == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer.write_image_data(&bytes).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        Ok(())
    }
}

/// Resize every `[h, w]` plane of a raw buffer holding `planes` planes.
fn resize_planes(
    src: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    mode: ResizeMode,
) -> Result<Vec<f32>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {out_h}x{out_w} must be positive")));
    }
    let mut out = vec![0f32; planes * out_h * out_w];
    match mode {
        ResizeMode::Nearest => {
            let ys: Vec<usize> = (0..out_h).map(|i| nearest_index(i, h, out_h)).collect();
            let xs: Vec<usize> = (0..out_w).map(|j| nearest_index(j, w, out_w)).collect();
            for p in 0..planes {
                for (i, &sy) in ys.iter().enumerate() {
                    for (j, &sx) in xs.iter().enumerate() {
                        out[(p * out_h + i) * out_w + j] = src[(p * h + sy) * w + sx];
                    }
                }
            }
        }
        ResizeMode::Bilinear => {
            let ys: Vec<(usize, usize, f32)> = (0..out_h).map(|i| bilinear_taps(i, h, out_h)).collect();
            let xs: Vec<(usize, usize, f32)> = (0..out_w).map(|j| bilinear_taps(j, w, out_w)).collect();
            for p in 0..planes {
                let plane = &src[p * h * w..(p + 1) * h * w];
                for (i, &(y0, y1, ty)) in ys.iter().enumerate() {
                    for (j, &(x0, x1, tx)) in xs.iter().enumerate() {
                        let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                        let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                        out[(p * out_h + i) * out_w + j] = top * (1.0 - ty) + bot * ty;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Resize an `[N, C, H, W]` tensor of unbounded values with the same conventions as [`ImageTensor::resize`].
pub fn resize_batch(x: &Tensor<f32>, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let out = resize_planes(x.data(), n * c, h, w, out_h, out_w, mode)?;
    Tensor::new(&[n, c, out_h, out_w], out)
}

fn nearest_index(i: usize, n_in: usize, n_out: usize) -> usize {
    let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize;
    s.min(n_in - 1)
}

fn bilinear_taps(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f32) {
    let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, (src - i0 as f64) as f32)
}

/// Stack same-shaped images into an `[N, C, H, W]` batch.
pub fn to_batch(images: &[&ImageTensor]) -> Result<Tensor<f32>> {
    let items: Vec<Tensor<f32>> = images.iter().map(|im| im.tensor().clone()).collect();
    Tensor::stack(&items)
}

/// Split an `[N, C, H, W]` batch into images, clamping into `range`.
pub fn from_batch(batch: &Tensor<f32>, range: ValueRange) -> Result<Vec<ImageTensor>> {
    let (n, ..) = batch.dims4()?;
    (0..n).map(|i| ImageTensor::from_tensor(&batch.batch_item(i)?, range)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn random_unit(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = RngStream::new(seed, "img");
        let data = (0..c * h * w).map(|_| rng.uniform() as f32).collect();
        ImageTensor::new(c, h, w, data, ValueRange::Unit).unwrap()
    }

    #[test]
    fn rejects_bad_channels_and_out_of_range() {
        assert!(ImageTensor::new(2, 2, 2, vec![0.0; 8], ValueRange::Unit).is_err());
        assert!(matches!(
            ImageTensor::new(1, 1, 2, vec![0.0, 1.5], ValueRange::Unit),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn convert_range_endpoints_and_midpoint() {
        let zeros = ImageTensor::filled(3, 2, 2, 0.0, ValueRange::Unit).unwrap();
        assert!(zeros.convert_range(ValueRange::Symmetric).data().iter().all(|&v| v == -1.0));
        let half = ImageTensor::filled(3, 2, 2, 0.5, ValueRange::Unit).unwrap();
        assert!(half.convert_range(ValueRange::Symmetric).data().iter().all(|&v| v == 0.0));
        let x = random_unit(3, 5, 7, 1);
        let back = x.convert_range(ValueRange::Symmetric).convert_range(ValueRange::Unit);
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn resize_constant_stays_constant() {
        let c = ImageTensor::filled(3, 2, 2, 0.3, ValueRange::Unit).unwrap();
        for (h, w) in [(1, 1), (5, 3), (16, 64)] {
            for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
                let r = c.resize(h, w, mode).unwrap();
                assert_eq!(r.dims(), (3, h, w));
                assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn identity_nearest_resize_is_bit_identical() {
        let x = random_unit(3, 6, 9, 2);
        assert_eq!(x.resize(6, 9, ResizeMode::Nearest).unwrap(), x);
    }

    #[test]
    fn bilinear_checkerboard_downsample_gives_block_means() {
        // Hand-computed under half-pixel centers: output (i, j) samples source
        // (2i + 0.5, 2j + 0.5), the exact center of each 2x2 block, so the
        // four taps get weight 1/4 each.
        let mut data = vec![0f32; 16];
        for y in 0..4 {
            for x in 0..4 {
                data[y * 4 + x] = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
            }
        }
        data[0] = 0.2; // break symmetry so blocks differ
        let img = ImageTensor::new(1, 4, 4, data.clone(), ValueRange::Unit).unwrap();
        let r = img.resize(2, 2, ResizeMode::Bilinear).unwrap();
        let block = |by: usize, bx: usize| {
            (data[(2 * by) * 4 + 2 * bx]
                + data[(2 * by) * 4 + 2 * bx + 1]
                + data[(2 * by + 1) * 4 + 2 * bx]
                + data[(2 * by + 1) * 4 + 2 * bx + 1])
                / 4.0
        };
        let expected = [0.3f32, 0.5, 0.5, 0.5];
        for by in 0..2 {
            for bx in 0..2 {
                assert!((block(by, bx) - expected[by * 2 + bx]).abs() < 1e-7);
                assert!((r.get(0, by, bx) - expected[by * 2 + bx]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_rejects_zero_dims() {
        let x = random_unit(1, 4, 4, 3);
        assert!(matches!(x.resize(0, 4, ResizeMode::Bilinear), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let x = random_unit(3, 13, 17, 4);
        x.save_png(&p).unwrap();
        let y = ImageTensor::load_png(&p).unwrap();
        assert_eq!(y.dims(), x.dims());
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
        // second save of already-quantized data is byte-stable
        let p2 = dir.path().join("b.png");
        y.save_png(&p2).unwrap();
        let p3 = dir.path().join("c.png");
        ImageTensor::load_png(&p2).unwrap().save_png(&p3).unwrap();
        assert_eq!(std::fs::read(&p2).unwrap(), std::fs::read(&p3).unwrap());
    }

    #[test]
    fn png_error_kinds() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ImageTensor::load_png(dir.path().join("nope.png")), Err(Error::MissingFile(_))));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"definitely not a png").unwrap();
        assert!(matches!(ImageTensor::load_png(&bad), Err(Error::MalformedPng { .. })));
        let deep = dir.path().join("deep.png");
        {
            let f = File::create(&deep).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(f), 2, 2);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 24]).unwrap();
        }
        assert!(matches!(ImageTensor::load_png(&deep), Err(Error::UnsupportedBitDepth { depth: 16, .. })));
    }

    proptest! {
        #[test]
        fn resize_and_convert_preserve_range(
            seed in 0u64..1000, h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20,
        ) {
            let x = random_unit(3, h, w, seed);
            for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
                let r = x.resize(oh, ow, mode).unwrap();
                prop_assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
                let s = r.convert_range(ValueRange::Symmetric);
                prop_assert!(s.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }
}
