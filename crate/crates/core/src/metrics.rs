//! Image-quality metrics: SSIM, PSNR, a random-feature Fréchet distance and a
//! perceptual distance over the same fixed embedder.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::nn::{Conv2d, Graph, ParamStore, Tensor};
use crate::rng::RngStream;

pub const PSNR_CAP: f64 = 100.0;

/// Sum in a fixed pairwise-tree order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

fn unit_data(img: &ImageTensor) -> Vec<f64> {
    img.convert_range(ValueRange::Unit).data().iter().map(|&v| v as f64).collect()
}

fn check_same(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err(format!("metric inputs {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor, max_val: f64) -> Result<f64> {
    check_same(a, b)?;
    let (x, y) = (unit_data(a), unit_data(b));
    let sq: Vec<f64> = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).collect();
    let mse = mean(&sq);
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub max_val: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, max_val: 1.0 }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Valid-window Gaussian filter of one plane, separable.
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, t) in taps.iter().enumerate() {
                s += t * p[y * w + x + i];
            }
            rows[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, t) in taps.iter().enumerate() {
                s += t * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, params: &SsimParams) -> Result<f64> {
    check_same(a, b)?;
    let (c, h, w) = a.dims();
    if h < params.window || w < params.window {
        return Err(Error::InvalidArgument(format!("image {h}x{w} smaller than the {0}x{0} SSIM window", params.window)));
    }
    let taps = params.taps();
    let c1 = (params.k1 * params.max_val).powi(2);
    let c2 = (params.k2 * params.max_val).powi(2);
    let (x, y) = (unit_data(a), unit_data(b));
    let plane = h * w;
    let mut per_channel = Vec::with_capacity(c);
    for ch in 0..c {
        let pa = &x[ch * plane..(ch + 1) * plane];
        let pb = &y[ch * plane..(ch + 1) * plane];
        let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
        let mu_a = filter_valid(pa, h, w, &taps);
        let mu_b = filter_valid(pb, h, w, &taps);
        let e_aa = filter_valid(&prod(pa, pa), h, w, &taps);
        let e_bb = filter_valid(&prod(pb, pb), h, w, &taps);
        let e_ab = filter_valid(&prod(pa, pb), h, w, &taps);
        let map: Vec<f64> = (0..mu_a.len())
            .map(|i| {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_aa[i] - ma * ma;
                let vb = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
            })
            .collect();
        per_channel.push(mean(&map));
    }
    Ok(mean(&per_channel))
}

fn moments(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = feats[0].len();
    if feats.iter().any(|f| f.len() != d) {
        return Err(shape_err("feature vectors differ in length"));
    }
    if feats.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature".into()));
    }
    let n = feats.len();
    let mu = DVector::from_iterator(d, (0..d).map(|j| mean(&feats.iter().map(|f| f[j]).collect::<Vec<_>>())));
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let terms: Vec<f64> = feats.iter().map(|f| (f[i] - mu[i]) * (f[j] - mu[j])).collect();
            let v = pairwise_sum(&terms) / (n as f64 - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mu, cov))
}

/// Symmetric PSD square root, clamping negative eigenvalues.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// Squared Fréchet distance between Gaussian fits of two feature sets.
///
/// The cross term uses `Tr((A B)^(1/2)) = Tr((A^(1/2) B A^(1/2))^(1/2))`, which
/// only needs symmetric eigendecompositions.
pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    let d = feats_a.first().or(feats_b.first()).map_or(0, Vec::len);
    let needed = d + 1;
    for set in [feats_a, feats_b] {
        if set.len() < needed.max(2) {
            return Err(Error::InsufficientSamples { needed: needed.max(2), got: set.len() });
        }
    }
    let (mu_a, cov_a) = moments(feats_a)?;
    let (mu_b, cov_b) = moments(feats_b)?;
    let sa = sqrt_psd(&cov_a);
    let m = &sa * &cov_b * &sa;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m).eigenvalues;
    let scale = cov_a.trace().abs().max(cov_b.trace().abs()).max(1.0);
    let mut tr_sqrt = 0.0;
    for &l in eig.iter() {
        if l < -1e-8 * scale {
            return Err(Error::Numerical(format!("covariance product has eigenvalue {l}")));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let diff = (&mu_a - &mu_b).norm_squared();
    let v = diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if !v.is_finite() {
        return Err(Error::Numerical("non-finite Fréchet distance".into()));
    }
    Ok(v.max(0.0))
}

/// Diagonal-covariance form, usable with any sample count; population variances.
pub fn frechet_distance_diagonal(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    if feats_a.is_empty() || feats_b.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let d = feats_a[0].len();
    let stats = |set: &[Vec<f64>], j: usize| {
        let col: Vec<f64> = set.iter().map(|f| f[j]).collect();
        let m = mean(&col);
        let var = mean(&col.iter().map(|v| (v - m) * (v - m)).collect::<Vec<_>>());
        (m, var.sqrt())
    };
    let mut terms = Vec::with_capacity(d);
    for j in 0..d {
        let (ma, sa) = stats(feats_a, j);
        let (mb, sb) = stats(feats_b, j);
        terms.push((ma - mb).powi(2) + (sa - sb).powi(2));
    }
    Ok(pairwise_sum(&terms))
}

/// Fixed random convolution stack; parameters are set once from the seed and never exposed mutably.
#[derive(Debug, Clone)]
pub struct FeatureEmbedder {
    store: ParamStore<f64>,
    convs: Vec<Conv2d>,
    seed: u64,
}

pub const EMBED_WIDTHS: [usize; 4] = [3, 8, 16, 16];
pub const DEFAULT_EMBED_SEED: u64 = 0x5eed_f1d0;

impl FeatureEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = RngStream::new(seed, "embedder");
        let mut store = ParamStore::new();
        let convs = (0..3)
            .map(|i| Conv2d::build(&mut store, &format!("embed/conv{i}"), EMBED_WIDTHS[i], EMBED_WIDTHS[i + 1], 3, 2, 1, &mut rng))
            .collect::<Result<Vec<_>>>()
            .expect("embedder shapes are static");
        Self { store, convs, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn out_dim(&self) -> usize {
        EMBED_WIDTHS[3]
    }

    /// Post-activation feature maps of each layer, `[C, H, W]`.
    pub fn activations(&self, img: &ImageTensor) -> Result<Vec<Tensor<f64>>> {
        if img.channels() != 3 {
            return Err(shape_err("embedder expects RGB input"));
        }
        let (c, h, w) = img.dims();
        let x = img.convert_range(ValueRange::Symmetric).tensor().cast::<f64>().reshape(&[1, c, h, w])?;
        let g = Graph::new();
        let mut v = g.constant(x);
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            v = g.relu(conv.forward(&g, &self.store, v)?);
            let t = (*g.value(v)).clone();
            let s = t.shape().to_vec();
            out.push(t.reshape(&s[1..])?);
        }
        Ok(out)
    }

    /// Global average pool of the last layer.
    pub fn features(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let acts = self.activations(img)?;
        Ok(gap(acts.last().expect("three layers")))
    }
}

fn gap(t: &Tensor<f64>) -> Vec<f64> {
    let c = t.shape()[0];
    let plane = t.numel() / c;
    (0..c).map(|ch| mean(&t.data()[ch * plane..(ch + 1) * plane])).collect()
}

/// Unit-length channel vector at each spatial position; zero vectors stay zero.
fn channel_normalize(t: &Tensor<f64>) -> Vec<f64> {
    let c = t.shape()[0];
    let plane = t.numel() / c;
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..plane {
        let norm = (0..c).map(|ch| d[ch * plane + p].powi(2)).sum::<f64>().sqrt();
        for ch in 0..c {
            out[ch * plane + p] = d[ch * plane + p] / (norm + 1e-10);
        }
    }
    out
}

pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor, embedder: &FeatureEmbedder) -> Result<f64> {
    check_same(a, b)?;
    let (fa, fb) = (embedder.activations(a)?, embedder.activations(b)?);
    let per_layer: Vec<f64> = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            let (nx, ny) = (channel_normalize(x), channel_normalize(y));
            mean(&nx.iter().zip(&ny).map(|(p, q)| (p - q) * (p - q)).collect::<Vec<_>>())
        })
        .collect();
    Ok(pairwise_sum(&per_layer))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub psnr: f64,
    /// Fréchet distance over embedder features (FID-proxy).
    pub fid: f64,
    /// Perceptual distance over embedder activations (LPIPS-proxy).
    pub lpips: f64,
    pub n_pairs: usize,
    /// Set when too few pairs were available for the full-covariance distance.
    pub warning: Option<String>,
}

impl MetricReport {
    pub fn all_finite(&self) -> bool {
        [self.ssim, self.psnr, self.fid, self.lpips].iter().all(|v| v.is_finite())
    }
}

/// Per-pair SSIM, PSNR and perceptual distance averaged; Fréchet distance over pooled features.
pub fn evaluate_set(pairs: &[(ImageTensor, ImageTensor)], embedder: &FeatureEmbedder) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut ssims = Vec::with_capacity(pairs.len());
    let mut psnrs = Vec::with_capacity(pairs.len());
    let mut lps = Vec::with_capacity(pairs.len());
    let mut fg = Vec::with_capacity(pairs.len());
    let mut ft = Vec::with_capacity(pairs.len());
    for (gen, truth) in pairs {
        ssims.push(ssim(gen, truth)?);
        psnrs.push(psnr(gen, truth, 1.0)?);
        lps.push(perceptual_distance(gen, truth, embedder)?);
        fg.push(embedder.features(gen)?);
        ft.push(embedder.features(truth)?);
    }
    let needed = embedder.out_dim() + 1;
    let (fid, warning) = if pairs.len() >= needed {
        (frechet_distance(&fg, &ft)?, None)
    } else {
        log::warn!("{} pairs is below the {needed} needed for a full-covariance Fréchet distance", pairs.len());
        (
            frechet_distance_diagonal(&fg, &ft)?,
            Some(format!("fid unreliable: {} pairs, full covariance needs {needed}; diagonal form used", pairs.len())),
        )
    };
    let report = MetricReport { ssim: mean(&ssims), psnr: mean(&psnrs), fid, lpips: mean(&lps), n_pairs: pairs.len(), warning };
    if !report.all_finite() {
        return Err(Error::Numerical(format!("non-finite metric report {report:?}")));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_img(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = RngStream::new(seed, "m");
        let data = (0..3 * h * w).map(|_| rng.uniform() as f32).collect();
        ImageTensor::new(3, h, w, data, ValueRange::Unit).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = random_img(1, 16, 16);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let base = ImageTensor::filled(3, 16, 16, 0.25, ValueRange::Unit).unwrap();
        let shifted = ImageTensor::filled(3, 16, 16, 0.35, ValueRange::Unit).unwrap();
        // 0.1 is not representable in f32, so 20 dB holds to rounding.
        assert!((psnr(&base, &shifted, 1.0).unwrap() - 20.0).abs() < 1e-5);
        let b = random_img(2, 16, 16);
        let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.data().len() as f64;
        assert!((psnr(&a, &b, 1.0).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_identity_constant_and_symmetry() {
        let a = random_img(3, 20, 24);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let p = ImageTensor::filled(3, 16, 16, 0.5, ValueRange::Unit).unwrap();
        let q = ImageTensor::filled(3, 16, 16, 0.6, ValueRange::Unit).unwrap();
        let mb = 0.6f32 as f64;
        let expect = (2.0 * 0.5 * mb + 1e-4) / (0.25 + mb * mb + 1e-4);
        assert!((ssim(&p, &q).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.98361).abs() < 1e-5);
        let b = random_img(4, 20, 24);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&random_img(5, 10, 30), &random_img(6, 10, 30)).is_err());
    }

    #[test]
    fn frechet_identity_and_diagonal() {
        let mut rng = RngStream::new(9, "f");
        let x: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        assert!(frechet_distance(&x, &x).unwrap().abs() < 1e-8);
        assert!(matches!(frechet_distance(&x[..4], &x), Err(Error::InsufficientSamples { .. })));
        let mut bad = x.clone();
        bad[0][0] = f64::NAN;
        assert!(matches!(frechet_distance(&bad, &x), Err(Error::Numerical(_))));
    }

    #[test]
    fn embedder_is_deterministic_and_perceptual_symmetric() {
        let (e1, e2) = (FeatureEmbedder::new(1), FeatureEmbedder::new(1));
        let a = random_img(7, 32, 32);
        let b = random_img(8, 32, 32);
        assert_eq!(e1.features(&a).unwrap(), e2.features(&a).unwrap());
        assert_eq!(e1.features(&a).unwrap().len(), e1.out_dim());
        assert_eq!(perceptual_distance(&a, &a, &e1).unwrap(), 0.0);
        assert_eq!(perceptual_distance(&a, &b, &e1).unwrap(), perceptual_distance(&b, &a, &e1).unwrap());
        assert!(perceptual_distance(&a, &b, &e1).unwrap() > 0.0);
    }

    #[test]
    fn evaluate_identity_and_small_set_warning() {
        let e = FeatureEmbedder::new(DEFAULT_EMBED_SEED);
        let pairs: Vec<_> = (0..3).map(|i| (random_img(i, 16, 16), random_img(i, 16, 16))).collect();
        let r = evaluate_set(&pairs, &e).unwrap();
        assert_eq!((r.ssim, r.psnr, r.lpips, r.n_pairs), (1.0, PSNR_CAP, 0.0, 3));
        assert!(r.fid.abs() < 1e-12);
        assert!(r.warning.is_some());
        assert!(evaluate_set(&[], &e).is_err());
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(pairwise_sum(&xs), 5050.0);
    }
}
