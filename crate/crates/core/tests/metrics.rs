use proptest::prelude::*;

use sat2street::datasets::{synthetic_sample, Split, SyntheticSizes};
use sat2street::metrics::{evaluate_set, frechet_distance, perceptual_distance, psnr, ssim, FeatureEmbedder, MetricReport, DEFAULT_EMBED_SEED};
use sat2street::{ImageTensor, RngStream, ValueRange};

fn unit_image(c: usize, h: usize, w: usize, rng: &mut RngStream) -> ImageTensor {
    ImageTensor::new(c, h, w, (0..c * h * w).map(|_| rng.uniform() as f32).collect(), ValueRange::Unit).unwrap()
}

/// Eight (generated, ground truth) pairs: panoramas of two independently seeded synthetic sets.
fn synthetic_pairs() -> Vec<(ImageTensor, ImageTensor)> {
    let sizes = SyntheticSizes { satellite: 16, pano_height: 16, ..Default::default() };
    (0..8)
        .map(|i| {
            let a = synthetic_sample(11, Split::Test, i, sizes).unwrap().0.panorama;
            let b = synthetic_sample(12, Split::Test, i, sizes).unwrap().0.panorama;
            (a, b)
        })
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn golden_report_is_bit_stable() {
    let report = evaluate_set(&synthetic_pairs(), &FeatureEmbedder::new(DEFAULT_EMBED_SEED)).unwrap();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/report_8_pairs.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(path, serde_json::to_string_pretty(&report).unwrap()).unwrap();
    }
    let golden: MetricReport = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(report.n_pairs, 8);
    for (name, got, want) in [
        ("ssim", report.ssim, golden.ssim),
        ("psnr", report.psnr, golden.psnr),
        ("fid", report.fid, golden.fid),
        ("lpips", report.lpips, golden.lpips),
    ] {
        assert_eq!(got.to_bits(), want.to_bits(), "{name}: {got} vs golden {want}");
    }
    assert_eq!(report.warning, golden.warning);
}

#[test]
fn report_is_invariant_under_pair_permutation() {
    let pairs = synthetic_pairs();
    let emb = FeatureEmbedder::new(DEFAULT_EMBED_SEED);
    let base = evaluate_set(&pairs, &emb).unwrap();
    for k in 0..3u32 {
        let perm = RngStream::new(31, "perm").derive(&k.to_string()).permutation(pairs.len());
        let shuffled: Vec<_> = perm.iter().map(|&i| pairs[i].clone()).collect();
        let r = evaluate_set(&shuffled, &emb).unwrap();
        assert!(close(r.ssim, base.ssim, 1e-12) && close(r.psnr, base.psnr, 1e-12), "{r:?} vs {base:?}");
        assert!(close(r.lpips, base.lpips, 1e-12) && close(r.fid, base.fid, 1e-9), "{r:?} vs {base:?}");
    }
}

#[test]
fn perceptual_distance_grows_with_noise() {
    let mut rng = RngStream::new(41, "base");
    let base = unit_image(3, 32, 32, &mut rng);
    let emb = FeatureEmbedder::new(DEFAULT_EMBED_SEED);
    let noisy = |amp: f64| {
        let mut r = RngStream::new(42, "noise");
        let data = base.tensor().data().iter().map(|&v| (v as f64 + amp * r.uniform_in(-1.0, 1.0)).clamp(0.0, 1.0) as f32).collect();
        ImageTensor::new(3, 32, 32, data, ValueRange::Unit).unwrap()
    };
    let d: Vec<f64> = [0.05, 0.1, 0.2].iter().map(|&a| perceptual_distance(&base, &noisy(a), &emb).unwrap()).collect();
    assert!(d[0] > 0.0 && d[0] < d[1] && d[1] < d[2], "{d:?}");
}

#[test]
fn psnr_of_uniform_offset_is_twenty_db() {
    let a = ImageTensor::new(3, 12, 12, vec![0.4; 3 * 144], ValueRange::Unit).unwrap();
    let b = ImageTensor::new(3, 12, 12, vec![0.5; 3 * 144], ValueRange::Unit).unwrap();
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
}

#[test]
fn frechet_of_a_set_with_itself_is_zero() {
    let mut rng = RngStream::new(43, "f");
    let feats: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
    let d = frechet_distance(&feats, &feats).unwrap();
    assert!(d.abs() < 1e-8, "{d}");
    assert!(frechet_distance(&feats[..5], &feats[..5]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "sym");
        let a = unit_image(3, 16, 16, &mut rng);
        let b = unit_image(3, 16, 16, &mut rng);
        let emb = FeatureEmbedder::new(DEFAULT_EMBED_SEED);
        let s = ssim(&a, &b).unwrap();
        prop_assert_eq!(s.to_bits(), ssim(&b, &a).unwrap().to_bits());
        prop_assert!((-1.0..=1.0).contains(&s) && s < 1.0);
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap().to_bits(), psnr(&b, &a, 1.0).unwrap().to_bits());
        let pab = perceptual_distance(&a, &b, &emb).unwrap();
        prop_assert_eq!(pab.to_bits(), perceptual_distance(&b, &a, &emb).unwrap().to_bits());
        prop_assert!(pab > 0.0);
        prop_assert_eq!(perceptual_distance(&a, &a, &emb).unwrap(), 0.0);
    }
}

#[test]
fn single_pair_report_flags_fid() {
    let pairs = synthetic_pairs();
    let r = evaluate_set(&pairs[..1], &FeatureEmbedder::new(DEFAULT_EMBED_SEED)).unwrap();
    assert_eq!(r.n_pairs, 1);
    assert!(r.all_finite());
    assert!(r.warning.as_deref().is_some_and(|w| w.contains("fid unreliable")), "{r:?}");
    assert!(evaluate_set(&[], &FeatureEmbedder::new(DEFAULT_EMBED_SEED)).is_err());
}
