use std::fs;
use std::path::Path;

use proptest::prelude::*;

use sat2street::datasets::{
    generate_scene, load_cvusa_layout, load_split, render_panorama, synthetic_sample, write_synthetic, ResizeContract,
    Split, SyntheticSizes,
};
use sat2street::{Error, ImageTensor, ValueRange};

fn write_png(path: &Path, h: usize, w: usize, level: f32) {
    let img = ImageTensor::new(3, h, w, vec![level; 3 * h * w], ValueRange::Unit).unwrap();
    img.save_png(path).unwrap();
}

/// Three pairs, the second with a caption file.
fn fixture(root: &Path) {
    fs::create_dir_all(root.join("img")).unwrap();
    for (i, stem) in ["a", "b", "c"].iter().enumerate() {
        write_png(&root.join(format!("img/{stem}.png")), 12, 12, i as f32 * 0.3);
        write_png(&root.join(format!("img/{stem}_p.png")), 8, 40, 0.5);
    }
    fs::write(root.join("img/b.txt"), "two trees by a road\nignored\n").unwrap();
    fs::write(root.join("train.csv"), "sat_path,pano_path,caption_path\nimg/a.png,img/a_p.png\nimg/b.png,img/b_p.png,img/b.txt\nimg/c.png,img/c_p.png,\n").unwrap();
}

#[test]
fn empty_csv_yields_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("test.csv"), "").unwrap();
    assert_eq!(load_cvusa_layout(dir.path(), Split::Test, None).unwrap().count(), 0);
    fs::write(dir.path().join("test.csv"), "sat_path,pano_path\n").unwrap();
    assert_eq!(load_cvusa_layout(dir.path(), Split::Test, None).unwrap().count(), 0);
}

#[test]
fn fixture_rows_load_in_order_with_ids_and_captions() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let all: Vec<_> = load_cvusa_layout(dir.path(), Split::Train, None).unwrap().map(Result::unwrap).collect();
    assert_eq!(all.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    assert_eq!(all[1].caption, "two trees by a road");
    assert!(all[0].caption.is_empty() && all[2].caption.is_empty());
    assert_eq!((all[0].panorama.height(), all[0].panorama.width()), (8, 40));

    let first: Vec<_> = load_cvusa_layout(dir.path(), Split::Train, Some(1)).unwrap().map(Result::unwrap).collect();
    assert_eq!(first.len(), 1);
    assert_eq!(first[0], all[0]);

    // Stretch, never crop: 8x40 becomes 4x16, 12x12 becomes 16x16.
    let gan = load_split(dir.path(), Split::Train, None, ResizeContract::gan(16, 4)).unwrap();
    assert_eq!((gan[0].panorama.height(), gan[0].panorama.width()), (4, 16));
    assert_eq!((gan[0].satellite.height(), gan[0].satellite.width()), (16, 16));
    let diff = load_split(dir.path(), Split::Train, None, ResizeContract::diffusion(8)).unwrap();
    assert_eq!((diff[2].panorama.height(), diff[2].panorama.width()), (8, 8));
}

#[test]
fn loader_errors_are_distinct_and_carry_rows() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert!(matches!(load_cvusa_layout(root, Split::Train, None), Err(Error::MissingCsv(_))));

    fixture(root);
    fs::write(root.join("train.csv"), "img/a.png,img/a_p.png\nimg/b.png,img/missing.png\n").unwrap();
    let rows: Vec<_> = load_cvusa_layout(root, Split::Train, None).unwrap().collect();
    assert!(rows[0].is_ok());
    match &rows[1] {
        Err(Error::MissingReferencedFile { row, path }) => {
            assert_eq!(*row, 2);
            assert!(path.ends_with("img/missing.png"));
        }
        other => panic!("{other:?}"),
    }

    fs::write(root.join("train.csv"), "img/a.png,img/a_p.png\n\nimg/b.png\n").unwrap();
    let rows: Vec<_> = load_cvusa_layout(root, Split::Train, None).unwrap().collect();
    assert!(matches!(rows[1], Err(Error::MalformedRow { row: 2, .. })), "{:?}", rows[1]);

    fs::write(root.join("train.csv"), "img/a.png,img/a_p.png,img/b.txt,extra\n").unwrap();
    let rows: Vec<_> = load_cvusa_layout(root, Split::Train, None).unwrap().collect();
    assert!(matches!(rows[0], Err(Error::MalformedRow { row: 1, .. })));
}

#[test]
fn synthetic_writer_is_a_pure_function_of_its_inputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sizes = SyntheticSizes { satellite: 32, pano_height: 16, ..Default::default() };
    write_synthetic(a.path(), 77, 3, 2, sizes).unwrap();
    write_synthetic(b.path(), 77, 3, 2, sizes).unwrap();
    for split in [Split::Train, Split::Test] {
        let la: Vec<_> = load_cvusa_layout(a.path(), split, None).unwrap().map(Result::unwrap).collect();
        let lb: Vec<_> = load_cvusa_layout(b.path(), split, None).unwrap().map(Result::unwrap).collect();
        assert_eq!(la, lb);
        assert_eq!(la.len(), if split == Split::Train { 3 } else { 2 });
        for s in &la {
            assert_eq!(s.panorama.width(), 4 * s.panorama.height());
            assert!(!s.caption.is_empty());
        }
    }
    let c = tempfile::tempdir().unwrap();
    write_synthetic(c.path(), 78, 3, 0, sizes).unwrap();
    let lc: Vec<_> = load_cvusa_layout(c.path(), Split::Train, None).unwrap().map(Result::unwrap).collect();
    let la: Vec<_> = load_cvusa_layout(a.path(), Split::Train, None).unwrap().map(Result::unwrap).collect();
    assert_ne!(lc[0].satellite, la[0].satellite);
}

#[test]
fn render_panorama_rejects_wrong_aspect() {
    let scene = generate_scene(1, 32, 32).unwrap();
    assert!(render_panorama(&scene, 16, 60).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rotation_shifts_panorama_by_a_quarter(seed in any::<u64>(), h in prop::sample::select(vec![8usize, 16, 32])) {
        let scene = generate_scene(seed, 48, 48).unwrap();
        let a = render_panorama(&scene, h, 4 * h).unwrap();
        let b = render_panorama(&scene.rotate90_ccw(), h, 4 * h).unwrap();
        let w = 4 * h;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let shifted = a.tensor().data()[c * h * w + y * w + (x + 3 * h) % w];
                    prop_assert_eq!(b.tensor().data()[c * h * w + y * w + x].to_bits(), shifted.to_bits());
                }
            }
        }
    }

    #[test]
    fn synthetic_samples_are_deterministic(seed in any::<u64>(), index in 0usize..1000) {
        let sizes = SyntheticSizes { satellite: 16, pano_height: 8, ..Default::default() };
        let (s1, g1) = synthetic_sample(seed, Split::Train, index, sizes).unwrap();
        let (s2, g2) = synthetic_sample(seed, Split::Train, index, sizes).unwrap();
        prop_assert_eq!(s1, s2);
        prop_assert_eq!(g1, g2);
    }
}
