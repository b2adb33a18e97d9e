#![allow(dead_code)]

use std::path::Path;

use sat2street::datasets::{write_synthetic, SyntheticSizes};
use sat2street::pipeline::{Checkpoint, PipelineConfig};

/// Smallest configuration that exercises every stage in well under a second per stage.
pub fn tiny_config(data_root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    for kv in [
        "sizes.diffusion=16",
        "sizes.pano_height=16",
        "sizes.satellite=16",
        "schedule.steps=20",
        "schedule.ddim_steps=3",
        "unet.base_channels=4",
        "unet.depth=2",
        "unet.time_embed_dim=8",
        "unet.caption_embed_dim=8",
        "gan.base_channels=4",
        "stage1.pretrain_epochs=2",
        "stage1.epochs=2",
        "stage1.batch=2",
        "stage2.epochs=2",
        "stage2.batch=2",
        "stage3.epochs=2",
        "stage3.batch=2",
        "stage4.epochs=2",
        "stage4.batch=2",
    ] {
        cfg.apply_override(kv).unwrap();
    }
    cfg.data_root = data_root.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

pub fn tiny_dataset(cfg: &PipelineConfig, train: usize, test: usize) {
    let sizes = SyntheticSizes { satellite: cfg.satellite_size, pano_height: cfg.pano_height, ..Default::default() };
    write_synthetic(&cfg.data_root, cfg.seed, train, test, sizes).unwrap();
}

/// Names of arrays whose bits differ, plus any present in only one checkpoint.
pub fn differing_arrays(a: &Checkpoint, b: &Checkpoint) -> Vec<String> {
    let mut out: Vec<String> = a
        .arrays
        .iter()
        .filter(|(k, v)| {
            !b.arrays.get(*k).is_some_and(|w| {
                v.shape() == w.shape() && v.data().iter().zip(w.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
        })
        .map(|(k, _)| k.clone())
        .collect();
    out.extend(b.arrays.keys().filter(|k| !a.arrays.contains_key(*k)).cloned());
    out
}
