#![allow(dead_code)]

use std::path::Path;

use styleprompter::checkpoint::{save_checkpoint, CheckpointBundle};
use styleprompter::encoder::EncoderConfig;
use styleprompter::image_io::save_png;
use styleprompter::latent_spaces::{DirectionCatalog, EditDirection};
use styleprompter::models::{ModelConfig, Models};
use styleprompter::training::Dataset;
use styleprompter::Tensor;

pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.generator.output_size = 16;
    cfg.generator.w_dim = 8;
    cfg.generator.z_dim = 8;
    cfg.generator.base_feature_channels = 8;
    cfg.generator.mapping_depth = 2;
    cfg.generator.w_avg_samples = 16;
    cfg.encoder = EncoderConfig {
        image_size: 16,
        patch_size: 2,
        window_size: 4,
        stages: 3,
        stage_depths: vec![1, 1, 1],
        base_channels: 4,
        latent_token_count: 6,
        heads_per_stage: vec![1, 1, 2],
        latent_dim: 8,
        mlp_ratio: 2,
        head_hidden: 8,
    };
    cfg.smart.attn_dim = 4;
    cfg
}

pub fn models() -> Models {
    Models::init(tiny_config(), 5).unwrap()
}

/// Generator samples, quantized to the PNG byte grid.
pub fn images(m: &Models, n: usize) -> Vec<Tensor> {
    Dataset::from_generator(m, n, 9)
        .unwrap()
        .images
        .into_iter()
        .map(|t| {
            let png = styleprompter::image_io::encode_png(&t).unwrap();
            styleprompter::image_io::decode_png(&png).unwrap()
        })
        .collect()
}

pub fn catalog(m: &Models) -> DirectionCatalog {
    let l = m.generator.num_ws();
    let d = m.config.generator.w_dim;
    let smile: Vec<f64> = (0..d).map(|i| (i as f64 * 0.7).sin()).collect();
    let age: Vec<f64> = (0..d).map(|i| (i as f64 * 0.3).cos()).collect();
    DirectionCatalog::try_from(vec![
        EditDirection::from_w("smile", &smile, l).unwrap(),
        EditDirection::from_w("age", &age, l).unwrap(),
    ])
    .unwrap()
}

/// Writes `model.spck`, `a.png`, `b.png` and `dirs.json` into `dir`.
pub fn workspace(dir: &Path) -> Models {
    let m = models();
    save_checkpoint(
        &CheckpointBundle::from_models(&m, Some(5)),
        dir.join("model.spck"),
    )
    .unwrap();
    let imgs = images(&m, 2);
    save_png(&imgs[0], dir.join("a.png")).unwrap();
    save_png(&imgs[1], dir.join("b.png")).unwrap();
    std::fs::write(
        dir.join("dirs.json"),
        serde_json::to_vec(&catalog(&m)).unwrap(),
    )
    .unwrap();
    m
}
