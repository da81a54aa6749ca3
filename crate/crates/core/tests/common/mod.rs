#![allow(dead_code)]

pub mod fd;
pub mod oracle;

use itemclip::attention::CrossAttnConfig;
use itemclip::batching::{assemble_batch, Batch, Study};
use itemclip::encoders::{EncoderConfig, Vocabulary};
use itemclip::imageio::Image;
use itemclip::model::{Model, ModelConfig};
use itemclip::numerics::Graph;
use itemclip::objectives::{loss_total, LossOutput, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 8] = ["a", "red", "blue", "green", "circle", "square", "nothing", "present"];

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_side: 8,
            patch_side: 4,
            channels: 3,
            dim: 8,
            visual_layers: 1,
            text_layers: 1,
            heads: 2,
            mlp_ratio: 2,
            max_len: 5,
            init_std: 0.3,
        },
        cross: CrossAttnConfig { heads: 2 },
        ..Default::default()
    }
}

pub fn tiny_model(seed: u64) -> Model {
    Model::new(tiny_config(), Vocabulary::from_words(WORDS), seed).unwrap()
}

pub fn random_image(rng: &mut impl Rng, side: usize) -> Image {
    let mut img = Image::new(side, side, 3);
    for v in img.data.iter_mut() {
        *v = rng.random();
    }
    img
}

/// `n` studies with 1-3 distinct items each; studies listed in `normal`
/// carry the single normal item.
pub fn random_studies(n: usize, normal: &[usize], seed: u64) -> Vec<Study> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = [
        "a red circle",
        "a blue square",
        "a green circle",
        "a red square",
        "a blue circle",
    ];
    (0..n)
        .map(|i| {
            let is_normal = normal.contains(&i);
            let items = if is_normal {
                vec!["nothing present".to_string()]
            } else {
                let count = rng.random_range(1..=3);
                rand::seq::index::sample(&mut rng, pool.len(), count)
                    .into_iter()
                    .map(|j| pool[j].to_string())
                    .collect()
            };
            Study {
                id: format!("s{i}"),
                image: random_image(&mut rng, 8),
                items,
                is_normal,
                masks: None,
            }
        })
        .collect()
}

pub fn batch_of(model: &Model, studies: &[Study], seed: u64) -> Batch {
    let refs: Vec<&Study> = studies.iter().collect();
    let idx: Vec<usize> = (0..studies.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assemble_batch(&refs, &idx, &model.vocab, 7, model.cfg.encoder.max_len, &mut rng).unwrap()
}

/// Forward pass of the whole objective with a fixed mask stream.
pub fn forward(model: &Model, studies: &[Study], batch: &Batch, w: &LossWeights, mask_seed: u64) -> (Graph, LossOutput) {
    let mut g = Graph::new();
    let images: Vec<&Image> = batch.studies.iter().map(|&s| &studies[s].image).collect();
    let enc = model.encode_batch(&mut g, batch, &images).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let out = loss_total(&mut g, model, &enc, batch, w, &mut rng).unwrap();
    (g, out)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
