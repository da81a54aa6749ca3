use rand::Rng;

use crate::encoders::{normal_tensor, Block, EncoderConfig, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Splits an image into row-major patches, one row of
/// `patch_side * patch_side * channels` values in `[-1, 1]` per patch.
pub fn patchify(img: &Image, cfg: &EncoderConfig) -> Result<Tensor> {
    if img.width != cfg.image_side || img.height != cfg.image_side || img.channels != cfg.channels {
        return Err(Error::Shape(format!(
            "image {}x{}x{} does not match encoder {}x{}x{}",
            img.width, img.height, img.channels, cfg.image_side, cfg.image_side, cfg.channels
        )));
    }
    let (p, grid) = (cfg.patch_side, cfg.grid_side());
    let mut data = Vec::with_capacity(cfg.tokens() * cfg.patch_pixels());
    for pr in 0..grid {
        for pc in 0..grid {
            for y in 0..p {
                for x in 0..p {
                    for c in 0..img.channels {
                        let v = img.get(pc * p + x, pr * p + y, c) as f64 / 255.0;
                        data.push(2.0 * v - 1.0);
                    }
                }
            }
        }
    }
    Tensor::matrix(cfg.tokens(), cfg.patch_pixels(), data)
}

/// Patch embedding, classification token, learned positions and
/// `visual_layers` pre-norm blocks.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub patch: Linear,
    pub cls: ParamId,
    pub positions: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    cfg: EncoderConfig,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let patch = Linear::new(store, "visual.patch", cfg.patch_pixels(), d, cfg.init_std, rng);
        let cls = store.add("visual.cls", normal_tensor(rng, &[1, d], cfg.init_std), false);
        let positions = store.add(
            "visual.positions",
            normal_tensor(rng, &[cfg.tokens() + 1, d], cfg.init_std),
            false,
        );
        let blocks = (0..cfg.visual_layers)
            .map(|i| Block::new(store, &format!("visual.block{i}"), cfg, rng))
            .collect();
        let ln_final = LayerNorm::new(store, "visual.ln_final", d);
        Self {
            patch,
            cls,
            positions,
            blocks,
            ln_final,
            cfg: cfg.clone(),
        }
    }

    /// Returns `(vg, vp)`: the classification-token outputs `[n, dim]` and
    /// the patch outputs `[n * m, dim]`, image by image in patch order.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, images: &[&Image]) -> Result<(Var, Var)> {
        if images.is_empty() {
            return Err(Error::Precondition("visual encoder needs at least one image".into()));
        }
        let m = self.cfg.tokens();
        let mut pixels = Vec::with_capacity(images.len() * m * self.cfg.patch_pixels());
        for img in images {
            pixels.extend_from_slice(patchify(img, &self.cfg)?.data());
        }
        let x = g.constant(Tensor::matrix(images.len() * m, self.cfg.patch_pixels(), pixels)?);
        let x = self.patch.forward(g, store, x)?;
        let cls = g.param(store, self.cls);
        let mut x = g.insert_cls(x, cls, m)?;
        let pos = g.param(store, self.positions);
        x = g.add_tiled(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, store, x, m + 1, None)?;
        }
        x = self.ln_final.forward(g, store, x)?;
        let n = images.len();
        let vg = g.gather_rows(x, (0..n).map(|i| i * (m + 1)).collect())?;
        let patches = (0..n).flat_map(|i| (0..m).map(move |r| i * (m + 1) + 1 + r)).collect();
        let vp = g.gather_rows(x, patches)?;
        Ok((vg, vp))
    }
}
