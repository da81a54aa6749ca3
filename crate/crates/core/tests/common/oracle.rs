//! Pair-by-pair enumeration of every loss term through the single-pair
//! tape-free functions.

use itemclip::attention::{cross_attend, key_tokens, sample_mask, tcsim, AttentionMask};
use itemclip::batching::{Batch, Study};
use itemclip::imageio::Image;
use itemclip::model::{Model, VisualEmbedding};
use itemclip::numerics::{cosine_similarity, Tensor};
use itemclip::objectives::{siglip_pair, LossWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Oracle<'a> {
    model: &'a Model,
    batch: &'a Batch,
    texts: Tensor,
    visual: Vec<VisualEmbedding>,
    tau: f64,
    b: f64,
}

pub struct OracleLosses {
    pub ila: f64,
    pub iis: f64,
    pub mps: f64,
    pub kta: f64,
}

impl<'a> Oracle<'a> {
    pub fn new(model: &'a Model, studies: &[Study], batch: &'a Batch) -> Self {
        let images: Vec<&Image> = batch.studies.iter().map(|&s| &studies[s].image).collect();
        Self {
            model,
            batch,
            texts: model.embed_texts(&batch.texts).unwrap(),
            visual: model.embed_images(&images).unwrap(),
            tau: model.siglip.tau(&model.store),
            b: model.siglip.bias(&model.store),
        }
    }

    fn t(&self, i: usize, j: usize) -> &[f64] {
        self.texts.row(self.batch.item_text[i][j])
    }

    fn neg(&self, k: usize) -> &[f64] {
        self.texts.row(self.batch.negative_text(k))
    }

    fn pair(&self, sim: f64, z: f64) -> f64 {
        siglip_pair(sim, z, self.tau, self.b)
    }

    /// Masks in the order positives (i, j) then negatives (k, i), study by study.
    fn masks(&self, w: &LossWeights, mask_seed: u64) -> Vec<Option<AttentionMask>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let (h, m) = (self.model.cross.heads, self.model.tokens());
        let mut out = Vec::new();
        let n = self.batch.len();
        for i in 0..n {
            let count = self.batch.items[i].len() + (0..n).filter(|&k| self.batch.negative_valid[k][i]).count();
            for _ in 0..count {
                out.push((w.p_mask > 0.0).then(|| sample_mask(w.p_mask, m, h, &mut rng).unwrap()));
            }
        }
        out
    }

    pub fn losses(&self, w: &LossWeights, mask_seed: u64) -> OracleLosses {
        let cw = self.model.cross_weights();
        let masks = self.masks(w, mask_seed);
        let n = self.batch.len();
        let (mut ila, mut iis, mut mps, mut kta) = (0.0, 0.0, 0.0, 0.0);
        let mut p = 0;
        for i in 0..n {
            let vp = &self.visual[i].vp;
            let vg = &self.visual[i].vg;
            let items = self.batch.items[i].len();
            let mut pos = Vec::new();
            for j in 0..items {
                let mask = masks[p].as_ref();
                p += 1;
                let s = tcsim(self.t(i, j), vp, &cw, mask).unwrap();
                pos.push(s);
                let (z, _) = cross_attend(self.t(i, j), vp, &cw, mask).unwrap();
                for k in 0..items {
                    let c = cosine_similarity(self.t(i, k), &z).unwrap();
                    iis += self.pair(c, if k == j { 1.0 } else { -1.0 });
                }
                mps += self.pair(cosine_similarity(self.t(i, j), vg).unwrap(), 1.0);
                let keys = key_tokens(self.t(i, j), vp, &cw, w.key_frac).unwrap();
                let km = AttentionMask::only(cw.heads, vp.rows(), &keys).unwrap();
                kta += self.pair(tcsim(self.t(i, j), vp, &cw, Some(&km)).unwrap(), 1.0);
            }
            let worst = (0..items).fold(0, |b, j| if pos[j] < pos[b] { j } else { b });
            for j in 0..items {
                let weight = if j == worst { w.w_uwp } else { 1.0 };
                ila += weight * self.pair(pos[j], 1.0);
            }
            for k in 0..n {
                if !self.batch.negative_valid[k][i] {
                    continue;
                }
                let mask = masks[p].as_ref();
                p += 1;
                ila += self.pair(tcsim(self.neg(k), vp, &cw, mask).unwrap(), -1.0);
                mps += self.pair(cosine_similarity(self.neg(k), vg).unwrap(), -1.0);
                let keys = key_tokens(self.neg(k), vp, &cw, w.key_frac).unwrap();
                let km = AttentionMask::only(cw.heads, vp.rows(), &keys).unwrap();
                kta += self.pair(tcsim(self.neg(k), vp, &cw, Some(&km)).unwrap(), -1.0);
            }
        }
        let s = -1.0 / n as f64;
        OracleLosses {
            ila: s * ila,
            iis: s * iis,
            mps: s * mps,
            kta: s * kta,
        }
    }

    /// Text-conditioned SigLIP without masking or upweighting.
    pub fn tcs(&self) -> f64 {
        let cw = self.model.cross_weights();
        let n = self.batch.len();
        let mut sum = 0.0;
        for i in 0..n {
            let vp = &self.visual[i].vp;
            for j in 0..self.batch.items[i].len() {
                sum += self.pair(tcsim(self.t(i, j), vp, &cw, None).unwrap(), 1.0);
            }
            for k in (0..n).filter(|&k| self.batch.negative_valid[k][i]) {
                sum += self.pair(tcsim(self.neg(k), vp, &cw, None).unwrap(), -1.0);
            }
        }
        -sum / n as f64
    }
}
