//! The trainable model: both encoders, the cross-attention module and the
//! shared SigLIP temperature and bias, with all parameters in one store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{CrossAttn, CrossAttnConfig, CrossAttnWeights};
use crate::batching::Batch;
use crate::encoders::{EncoderConfig, TextEncoder, VisualEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::objectives::{SigLip, SigLipConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub cross: CrossAttnConfig,
    pub siglip: SigLipConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.cross.heads == 0 || self.encoder.dim % self.cross.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} cross-attention heads",
                self.encoder.dim, self.cross.heads
            )));
        }
        self.siglip.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub visual: VisualEncoder,
    pub cross: CrossAttn,
    pub siglip: SigLip,
}

/// Graph handles for one training step's encodings.
#[derive(Clone, Copy, Debug)]
pub struct EncodedBatch {
    /// Unique batch texts `[U, d]`, rows ordered as [`Batch::texts`].
    pub texts: Var,
    /// Global embeddings `[B, d]`.
    pub vg: Var,
    /// Patch embeddings `[B * m, d]`.
    pub vp: Var,
    pub tokens: usize,
}

/// Tape-free encodings of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbedding {
    pub vg: Vec<f64>,
    pub vp: Tensor,
}

const EVAL_CHUNK: usize = 32;

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = &cfg.encoder;
        let visual = VisualEncoder::new(&mut store, e, &mut rng);
        let text = TextEncoder::new(&mut store, e, vocab.size(), &mut rng);
        let cross = CrossAttn::new(&mut store, e.dim, cfg.cross, e.init_std, &mut rng)?;
        let siglip = SigLip::new(&mut store, &cfg.siglip);
        Ok(Self {
            cfg,
            vocab,
            store,
            text,
            visual,
            cross,
            siglip,
        })
    }

    pub fn tokens(&self) -> usize {
        self.cfg.encoder.tokens()
    }

    /// Encodes the batch texts and `images` (one per batch study).
    pub fn encode_batch(&self, g: &mut Graph, batch: &Batch, images: &[&Image]) -> Result<EncodedBatch> {
        if images.len() != batch.len() {
            return Err(Error::Shape(format!(
                "{} images for {} studies",
                images.len(),
                batch.len()
            )));
        }
        let texts = self.text.encode(g, &self.store, &batch.tokens)?;
        let (vg, vp) = self.visual.encode(g, &self.store, images)?;
        Ok(EncodedBatch {
            texts,
            vg,
            vp,
            tokens: self.tokens(),
        })
    }

    pub fn cross_weights(&self) -> CrossAttnWeights<'_> {
        self.cross.weights(&self.store)
    }

    /// Text embeddings `[n, d]` without recording gradients for later use.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Tensor> {
        let d = self.cfg.encoder.dim;
        let mut data = Vec::with_capacity(texts.len() * d);
        for chunk in texts.chunks(EVAL_CHUNK) {
            let seqs = chunk
                .iter()
                .map(|t| self.vocab.tokenize(t, self.cfg.encoder.max_len))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let v = self.text.encode(&mut g, &self.store, &seqs)?;
            g.check()?;
            data.extend_from_slice(g.value(v).data());
        }
        Tensor::matrix(texts.len(), d, data)
    }

    pub fn embed_images(&self, images: &[&Image]) -> Result<Vec<VisualEmbedding>> {
        let m = self.tokens();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let (vg, vp) = self.visual.encode(&mut g, &self.store, chunk)?;
            g.check()?;
            for i in 0..chunk.len() {
                out.push(VisualEmbedding {
                    vg: g.value(vg).row(i).to_vec(),
                    vp: g.value(vp).row_block(i * m, m),
                });
            }
        }
        Ok(out)
    }
}
