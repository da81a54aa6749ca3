use rand::Rng;

use crate::encoders::{normal_tensor, Block, EncoderConfig, LayerNorm, TokenSeq};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Var};

/// Token embedding, learned positions, `text_layers` blocks and a final
/// layer norm; the item embedding is the output at the start-token slot.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub positions: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    max_len: usize,
    vocab_size: usize,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.dim;
        let token_embedding = store.add(
            "text.token_embedding",
            normal_tensor(rng, &[vocab_size, d], cfg.init_std),
            true,
        );
        let positions = store.add(
            "text.positions",
            normal_tensor(rng, &[cfg.max_len, d], cfg.init_std),
            false,
        );
        let blocks = (0..cfg.text_layers)
            .map(|i| Block::new(store, &format!("text.block{i}"), cfg, rng))
            .collect();
        let ln_final = LayerNorm::new(store, "text.ln_final", d);
        Self {
            token_embedding,
            positions,
            blocks,
            ln_final,
            max_len: cfg.max_len,
            vocab_size,
        }
    }

    /// Encodes equally long token sequences into a `[n, dim]` matrix.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, seqs: &[TokenSeq]) -> Result<Var> {
        let len = seqs.first().map(TokenSeq::len).ok_or_else(|| {
            Error::Precondition("text encoder needs at least one sequence".into())
        })?;
        if len > self.max_len || seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Shape(format!(
                "token sequences must share a length <= {}",
                self.max_len
            )));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut visible = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for (&id, &pad) in s.ids.iter().zip(&s.padding) {
                if id as usize >= self.vocab_size {
                    return Err(Error::Shape(format!("token id {id} outside vocabulary")));
                }
                ids.push(id as usize);
                visible.push(!pad);
            }
        }
        let table = g.param(store, self.token_embedding);
        let mut x = g.gather_rows(table, ids)?;
        let mut pos = g.param(store, self.positions);
        if len < self.max_len {
            pos = g.gather_rows(pos, (0..len).collect())?;
        }
        x = g.add_tiled(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, store, x, len, Some(&visible))?;
        }
        x = self.ln_final.forward(g, store, x)?;
        g.gather_rows(x, (0..seqs.len()).map(|i| i * len).collect())
    }
}
