//! Toy transformer encoders: a patch-based visual encoder with a
//! classification token and a token-level text encoder pooled at the start
//! token. Both produce `dim`-wide outputs that are compared with cosine
//! similarity downstream, so neither applies L2 normalization.

mod text;
mod visual;
pub mod vocab;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AttentionLayout, Graph, ParamId, ParamStore, Tensor, Var};

pub use text::TextEncoder;
pub use visual::{patchify, VisualEncoder};
pub use vocab::{TokenSeq, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub dim: usize,
    pub visual_layers: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            patch_side: 8,
            channels: 3,
            dim: 128,
            visual_layers: 2,
            text_layers: 2,
            heads: 4,
            mlp_ratio: 2,
            max_len: 16,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Visual token count `m`.
    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.max_len < 2 || self.mlp_ratio == 0 || self.channels == 0 {
            return Err(Error::Config("max_len >= 2, mlp_ratio >= 1, channels >= 1".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[inputs, outputs], std),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), false);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::vector(vec![1.0; dim]),
            false,
        );
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (d, std) = (cfg.dim, cfg.init_std);
        let hidden = d * cfg.mlp_ratio;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            q: Linear::new(store, &format!("{name}.attn.q"), d, d, std, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), d, d, std, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), d, d, std, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), d, d, std, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, hidden, std, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, d, std, rng),
            heads: cfg.heads,
        }
    }

    /// Self-attention within consecutive groups of `seq_len` rows.
    /// `key_visible` (one flag per row of `x`) hides keys such as padding.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        seq_len: usize,
        key_visible: Option<&[bool]>,
    ) -> Result<Var> {
        let rows = g.value(x).rows();
        let h = self.ln1.forward(g, store, x)?;
        let q = self.q.forward(g, store, h)?;
        let k = self.k.forward(g, store, h)?;
        let v = self.v.forward(g, store, h)?;
        let mask = key_visible.map(|vis| {
            let mut m = Vec::with_capacity(rows * self.heads * seq_len);
            for p in 0..rows {
                let group = &vis[(p / seq_len) * seq_len..(p / seq_len + 1) * seq_len];
                for _ in 0..self.heads {
                    m.extend_from_slice(group);
                }
            }
            m
        });
        let layout = AttentionLayout {
            blocks: (0..rows).map(|p| p / seq_len).collect(),
            block_len: seq_len,
            heads: self.heads,
            mask,
        };
        let a = g.attention(q, k, v, layout)?;
        let a = self.out.forward(g, store, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }
}
