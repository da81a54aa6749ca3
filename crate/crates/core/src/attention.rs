//! Item-conditioned cross-attention: a text item embedding queries the
//! visual patch tokens, producing a text-conditioned visual readout and an
//! attention map over tokens.
//!
//! Two paths share the same kernels. The graph path batches every
//! (text, image) pair of a training step into one fused attention node; the
//! tape-free functions here ([`cross_attend`], [`tcsim`], [`key_tokens`])
//! evaluate a single pair for inference, metrics and test oracles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Linear;
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, AttentionLayout};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Per-head token visibility, `true` = visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    heads: usize,
    tokens: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn all_visible(heads: usize, tokens: usize) -> Self {
        Self {
            heads,
            tokens,
            visible: vec![true; heads * tokens],
        }
    }

    /// Every head sees exactly `tokens_shown`.
    pub fn only(heads: usize, tokens: usize, tokens_shown: &[usize]) -> Result<Self> {
        let mut row = vec![false; tokens];
        for &t in tokens_shown {
            *row.get_mut(t)
                .ok_or_else(|| Error::Shape(format!("token {t} of {tokens}")))? = true;
        }
        Self::from_rows((0..heads).map(|_| row.clone()).collect())
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let heads = rows.len();
        let tokens = rows.first().map_or(0, Vec::len);
        if heads == 0 || tokens == 0 || rows.iter().any(|r| r.len() != tokens) {
            return Err(Error::Shape("mask rows must be non-empty and equal".into()));
        }
        if rows.iter().any(|r| !r.iter().any(|&v| v)) {
            return Err(Error::Precondition("mask head row with no visible token".into()));
        }
        Ok(Self {
            heads,
            tokens,
            visible: rows.concat(),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head(&self, h: usize) -> &[bool] {
        &self.visible[h * self.tokens..(h + 1) * self.tokens]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.visible
    }

    pub fn hidden_count(&self) -> usize {
        self.visible.iter().filter(|v| !**v).count()
    }
}

/// Hides every cell independently with probability `p_mask`. A head row
/// that ends up fully hidden gets one uniformly chosen token back.
pub fn sample_mask(p_mask: f64, tokens: usize, heads: usize, rng: &mut impl Rng) -> Result<AttentionMask> {
    check_p_mask(p_mask)?;
    let mut visible = Vec::with_capacity(heads * tokens);
    for _ in 0..heads {
        let start = visible.len();
        visible.extend((0..tokens).map(|_| !rng.random_bool(p_mask)));
        if !visible[start..].iter().any(|&v| v) {
            let t = rng.random_range(0..tokens);
            visible[start + t] = true;
        }
    }
    Ok(AttentionMask {
        heads,
        tokens,
        visible,
    })
}

/// Same Bernoulli draw as [`sample_mask`], shared by all heads.
pub fn sample_shared_mask(
    p_mask: f64,
    tokens: usize,
    heads: usize,
    rng: &mut impl Rng,
) -> Result<AttentionMask> {
    let one = sample_mask(p_mask, tokens, 1, rng)?;
    Ok(AttentionMask {
        heads,
        tokens,
        visible: one.visible.repeat(heads),
    })
}

fn check_p_mask(p_mask: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p_mask) {
        return Err(Error::Config(format!("p_mask must be in [0, 1), got {p_mask}")));
    }
    Ok(())
}

/// Head-averaged attention distribution over visual tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(pub Vec<f64>);

impl AttentionMap {
    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    /// Total weight on the given tokens.
    pub fn mass(&self, tokens: &[usize]) -> f64 {
        tokens.iter().map(|&t| self.0[t]).sum()
    }
}

/// Indices of the `n` highest scores (lower index wins ties), returned in
/// ascending index order. `n` is clamped to `1..=scores.len()`.
pub fn top_indices(scores: &[f64], n: usize) -> Vec<usize> {
    let n = n.clamp(1, scores.len().max(1)).min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top = order[..n].to_vec();
    top.sort_unstable();
    top
}

/// `ceil(frac * m)`, at least 1.
pub fn key_token_count(frac: f64, m: usize) -> usize {
    ((frac * m as f64).ceil() as usize).clamp(1, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossAttnConfig {
    pub heads: usize,
}

impl Default for CrossAttnConfig {
    fn default() -> Self {
        Self { heads: 8 }
    }
}

/// Query/key/value/output projections of the cross-attention module.
#[derive(Clone, Debug)]
pub struct CrossAttn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Borrowed parameter values for the tape-free path.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnWeights<'a> {
    pub wq: &'a Tensor,
    pub bq: &'a Tensor,
    pub wk: &'a Tensor,
    pub bk: &'a Tensor,
    pub wv: &'a Tensor,
    pub bv: &'a Tensor,
    pub wo: &'a Tensor,
    pub bo: &'a Tensor,
    pub heads: usize,
}

/// Keys and values for a stack of images, `m` rows per image.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedTokens {
    pub keys: Var,
    pub values: Var,
    pub tokens: usize,
}

impl CrossAttn {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        cfg: CrossAttnConfig,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.heads == 0 || dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "cross-attention width {dim} not divisible by {} heads",
                cfg.heads
            )));
        }
        Ok(Self {
            q: Linear::new(store, "cross.q", dim, dim, std, rng),
            k: Linear::new(store, "cross.k", dim, dim, std, rng),
            v: Linear::new(store, "cross.v", dim, dim, std, rng),
            out: Linear::new(store, "cross.out", dim, dim, std, rng),
            heads: cfg.heads,
        })
    }

    pub fn weights<'a>(&self, store: &'a ParamStore) -> CrossAttnWeights<'a> {
        CrossAttnWeights {
            wq: store.get(self.q.weight),
            bq: store.get(self.q.bias),
            wk: store.get(self.k.weight),
            bk: store.get(self.k.bias),
            wv: store.get(self.v.weight),
            bv: store.get(self.v.bias),
            wo: store.get(self.out.weight),
            bo: store.get(self.out.bias),
            heads: self.heads,
        }
    }

    /// Query projection of text embeddings `[n, d]`.
    pub fn queries(&self, g: &mut Graph, store: &ParamStore, texts: Var) -> Result<Var> {
        self.q.forward(g, store, texts)
    }

    pub fn project_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vp: Var,
        tokens: usize,
    ) -> Result<ProjectedTokens> {
        Ok(ProjectedTokens {
            keys: self.k.forward(g, store, vp)?,
            values: self.v.forward(g, store, vp)?,
            tokens,
        })
    }

    /// Readout `z` for each query row against image `images[p]`, under the
    /// optional per-pair masks. Returns `(z, attention node)`.
    pub fn readout(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        tokens: &ProjectedTokens,
        images: Vec<usize>,
        masks: Option<&[AttentionMask]>,
    ) -> Result<(Var, Var)> {
        let mask = match masks {
            None => None,
            Some(ms) => {
                let mut flat = Vec::with_capacity(ms.len() * self.heads * tokens.tokens);
                for m in ms {
                    if m.heads != self.heads || m.tokens != tokens.tokens {
                        return Err(Error::Shape(format!(
                            "mask {}x{} for {} heads over {} tokens",
                            m.heads, m.tokens, self.heads, tokens.tokens
                        )));
                    }
                    flat.extend_from_slice(&m.visible);
                }
                Some(flat)
            }
        };
        let layout = AttentionLayout {
            blocks: images,
            block_len: tokens.tokens,
            heads: self.heads,
            mask,
        };
        let att = g.attention(queries, tokens.keys, tokens.values, layout)?;
        let z = self.out.forward(g, store, att)?;
        Ok((z, att))
    }
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (rows, inputs, outputs) = (x.len() / w.rows(), w.rows(), w.cols());
    let mut out = vec![0.0; rows * outputs];
    kernels::gemm(false, false, rows, inputs, outputs, 1.0, x, w.data(), 0.0, &mut out);
    for row in out.chunks_mut(outputs) {
        for (o, bias) in row.iter_mut().zip(b.data()) {
            *o += bias;
        }
    }
    out
}

/// Precomputed keys and values of one image for repeated tape-free queries.
#[derive(Clone, Debug)]
pub struct TokenCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    tokens: usize,
}

impl TokenCache {
    pub fn new(vp: &Tensor, w: &CrossAttnWeights) -> Result<Self> {
        if vp.cols() != w.wk.rows() || vp.rows() == 0 {
            return Err(Error::Shape(format!(
                "visual tokens {:?} for width {}",
                vp.shape(),
                w.wk.rows()
            )));
        }
        Ok(Self {
            keys: affine(vp.data(), w.wk, w.bk),
            values: affine(vp.data(), w.wv, w.bv),
            tokens: vp.rows(),
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Readout and head-averaged map for one text embedding.
    pub fn attend(
        &self,
        t: &[f64],
        w: &CrossAttnWeights,
        mask: Option<&AttentionMask>,
    ) -> Result<(Vec<f64>, AttentionMap)> {
        if t.len() != w.wq.rows() {
            return Err(Error::Shape(format!("text embedding of width {}", t.len())));
        }
        if let Some(m) = mask {
            if m.heads != w.heads || m.tokens != self.tokens {
                return Err(Error::Shape("mask does not match heads/tokens".into()));
            }
        }
        let q = affine(t, w.wq, w.bq);
        let layout = AttentionLayout {
            blocks: vec![0],
            block_len: self.tokens,
            heads: w.heads,
            mask: mask.map(|m| m.visible.clone()),
        };
        let (o, weights) = kernels::attention_forward(&q, &self.keys, &self.values, q.len(), &layout)?;
        let z = affine(&o, w.wo, w.bo);
        let map = kernels::head_mean(&weights, w.heads, self.tokens).remove(0);
        Ok((z, AttentionMap(map)))
    }

    pub fn tcsim(&self, t: &[f64], w: &CrossAttnWeights, mask: Option<&AttentionMask>) -> Result<f64> {
        let (z, _) = self.attend(t, w, mask)?;
        kernels::cosine_similarity(t, &z)
    }
}

/// Cross-attention of text embedding `t` over visual tokens `vp` (`[m, d]`).
pub fn cross_attend(
    t: &[f64],
    vp: &Tensor,
    w: &CrossAttnWeights,
    mask: Option<&AttentionMask>,
) -> Result<(Vec<f64>, AttentionMap)> {
    TokenCache::new(vp, w)?.attend(t, w, mask)
}

/// Text-conditioned similarity: cosine of `t` with its cross-attention
/// readout over `vp`.
pub fn tcsim(t: &[f64], vp: &Tensor, w: &CrossAttnWeights, mask: Option<&AttentionMask>) -> Result<f64> {
    TokenCache::new(vp, w)?.tcsim(t, w, mask)
}

/// The `ceil(frac * m)` tokens with the highest unmasked attention.
pub fn key_tokens(t: &[f64], vp: &Tensor, w: &CrossAttnWeights, frac: f64) -> Result<Vec<usize>> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Config(format!("key token fraction must be in (0, 1], got {frac}")));
    }
    let (_, map) = cross_attend(t, vp, w, None)?;
    Ok(top_indices(&map.0, key_token_count(frac, vp.rows())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_store(d: usize, heads: usize) -> (ParamStore, CrossAttn) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ca = CrossAttn::new(&mut store, d, CrossAttnConfig { heads }, 0.1, &mut rng).unwrap();
        for lin in [ca.q, ca.k, ca.v, ca.out] {
            *store.get_mut(lin.weight) = Tensor::identity(d);
        }
        (store, ca)
    }

    fn random_store(d: usize, heads: usize, seed: u64) -> (ParamStore, CrossAttn) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ca = CrossAttn::new(&mut store, d, CrossAttnConfig { heads }, 0.5, &mut rng).unwrap();
        for lin in [ca.q, ca.k, ca.v, ca.out] {
            let b = store.get_mut(lin.bias);
            b.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.2..0.2));
        }
        (store, ca)
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn sample_mask_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_mask(0.0, 10, 4, &mut rng).unwrap();
        assert_eq!(m, AttentionMask::all_visible(4, 10));
        for _ in 0..200 {
            let m = sample_mask(0.9, 1, 3, &mut rng).unwrap();
            assert_eq!(m.hidden_count(), 0);
        }
        assert!(matches!(sample_mask(1.0, 4, 2, &mut rng), Err(Error::Config(_))));
        assert!(sample_mask(-0.1, 4, 2, &mut rng).is_err());
    }

    #[test]
    fn shared_mask_repeats_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = sample_shared_mask(0.5, 12, 3, &mut rng).unwrap();
        assert_eq!(m.head(0), m.head(2));
    }

    #[test]
    fn identical_values_give_that_value() {
        let (store, ca) = identity_store(4, 2);
        let w = ca.weights(&store);
        let u = [0.3, -1.0, 2.0, 0.5];
        let vp = Tensor::from_rows(&vec![u.to_vec(); 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = sample_mask(0.5, 5, 2, &mut rng).unwrap();
        let (z, map) = cross_attend(&[1.0, 0.0, 0.0, 1.0], &vp, &w, Some(&mask)).unwrap();
        for (a, b) in z.iter().zip(u) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((map.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // t equal to every row: TCSim is CS(t, t) = 1
        assert!((tcsim(&u, &vp, &w, None).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_visible_token_is_copied() {
        let (store, ca) = identity_store(4, 2);
        let w = ca.weights(&store);
        let vp = random_matrix(6, 4, 9);
        let mask = AttentionMask::only(2, 6, &[3]).unwrap();
        let (z, map) = cross_attend(&[0.2, 0.1, -0.3, 0.4], &vp, &w, Some(&mask)).unwrap();
        for (a, b) in z.iter().zip(vp.row(3)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(map.0[3], 1.0);
    }

    #[test]
    fn map_is_a_distribution_and_mask_degenerates() {
        let (store, ca) = random_store(8, 4, 2);
        let w = ca.weights(&store);
        let vp = random_matrix(7, 8, 1);
        let t = random_matrix(1, 8, 5);
        let (_, map) = cross_attend(t.data(), &vp, &w, None).unwrap();
        assert!((map.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(map.0.iter().all(|&x| x >= 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = sample_mask(0.0, 7, 4, &mut rng).unwrap();
        assert_eq!(
            tcsim(t.data(), &vp, &w, None).unwrap(),
            tcsim(t.data(), &vp, &w, Some(&zero)).unwrap()
        );
    }

    #[test]
    fn hidden_tokens_have_no_influence() {
        let (store, ca) = random_store(8, 2, 3);
        let w = ca.weights(&store);
        let vp = random_matrix(5, 8, 2);
        let t = random_matrix(1, 8, 6);
        let mask = AttentionMask::from_rows(vec![
            vec![true, false, true, true, true],
            vec![true, false, true, false, true],
        ])
        .unwrap();
        let mut perturbed = vp.clone();
        perturbed.data_mut()[8..16].iter_mut().for_each(|x| *x += 3.0);
        let a = cross_attend(t.data(), &vp, &w, Some(&mask)).unwrap();
        let b = cross_attend(t.data(), &perturbed, &w, Some(&mask)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn key_token_selection() {
        assert_eq!(key_token_count(0.05, 1176), 59);
        assert_eq!(key_token_count(0.001, 10), 1);
        // zero keys make attention uniform
        let (mut store, ca) = identity_store(4, 2);
        store.get_mut(ca.k.weight).data_mut().fill(0.0);
        let w = ca.weights(&store);
        let vp = random_matrix(4, 4, 1);
        let t = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(key_tokens(&t, &vp, &w, 0.5).unwrap(), vec![0, 1]);
        assert_eq!(key_tokens(&t, &vp, &w, 1.0).unwrap(), vec![0, 1, 2, 3]);
        assert!(key_tokens(&t, &vp, &w, 0.0).is_err());
    }

    #[test]
    fn key_token_sets_nest() {
        let (store, ca) = random_store(8, 4, 11);
        let w = ca.weights(&store);
        let vp = random_matrix(20, 8, 3);
        let t = random_matrix(1, 8, 4);
        let mut prev: Vec<usize> = Vec::new();
        for k in 1..=20 {
            let cur = key_tokens(t.data(), &vp, &w, k as f64 / 20.0).unwrap();
            assert_eq!(cur.len(), k);
            assert!(prev.iter().all(|i| cur.contains(i)));
            prev = cur;
        }
    }

    #[test]
    fn map_permutes_with_tokens() {
        let (store, ca) = random_store(8, 4, 5);
        let w = ca.weights(&store);
        let vp = random_matrix(6, 8, 8);
        let t = random_matrix(1, 8, 2);
        let perm = [4, 2, 0, 5, 1, 3];
        let permuted = vp.select_rows(&perm);
        let (_, a) = cross_attend(t.data(), &vp, &w, None).unwrap();
        let (_, b) = cross_attend(t.data(), &permuted, &w, None).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            assert!((b.0[r] - a.0[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_readout_matches_single_pair_path() {
        let (store, ca) = random_store(8, 2, 7);
        let w = ca.weights(&store);
        let vp = random_matrix(10, 8, 1); // two images of 5 tokens
        let texts = random_matrix(3, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let masks: Vec<AttentionMask> =
            (0..3).map(|_| sample_mask(0.3, 5, 2, &mut rng).unwrap()).collect();
        let images = vec![1, 0, 1];
        let mut g = Graph::new();
        let tv = g.constant(texts.clone());
        let vv = g.constant(vp.clone());
        let q = ca.queries(&mut g, &store, tv).unwrap();
        let toks = ca.project_tokens(&mut g, &store, vv, 5).unwrap();
        let (z, _) = ca.readout(&mut g, &store, q, &toks, images.clone(), Some(&masks)).unwrap();
        for p in 0..3 {
            let block = vp.row_block(images[p] * 5, 5);
            let (zr, _) = cross_attend(texts.row(p), &block, &w, Some(&masks[p])).unwrap();
            for (a, b) in g.value(z).row(p).iter().zip(&zr) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
