//! The training objective: itemized local alignment (ILA), inter-item
//! separation (IIS), multi-positive SigLIP on the global embedding (MPS)
//! and key token alignment (KTA), all built from the single-pair sigmoid
//! term `log sigmoid(z * (tau * k - b))`.
//!
//! Every loss is evaluated as one vectorized pass over a flat list of pair
//! terms. The terms themselves are returned as diagnostics, which lets the
//! tests replay each one through the tape-free [`crate::attention`] path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    key_token_count, sample_mask, sample_shared_mask, top_indices, AttentionMask, ProjectedTokens,
};
use crate::batching::Batch;
use crate::error::{Error, Result};
use crate::model::{EncodedBatch, Model};
use crate::numerics::kernels::{self, AttentionLayout};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureMode {
    /// The stored value is `log tau`.
    Log,
    /// The stored value is `tau` itself.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigLipConfig {
    pub temperature_init: f64,
    pub temperature_mode: TemperatureMode,
    pub bias_init: f64,
}

impl Default for SigLipConfig {
    fn default() -> Self {
        Self {
            temperature_init: 2.659,
            temperature_mode: TemperatureMode::Log,
            bias_init: 10.0,
        }
    }
}

impl SigLipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature_init.is_finite() && self.bias_init.is_finite()) {
            return Err(Error::Config("siglip init values must be finite".into()));
        }
        Ok(())
    }
}

/// Shared trainable temperature and bias.
#[derive(Clone, Copy, Debug)]
pub struct SigLip {
    pub temperature: ParamId,
    pub bias: ParamId,
    pub mode: TemperatureMode,
}

impl SigLip {
    pub fn new(store: &mut ParamStore, cfg: &SigLipConfig) -> Self {
        Self {
            temperature: store.add("siglip.temperature", Tensor::scalar(cfg.temperature_init), false),
            bias: store.add("siglip.bias", Tensor::scalar(cfg.bias_init), false),
            mode: cfg.temperature_mode,
        }
    }

    /// Effective multiplier `tau`.
    pub fn tau(&self, store: &ParamStore) -> f64 {
        let s = store.get(self.temperature).item();
        match self.mode {
            TemperatureMode::Log => s.exp(),
            TemperatureMode::Raw => s,
        }
    }

    pub fn bias(&self, store: &ParamStore) -> f64 {
        store.get(self.bias).item()
    }

    /// `tau * sims - b`, elementwise.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, sims: Var) -> Result<Var> {
        let t = g.param(store, self.temperature);
        let tau = match self.mode {
            TemperatureMode::Log => g.exp(t),
            TemperatureMode::Raw => t,
        };
        let b = g.param(store, self.bias);
        let neg_b = g.scale(b, -1.0);
        let scaled = g.scale_by(sims, tau)?;
        g.shift_by(scaled, neg_b)
    }
}

/// Single-pair term `log sigmoid(z * (tau * k - b))`; losses negate it.
pub fn siglip_pair(k: f64, z: f64, tau: f64, b: f64) -> f64 {
    kernels::log_sigmoid(z * (tau * k - b))
}

/// `w_uwp` at the lowest-index minimum, 1 elsewhere.
pub fn uwp_weights(sims: &[f64], w_uwp: f64) -> Vec<f64> {
    let mut out = vec![1.0; sims.len()];
    let worst = (0..sims.len()).fold(None, |best: Option<usize>, j| match best {
        Some(b) if sims[b] <= sims[j] => Some(b),
        _ => Some(j),
    });
    if let Some(j) = worst {
        out[j] = w_uwp;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ila: f64,
    pub lambda_iis: f64,
    pub lambda_mps: f64,
    pub lambda_kta: f64,
    pub w_uwp: f64,
    pub p_mask: f64,
    /// Key-token fraction `K` for KTA.
    pub key_frac: f64,
    /// One mask row shared by all heads instead of per-head masks.
    pub shared_mask: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ila: 1.0,
            lambda_iis: 1.0,
            lambda_mps: 0.01,
            lambda_kta: 1.0,
            w_uwp: 1.5,
            p_mask: 0.1,
            key_frac: 0.05,
            shared_mask: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_ila, self.lambda_iis, self.lambda_mps, self.lambda_kta];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {lambdas:?}")));
        }
        if !(self.w_uwp.is_finite() && self.w_uwp >= 1.0) {
            return Err(Error::Config(format!("w_uwp must be >= 1, got {}", self.w_uwp)));
        }
        if !(0.0..1.0).contains(&self.p_mask) {
            return Err(Error::Config(format!("p_mask must be in [0, 1), got {}", self.p_mask)));
        }
        if !(self.key_frac > 0.0 && self.key_frac <= 1.0) {
            return Err(Error::Config(format!("key_frac must be in (0, 1], got {}", self.key_frac)));
        }
        Ok(())
    }
}

/// One `(text, visual)` term of a loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTerm {
    /// Batch study providing the visual side.
    pub study: usize,
    /// Row of [`Batch::texts`].
    pub text: usize,
    /// For readout-based losses, the item of `study` whose readout is used.
    pub readout_item: Option<usize>,
    pub sign: f64,
    pub weight: f64,
    pub sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ila: f64,
    pub iis: f64,
    pub mps: f64,
    pub kta: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossDiagnostics {
    pub ila: Vec<PairTerm>,
    /// Per ILA term mask, `None` when `p_mask == 0`.
    pub masks: Option<Vec<AttentionMask>>,
    pub iis: Vec<PairTerm>,
    pub mps: Vec<PairTerm>,
    pub kta: Vec<PairTerm>,
    /// Key tokens of each KTA term.
    pub key_tokens: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub ila: Var,
    pub iis: Var,
    pub mps: Var,
    pub kta: Var,
    pub breakdown: LossBreakdown,
    pub diagnostics: LossDiagnostics,
}

/// Query projections of all batch texts and key/value projections of all
/// patch tokens, shared by every readout of a step.
#[derive(Clone, Copy, Debug)]
pub struct CrossInputs {
    pub queries: Var,
    pub tokens: ProjectedTokens,
}

impl CrossInputs {
    pub fn new(g: &mut Graph, model: &Model, enc: &EncodedBatch) -> Result<Self> {
        Ok(Self {
            queries: model.cross.queries(g, &model.store, enc.texts)?,
            tokens: model.cross.project_tokens(g, &model.store, enc.vp, enc.tokens)?,
        })
    }
}

/// ILA and KTA terms before weighting: every item of every study as a
/// positive, then the valid sampled negatives of the other studies.
pub fn alignment_pairs(batch: &Batch) -> Vec<PairTerm> {
    let mut out = Vec::new();
    for i in 0..batch.len() {
        for (j, &u) in batch.item_text[i].iter().enumerate() {
            out.push(PairTerm {
                study: i,
                text: u,
                readout_item: Some(j),
                sign: 1.0,
                weight: 1.0,
                sim: 0.0,
            });
        }
        for k in 0..batch.len() {
            if batch.negative_valid[k][i] {
                out.push(PairTerm {
                    study: i,
                    text: batch.negative_text(k),
                    readout_item: None,
                    sign: -1.0,
                    weight: 1.0,
                    sim: 0.0,
                });
            }
        }
    }
    out
}

fn require_pairs(batch: &Batch) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::Precondition(format!(
            "alignment losses need at least 2 studies, got {}",
            batch.len()
        )));
    }
    if let Some(i) = batch.items.iter().position(Vec::is_empty) {
        return Err(Error::Precondition(format!("study {i} has no items")));
    }
    Ok(())
}

/// `-(1/|B|) sum_p weight_p * log sigmoid(sign_p * (tau * sim_p - b))`.
fn siglip_loss(g: &mut Graph, model: &Model, sims: Var, terms: &[PairTerm], studies: usize) -> Result<Var> {
    let logits = model.siglip.logits(g, &model.store, sims)?;
    let signs = terms.iter().map(|t| t.sign).collect();
    let signed = g.mul_const(logits, signs)?;
    let ls = g.log_sigmoid(signed);
    let scale = -1.0 / studies as f64;
    g.weighted_sum(ls, terms.iter().map(|t| scale * t.weight).collect())
}

fn fill_sims(g: &Graph, sims: Var, terms: &mut [PairTerm]) {
    for (t, &s) in terms.iter_mut().zip(g.value(sims).data()) {
        t.sim = s;
    }
}

/// Cross-attention readouts for `terms` (text queries over their study's
/// tokens) and the cosine of each readout with its text.
fn readout_sims(
    g: &mut Graph,
    model: &Model,
    enc: &EncodedBatch,
    cross: &CrossInputs,
    terms: &[PairTerm],
    masks: Option<&[AttentionMask]>,
) -> Result<(Var, Var)> {
    let idx: Vec<usize> = terms.iter().map(|t| t.text).collect();
    let q = g.gather_rows(cross.queries, idx.clone())?;
    let images = terms.iter().map(|t| t.study).collect();
    let (z, _) = model
        .cross
        .readout(g, &model.store, q, &cross.tokens, images, masks)?;
    let t = g.gather_rows(enc.texts, idx)?;
    let sims = g.cosine_rows(t, z)?;
    Ok((z, sims))
}

/// Result of [`loss_ila`]; the readouts are reused by [`loss_iis`].
#[derive(Clone, Debug)]
pub struct IlaOutput {
    pub loss: Var,
    pub readouts: Var,
    pub terms: Vec<PairTerm>,
    pub masks: Option<Vec<AttentionMask>>,
}

/// Masked text-conditioned alignment with the worst positive of each study
/// upweighted by `w_uwp`. Masks are drawn from `rng` in term order, one
/// per term; nothing is drawn when `p_mask == 0`.
pub fn loss_ila(
    g: &mut Graph,
    model: &Model,
    enc: &EncodedBatch,
    cross: &CrossInputs,
    batch: &Batch,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<IlaOutput> {
    require_pairs(batch)?;
    let mut terms = alignment_pairs(batch);
    let (h, m) = (model.cross.heads, enc.tokens);
    let masks = if weights.p_mask > 0.0 {
        let sample = |rng: &mut _| {
            if weights.shared_mask {
                sample_shared_mask(weights.p_mask, m, h, rng)
            } else {
                sample_mask(weights.p_mask, m, h, rng)
            }
        };
        Some(terms.iter().map(|_| sample(rng)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let (z, sims) = readout_sims(g, model, enc, cross, &terms, masks.as_deref())?;
    fill_sims(g, sims, &mut terms);
    let mut start = 0;
    while start < terms.len() {
        let i = terms[start].study;
        let n = batch.items[i].len();
        let pos: Vec<f64> = terms[start..start + n].iter().map(|t| t.sim).collect();
        for (t, w) in terms[start..start + n].iter_mut().zip(uwp_weights(&pos, weights.w_uwp)) {
            t.weight = w;
        }
        start += terms[start..].iter().take_while(|t| t.study == i).count();
    }
    let loss = siglip_loss(g, model, sims, &terms, batch.len())?;
    Ok(IlaOutput {
        loss,
        readouts: z,
        terms,
        masks,
    })
}

/// Separation of each item's readout from its sibling items: the readout
/// of item `j` is paired with every item `k` of the same study, positive
/// only when `k == j`.
pub fn loss_iis(g: &mut Graph, model: &Model, enc: &EncodedBatch, batch: &Batch, ila: &IlaOutput) -> Result<(Var, Vec<PairTerm>)> {
    let mut terms = Vec::new();
    let mut rows = Vec::new();
    for (p, t) in ila.terms.iter().enumerate() {
        let Some(j) = t.readout_item else { continue };
        for (k, &u) in batch.item_text[t.study].iter().enumerate() {
            rows.push(p);
            terms.push(PairTerm {
                study: t.study,
                text: u,
                readout_item: Some(j),
                sign: if k == j { 1.0 } else { -1.0 },
                weight: 1.0,
                sim: 0.0,
            });
        }
    }
    let z = g.gather_rows(ila.readouts, rows)?;
    let t = g.gather_rows(enc.texts, terms.iter().map(|t| t.text).collect())?;
    let sims = g.cosine_rows(t, z)?;
    fill_sims(g, sims, &mut terms);
    let loss = siglip_loss(g, model, sims, &terms, batch.len())?;
    Ok((loss, terms))
}

/// Alignment of item texts with the global embedding, using the same
/// positives and sampled negatives as ILA.
pub fn loss_mps(g: &mut Graph, model: &Model, enc: &EncodedBatch, batch: &Batch) -> Result<(Var, Vec<PairTerm>)> {
    require_pairs(batch)?;
    let mut terms = alignment_pairs(batch);
    let t = g.gather_rows(enc.texts, terms.iter().map(|t| t.text).collect())?;
    let v = g.gather_rows(enc.vg, terms.iter().map(|t| t.study).collect())?;
    let sims = g.cosine_rows(t, v)?;
    fill_sims(g, sims, &mut terms);
    let loss = siglip_loss(g, model, sims, &terms, batch.len())?;
    Ok((loss, terms))
}

/// Key tokens of every term: the top `key_frac` of the unmasked,
/// head-averaged attention of the term's text over the term's visual.
pub fn select_key_tokens(
    g: &Graph,
    model: &Model,
    cross: &CrossInputs,
    terms: &[PairTerm],
    key_frac: f64,
) -> Result<Vec<Vec<usize>>> {
    let d = model.cfg.encoder.dim;
    let m = cross.tokens.tokens;
    let idx: Vec<usize> = terms.iter().map(|t| t.text).collect();
    let q = g.value(cross.queries).select_rows(&idx);
    let layout = AttentionLayout {
        blocks: terms.iter().map(|t| t.study).collect(),
        block_len: m,
        heads: model.cross.heads,
        mask: None,
    };
    let (_, w) = kernels::attention_forward(
        q.data(),
        g.value(cross.tokens.keys).data(),
        g.value(cross.tokens.values).data(),
        d,
        &layout,
    )?;
    let n = key_token_count(key_frac, m);
    Ok(kernels::head_mean(&w, model.cross.heads, m)
        .iter()
        .map(|map| top_indices(map, n))
        .collect())
}

/// ILA-structured alignment over key tokens only, without masking or UWP.
pub fn loss_kta(
    g: &mut Graph,
    model: &Model,
    enc: &EncodedBatch,
    cross: &CrossInputs,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<(Var, Vec<PairTerm>, Vec<Vec<usize>>)> {
    require_pairs(batch)?;
    let mut terms = alignment_pairs(batch);
    let keys = select_key_tokens(g, model, cross, &terms, weights.key_frac)?;
    let masks = keys
        .iter()
        .map(|k| AttentionMask::only(model.cross.heads, enc.tokens, k))
        .collect::<Result<Vec<_>>>()?;
    let (_, sims) = readout_sims(g, model, enc, cross, &terms, Some(&masks))?;
    fill_sims(g, sims, &mut terms);
    let loss = siglip_loss(g, model, sims, &terms, batch.len())?;
    Ok((loss, terms, keys))
}

/// `lambda_ila * ila + lambda_iis * iis + lambda_mps * mps + lambda_kta * kta`
/// from one shared encoding of the batch.
pub fn loss_total(
    g: &mut Graph,
    model: &Model,
    enc: &EncodedBatch,
    batch: &Batch,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<LossOutput> {
    weights.validate()?;
    let cross = CrossInputs::new(g, model, enc)?;
    let ila = loss_ila(g, model, enc, &cross, batch, weights, rng)?;
    let (iis, iis_terms) = loss_iis(g, model, enc, batch, &ila)?;
    let (mps, mps_terms) = loss_mps(g, model, enc, batch)?;
    let (kta, kta_terms, key_tokens) = loss_kta(g, model, enc, &cross, batch, weights)?;
    let total = g.lincomb(vec![
        (ila.loss, weights.lambda_ila),
        (iis, weights.lambda_iis),
        (mps, weights.lambda_mps),
        (kta, weights.lambda_kta),
    ])?;
    let breakdown = LossBreakdown {
        ila: g.scalar(ila.loss),
        iis: g.scalar(iis),
        mps: g.scalar(mps),
        kta: g.scalar(kta),
        total: g.scalar(total),
    };
    Ok(LossOutput {
        total,
        ila: ila.loss,
        iis,
        mps,
        kta,
        breakdown,
        diagnostics: LossDiagnostics {
            ila: ila.terms,
            masks: ila.masks,
            iis: iis_terms,
            mps: mps_terms,
            kta: kta_terms,
            key_tokens,
        },
    })
}
