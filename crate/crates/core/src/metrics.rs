//! Zero-shot inference and analysis metrics. Every metric here uses
//! unmasked attention; masking only exists during training.

use std::collections::BTreeSet;

use crate::attention::{top_indices, AttentionMap, AttentionMask, TokenCache};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::model::Model;
use crate::numerics::{cosine_similarity, Tensor};

/// Sorted set of token indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenMask(Vec<usize>);

impl TokenMask {
    pub fn new(tokens: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = tokens.into_iter().collect();
        Self(set.into_iter().collect())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.0.binary_search(&t).is_ok()
    }

    pub fn intersection(&self, other: &TokenMask) -> usize {
        self.0.iter().filter(|&&t| other.contains(t)).count()
    }

    /// Grayscale `grid x grid` image, 255 inside the mask.
    pub fn to_image(&self, grid: usize) -> Image {
        let mut img = Image::new(grid, grid, 1);
        for &t in &self.0 {
            img.data[t] = 255;
        }
        img
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::Format {
                what: "token mask",
                msg: format!("expected 1 channel, found {}", img.channels),
            });
        }
        if let Some(v) = img.data.iter().find(|&&v| v != 0 && v != 255) {
            return Err(Error::Format {
                what: "token mask",
                msg: format!("pixel value {v} is neither 0 nor 255"),
            });
        }
        Ok(Self::new(
            img.data.iter().enumerate().filter(|(_, &v)| v == 255).map(|(i, _)| i),
        ))
    }
}

/// `|a ∩ b| / |a ∪ b|`, with two empty masks scoring 1.
pub fn iou(pred: &TokenMask, gt: &TokenMask) -> f64 {
    let inter = pred.intersection(gt);
    let union = pred.len() + gt.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn miou(pairs: &[(TokenMask, TokenMask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Precondition("mIoU over zero masks".into()));
    }
    Ok(pairs.iter().map(|(p, g)| iou(p, g)).sum::<f64>() / pairs.len() as f64)
}

/// Rank-statistic area under the ROC curve; tied scores count one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Domain("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups, then Mann-Whitney U
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Mean per-class recall over the classes that occur in `labels`.
pub fn balanced_accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape("balanced accuracy needs equal, nonempty inputs".into()));
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let (hit, n) = labels
            .iter()
            .zip(predicted)
            .filter(|(l, _)| **l == c)
            .fold((0usize, 0usize), |(h, n), (_, p)| (h + (*p == c) as usize, n + 1));
        total += hit as f64 / n as f64;
    }
    Ok(total / classes.len() as f64)
}

/// Fraction of queries with a relevant corpus entry among their `k`
/// highest scores (lower index first on ties).
pub fn recall_at_k(scores: &[Vec<f64>], relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    if scores.len() != relevant.len() || scores.is_empty() {
        return Err(Error::Shape("recall needs one relevance list per query".into()));
    }
    let mut hits = 0;
    for (row, rel) in scores.iter().zip(relevant) {
        if k > row.len() {
            return Err(Error::Precondition(format!("k = {k} exceeds corpus size {}", row.len())));
        }
        if top_indices(row, k).iter().any(|c| rel.contains(c)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}

/// Mean over studies of the mean pairwise cosine similarity between the
/// attention maps of a study's items. Studies with fewer than two items are
/// skipped.
pub fn mams(maps: &[Vec<AttentionMap>]) -> Result<f64> {
    let mut total = 0.0;
    let mut studies = 0;
    for study in maps.iter().filter(|s| s.len() >= 2) {
        let mut sum = 0.0;
        let mut pairs = 0;
        for a in 0..study.len() {
            for b in a + 1..study.len() {
                sum += cosine_similarity(study[a].scores(), study[b].scores())?;
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
        studies += 1;
    }
    if studies == 0 {
        return Err(Error::Domain("mAMS needs a study with at least two items".into()));
    }
    Ok(total / studies as f64)
}

/// Mean over studies of the lowest item similarity (not yet scaled by 100).
pub fn mll(tcsims: &[Vec<f64>]) -> Result<f64> {
    if tcsims.is_empty() || tcsims.iter().any(Vec::is_empty) {
        return Err(Error::Precondition("MLL needs at least one item per study".into()));
    }
    let mins = tcsims.iter().map(|s| s.iter().copied().fold(f64::INFINITY, f64::min));
    Ok(mins.sum::<f64>() / tcsims.len() as f64)
}

/// Trained model plus one image, ready for repeated text queries.
pub struct VisualQuery<'a> {
    model: &'a Model,
    cache: TokenCache,
    vp: Tensor,
}

impl<'a> VisualQuery<'a> {
    pub fn new(model: &'a Model, vp: Tensor) -> Result<Self> {
        let cache = TokenCache::new(&vp, &model.cross_weights())?;
        Ok(Self { model, cache, vp })
    }

    pub fn vp(&self) -> &Tensor {
        &self.vp
    }

    /// `(tcsim, attention map)` for an already encoded text.
    pub fn attend(&self, t: &[f64]) -> Result<(f64, AttentionMap)> {
        let w = self.model.cross_weights();
        let (z, map) = self.cache.attend(t, &w, None)?;
        Ok((cosine_similarity(t, &z)?, map))
    }

    /// Similarities restricted to the tokens of `region`.
    pub fn region_tcsim(&self, t: &[f64], region: &TokenMask) -> Result<f64> {
        if region.is_empty() {
            return Err(Error::Precondition("empty region".into()));
        }
        let w = self.model.cross_weights();
        let mask = AttentionMask::only(w.heads, self.cache.tokens(), region.tokens())?;
        self.cache.tcsim(t, &w, Some(&mask))
    }
}

/// `tcsim(prompt_k, vp)` for every class prompt.
pub fn zero_shot_logits(model: &Model, vp: &Tensor, prompts: &[String]) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(Error::Precondition("zero-shot needs at least one prompt".into()));
    }
    let q = VisualQuery::new(model, vp.clone())?;
    let t = model.embed_texts(prompts)?;
    (0..prompts.len()).map(|k| q.attend(t.row(k)).map(|r| r.0)).collect()
}

/// Corpus indices ranked by similarity restricted to `region`, best first,
/// ties in corpus order, at most `top_n` entries.
pub fn region_text_retrieval(
    model: &Model,
    vp: &Tensor,
    region: &TokenMask,
    corpus: &[String],
    top_n: usize,
) -> Result<Vec<(usize, f64)>> {
    let q = VisualQuery::new(model, vp.clone())?;
    let t = model.embed_texts(corpus)?;
    let scores = (0..corpus.len())
        .map(|c| q.region_tcsim(t.row(c), region))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank(&scores, top_n))
}

/// Indices by descending score, ties by lower index, truncated to `top_n`.
pub fn rank(scores: &[f64], top_n: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(top_n);
    order.into_iter().map(|i| (i, scores[i])).collect()
}

/// Top `top_n` tokens of the prompt's unmasked attention map.
pub fn segment(model: &Model, vp: &Tensor, prompt: &str, top_n: usize) -> Result<TokenMask> {
    if top_n == 0 {
        return Err(Error::Precondition("segmentation needs top_n >= 1".into()));
    }
    let q = VisualQuery::new(model, vp.clone())?;
    let t = model.embed_texts(&[prompt.to_string()])?;
    let (_, map) = q.attend(t.row(0))?;
    Ok(segment_map(&map, top_n))
}

pub fn segment_map(map: &AttentionMap, top_n: usize) -> TokenMask {
    TokenMask::new(top_indices(map.scores(), top_n))
}
