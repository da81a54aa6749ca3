//! Batch assembly: item capping, tokenization, one sampled negative item
//! per study and the normal-check validity grid.

use rand::seq::index;
use rand::Rng;

use crate::encoders::{TokenSeq, Vocabulary};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::metrics::TokenMask;

/// One image with its itemized text.
#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub id: String,
    pub image: Image,
    pub items: Vec<String>,
    pub is_normal: bool,
    /// Ground-truth token mask per item (synthetic data only).
    pub masks: Option<Vec<TokenMask>>,
}

/// Items of every study in a step, deduplicated into one text table.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Index of each study in the slice passed to [`assemble_batch`].
    pub studies: Vec<usize>,
    pub items: Vec<Vec<String>>,
    /// Unique item texts of the whole batch, in first-seen order.
    pub texts: Vec<String>,
    pub tokens: Vec<TokenSeq>,
    /// `item_text[i][j]` indexes `texts` for item `j` of study `i`.
    pub item_text: Vec<Vec<usize>>,
    /// 0-based index `r_k` of the sampled negative item of each study.
    pub negative_item: Vec<usize>,
    /// `negative_valid[k][i]`: study `k`'s negative may be paired with study `i`.
    pub negative_valid: Vec<Vec<bool>>,
    pub is_normal: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Text index of study `k`'s sampled negative item.
    pub fn negative_text(&self, k: usize) -> usize {
        self.item_text[k][self.negative_item[k]]
    }
}

/// Self-pairs and normal/normal pairs are never negatives.
pub fn validity_grid(is_normal: &[bool]) -> Vec<Vec<bool>> {
    let n = is_normal.len();
    (0..n)
        .map(|a| (0..n).map(|b| a != b && !(is_normal[a] && is_normal[b])).collect())
        .collect()
}

/// Also invalidates pairs whose negative text is one of the anchor
/// study's own items (a duplicate finding is not a negative). Subsumes the
/// normal check, since normal studies share the normal item.
pub fn exclude_shared_negatives(batch: &mut Batch) {
    for k in 0..batch.len() {
        let t = batch.negative_text(k);
        for i in 0..batch.len() {
            if batch.item_text[i].contains(&t) {
                batch.negative_valid[k][i] = false;
            }
        }
    }
}

/// `max_items` of `n` item indices without replacement, in original order.
pub fn cap_items(n: usize, max_items: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= max_items {
        return (0..n).collect();
    }
    let mut keep = index::sample(rng, n, max_items.max(1)).into_vec();
    keep.sort_unstable();
    keep
}

pub fn assemble_batch(
    studies: &[&Study],
    indices: &[usize],
    vocab: &Vocabulary,
    max_items: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    if max_items == 0 {
        return Err(Error::Config("max_items must be at least 1".into()));
    }
    let mut items = Vec::with_capacity(indices.len());
    let mut texts: Vec<String> = Vec::new();
    let mut tokens = Vec::new();
    let mut item_text = Vec::with_capacity(indices.len());
    for &s in indices {
        let study = studies
            .get(s)
            .ok_or_else(|| Error::Shape(format!("study index {s} of {}", studies.len())))?;
        if study.items.is_empty() {
            return Err(Error::Dataset {
                record: study.id.clone(),
                msg: "study has no items".into(),
            });
        }
        let kept: Vec<String> = cap_items(study.items.len(), max_items, rng)
            .into_iter()
            .map(|j| study.items[j].clone())
            .collect();
        let mut refs = Vec::with_capacity(kept.len());
        for text in &kept {
            let idx = match texts.iter().position(|t| t == text) {
                Some(i) => i,
                None => {
                    tokens.push(vocab.tokenize(text, max_len)?);
                    texts.push(text.clone());
                    texts.len() - 1
                }
            };
            refs.push(idx);
        }
        items.push(kept);
        item_text.push(refs);
    }
    let negative_item = items.iter().map(|it| rng.random_range(0..it.len())).collect();
    let is_normal: Vec<bool> = indices.iter().map(|&s| studies[s].is_normal).collect();
    Ok(Batch {
        studies: indices.to_vec(),
        items,
        texts,
        tokens,
        item_text,
        negative_item,
        negative_valid: validity_grid(&is_normal),
        is_normal,
    })
}

/// With probability `flag_p`, merges `g ~ U[2, min(max_merge, n)]`
/// distinct items into one joined with ". ", placed at the first merged
/// item's position.
pub fn diverse_sample(items: &[String], max_merge: usize, flag_p: f64, rng: &mut impl Rng) -> Result<Vec<String>> {
    if max_merge == 0 {
        return Err(Error::Config("max_merge must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&flag_p) {
        return Err(Error::Config(format!("flag probability {flag_p} outside [0, 1]")));
    }
    let upper = max_merge.min(items.len());
    if upper < 2 || flag_p == 0.0 || !rng.random_bool(flag_p) {
        return Ok(items.to_vec());
    }
    let g = rng.random_range(2..=upper);
    let mut chosen = index::sample(rng, items.len(), g).into_vec();
    chosen.sort_unstable();
    let merged = chosen
        .iter()
        .map(|&j| items[j].as_str())
        .collect::<Vec<_>>()
        .join(". ");
    let mut out = Vec::with_capacity(items.len() - g + 1);
    for (j, item) in items.iter().enumerate() {
        if j == chosen[0] {
            out.push(merged.clone());
        } else if chosen.binary_search(&j).is_err() {
            out.push(item.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn study(id: &str, items: &[&str], normal: bool) -> Study {
        Study {
            id: id.into(),
            image: Image::new(1, 1, 3),
            items: items.iter().map(|s| s.to_string()).collect(),
            is_normal: normal,
            masks: None,
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["a", "red", "blue", "circle", "nothing", "present"])
    }

    #[test]
    fn normal_pairs_are_invalid() {
        let grid = validity_grid(&[true, true, false]);
        assert_eq!(
            grid,
            vec![
                vec![false, false, true],
                vec![false, false, true],
                vec![true, true, false]
            ]
        );
    }

    #[test]
    fn shared_negatives_are_dropped() {
        let a = study("a", &["a red circle", "a blue circle"], false);
        let b = study("b", &["a red circle"], false);
        let c = study("c", &["a blue circle"], false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut batch = assemble_batch(&[&a, &b, &c], &[0, 1, 2], &vocab(), 7, 8, &mut rng).unwrap();
        let before = batch.negative_valid.clone();
        exclude_shared_negatives(&mut batch);
        for k in 0..3 {
            for i in 0..3 {
                let shared = batch.item_text[i].contains(&batch.negative_text(k));
                assert_eq!(batch.negative_valid[k][i], before[k][i] && !shared, "k {k} i {i}");
            }
        }
        // b's only item is also one of a's
        assert!(!batch.negative_valid[1][0]);
    }

    #[test]
    fn capping_keeps_distinct_items() {
        let items: Vec<String> = (0..10).map(|i| format!("item{i}")).collect();
        let refs: Vec<&str> = items.iter().map(String::as_str).collect();
        let s = study("s", &refs, false);
        let t = study("t", &["a red circle"], false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = assemble_batch(&[&s, &t], &[0, 1], &vocab(), 7, 8, &mut rng).unwrap();
        assert_eq!(b.items[0].len(), 7);
        let mut uniq = b.items[0].clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 7);
        assert_eq!(b.items[1], vec!["a red circle"]);
    }

    #[test]
    fn shared_texts_deduplicate() {
        let s = study("s", &["a red circle", "a blue circle"], false);
        let t = study("t", &["a blue circle"], false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = assemble_batch(&[&s, &t], &[0, 1], &vocab(), 7, 8, &mut rng).unwrap();
        assert_eq!(b.texts.len(), 2);
        assert_eq!(b.item_text, vec![vec![0, 1], vec![1]]);
    }

    #[test]
    fn deterministic_and_errors() {
        let s = study("s", &["a red circle", "a blue circle"], false);
        let n = study("n", &["nothing present"], true);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assemble_batch(&[&s, &n], &[0, 1, 0], &vocab(), 7, 8, &mut rng).unwrap()
        };
        assert_eq!(run(5), run(5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(assemble_batch(&[&s], &[], &vocab(), 7, 8, &mut rng).is_err());
        let empty = study("e", &[], false);
        let err = assemble_batch(&[&empty], &[0], &vocab(), 7, 8, &mut rng).unwrap_err();
        assert!(err.to_string().contains('e'));
    }

    #[test]
    fn diverse_sampling_counts() {
        let items: Vec<String> = (0..5).map(|i| format!("i{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(diverse_sample(&items, 3, 0.0, &mut rng).unwrap(), items);
        let mut merged_any = false;
        for _ in 0..200 {
            let out = diverse_sample(&items, 3, 1.0, &mut rng).unwrap();
            let g = items.len() + 1 - out.len();
            assert!((2..=3).contains(&g));
            let m = out.iter().find(|s| s.contains(". ")).unwrap();
            assert_eq!(m.split(". ").count(), g);
            merged_any = true;
        }
        assert!(merged_any);
        let one = vec!["x".to_string()];
        assert_eq!(diverse_sample(&one, 3, 1.0, &mut rng).unwrap(), one);
    }
}
