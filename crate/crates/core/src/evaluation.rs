//! Held-out evaluation suite behind `itemclip eval`.

use std::collections::HashMap;
use std::thread;

use crate::attention::AttentionMap;
use crate::batching::Study;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::metrics::{
    balanced_accuracy, iou, mams, mll, rank, recall_at_k, roc_auc, segment_map, TokenMask, VisualQuery,
};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::synthdata::{item_text, parse_item, Color, RenderConfig, ShapeKind, NORMAL_ITEM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    ZeroShot,
    Retrieval,
    Mams,
    Mll,
    Segmentation,
    Region,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Self::ZeroShot,
        Self::Retrieval,
        Self::Mams,
        Self::Mll,
        Self::Segmentation,
        Self::Region,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Self::ZeroShot => "zs",
            Self::Retrieval => "retrieval",
            Self::Mams => "mams",
            Self::Mll => "mll",
            Self::Segmentation => "seg",
            Self::Region => "region",
        }
    }

    /// Comma-separated task tokens; unknown tokens are a config error that
    /// lists the valid ones.
    pub fn parse_list(s: &str) -> Result<Vec<Task>> {
        let mut out = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let task = Self::ALL.into_iter().find(|t| t.token() == tok).ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|t| t.token()).collect();
                Error::Config(format!("unknown task `{tok}`; valid tasks: {}", valid.join(",")))
            })?;
            if !out.contains(&task) {
                out.push(task);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no evaluation task given".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub value: f64,
    pub n: usize,
}

impl MetricRow {
    fn new(name: impl Into<String>, value: f64, n: usize) -> Self {
        Self {
            name: name.into(),
            value,
            n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub tasks: Vec<Task>,
    pub threads: usize,
    /// Tokens per predicted segmentation mask.
    pub seg_top_n: usize,
    pub render: RenderConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tasks: Task::ALL.to_vec(),
            threads: 1,
            seg_top_n: 4,
            render: RenderConfig::default(),
        }
    }
}

/// The 16 shape prompts followed by the normal item.
pub fn template_corpus() -> Vec<String> {
    let mut out: Vec<String> = Color::ALL
        .into_iter()
        .flat_map(|c| ShapeKind::ALL.into_iter().map(move |s| item_text(c, s)))
        .collect();
    out.push(NORMAL_ITEM.to_string());
    out
}

/// Everything the metrics need from one study.
struct StudyView {
    /// tcsim and map of each item.
    items: Vec<(f64, AttentionMap)>,
    /// tcsim of every corpus text.
    corpus: Vec<f64>,
    /// Corpus tcsim restricted to each item's ground-truth mask.
    region_corpus: Vec<Vec<f64>>,
}

struct Texts {
    index: HashMap<String, usize>,
    emb: Tensor,
}

impl Texts {
    fn row(&self, s: &str) -> &[f64] {
        self.emb.row(self.index[s])
    }
}

pub fn evaluate(model: &Model, studies: &[Study], opts: &EvalOptions) -> Result<Vec<MetricRow>> {
    if studies.is_empty() {
        return Err(Error::Precondition("no studies to evaluate".into()));
    }
    if opts.render.grid_side() != model.cfg.encoder.grid_side() {
        return Err(Error::Config("region grid does not match the model's token grid".into()));
    }
    let m = model.tokens();
    for s in studies {
        if s.masks.iter().flatten().any(|mask| mask.tokens().iter().any(|&t| t >= m)) {
            return Err(Error::Dataset {
                record: s.id.clone(),
                msg: format!("mask token outside the model's {m}-token grid"),
            });
        }
    }
    let corpus = template_corpus();
    let mut all: Vec<String> = corpus.clone();
    for s in studies {
        for it in &s.items {
            if !all.contains(it) {
                all.push(it.clone());
            }
        }
    }
    let texts = Texts {
        index: all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
        emb: model.embed_texts(&all)?,
    };
    let need_regions = opts.tasks.contains(&Task::Region);
    let views = analyze(model, studies, &texts, &corpus, need_regions, opts.threads.max(1))?;
    let mut rows = Vec::new();
    for task in &opts.tasks {
        match task {
            Task::ZeroShot => zero_shot(studies, &views, &corpus, &mut rows)?,
            Task::Retrieval => retrieval(studies, &views, &corpus, &mut rows)?,
            Task::Mams => {
                let maps: Vec<Vec<AttentionMap>> =
                    views.iter().map(|v| v.items.iter().map(|(_, m)| m.clone()).collect()).collect();
                let n = maps.iter().filter(|m| m.len() >= 2).count();
                rows.push(MetricRow::new("mams", mams(&maps)?, n));
            }
            Task::Mll => {
                let sims: Vec<Vec<f64>> = views.iter().map(|v| v.items.iter().map(|(s, _)| *s).collect()).collect();
                let v = mll(&sims)?;
                rows.push(MetricRow::new("mll", 100.0 * v, sims.len()));
            }
            Task::Segmentation => {
                let mut ious = Vec::new();
                for (s, v) in studies.iter().zip(&views) {
                    for (gt, (_, map)) in s.masks.iter().flatten().zip(&v.items) {
                        ious.push(iou(&segment_map(map, opts.seg_top_n), gt));
                    }
                }
                push_mean(&mut rows, "seg.miou", &ious)?;
            }
            Task::Region => {
                let (mut mass, mut top1) = (Vec::new(), Vec::new());
                for (s, v) in studies.iter().zip(&views) {
                    for (j, gt) in s.masks.iter().flatten().enumerate() {
                        let Some(&t0) = gt.tokens().first() else { continue };
                        let region = opts.render.region_tokens(opts.render.region_of_token(t0));
                        mass.push(v.items[j].1.mass(&region));
                        let ranked = rank(&v.region_corpus[j], 1);
                        top1.push((corpus[ranked[0].0] == s.items[j]) as u8 as f64);
                    }
                }
                push_mean(&mut rows, "region.mass", &mass)?;
                push_mean(&mut rows, "region.retrieval_top1", &top1)?;
            }
        }
    }
    Ok(rows)
}

fn push_mean(rows: &mut Vec<MetricRow>, name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Precondition(format!("{name}: no qualifying items")));
    }
    rows.push(MetricRow::new(name, v.iter().sum::<f64>() / v.len() as f64, v.len()));
    Ok(())
}

/// Per-study attention analysis, fanned out over `threads` workers in
/// contiguous chunks so the result order never depends on scheduling.
fn analyze(
    model: &Model,
    studies: &[Study],
    texts: &Texts,
    corpus: &[String],
    regions: bool,
    threads: usize,
) -> Result<Vec<StudyView>> {
    let one = |s: &Study| -> Result<StudyView> {
        let emb = model.embed_images(&[&s.image])?.remove(0);
        let q = VisualQuery::new(model, emb.vp)?;
        let items = s.items.iter().map(|it| q.attend(texts.row(it))).collect::<Result<Vec<_>>>()?;
        let corpus_sims = corpus
            .iter()
            .map(|c| q.attend(texts.row(c)).map(|r| r.0))
            .collect::<Result<Vec<_>>>()?;
        let region_corpus = if regions {
            s.masks
                .iter()
                .flatten()
                .map(|gt| corpus.iter().map(|c| q.region_tcsim(texts.row(c), gt)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(StudyView {
            items,
            corpus: corpus_sims,
            region_corpus,
        })
    };
    let chunk = studies.len().div_ceil(threads);
    let parts: Vec<Result<Vec<StudyView>>> = thread::scope(|scope| {
        let handles: Vec<_> = studies
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(studies.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Shape classification of every held-out item whose color is unique in
/// its study: the four prompts "a {color} {shape}" share the item's color.
fn zero_shot(studies: &[Study], views: &[StudyView], corpus: &[String], rows: &mut Vec<MetricRow>) -> Result<()> {
    let shapes = ShapeKind::ALL;
    let mut logits: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (s, v) in studies.iter().zip(views) {
        let parsed: Vec<(Color, ShapeKind)> = s.items.iter().filter_map(|i| parse_item(i)).collect();
        for &(c, shape) in &parsed {
            if parsed.iter().filter(|(c2, _)| *c2 == c).count() > 1 {
                continue;
            }
            let row = shapes
                .iter()
                .map(|&sh| {
                    let p = item_text(c, sh);
                    v.corpus[corpus.iter().position(|x| *x == p).expect("template")]
                })
                .collect();
            logits.push(row);
            labels.push(shapes.iter().position(|&x| x == shape).expect("shape"));
        }
    }
    if logits.is_empty() {
        return Err(Error::Precondition("zero-shot: no qualifying items".into()));
    }
    let n = logits.len();
    let predicted: Vec<usize> = logits.iter().map(|l| rank(l, 1)[0].0).collect();
    rows.push(MetricRow::new("zs.balanced_accuracy", balanced_accuracy(&predicted, &labels)?, n));
    let (mut aucs, mut baccs) = (Vec::new(), Vec::new());
    for (k, shape) in shapes.iter().enumerate() {
        let scores: Vec<f64> = logits.iter().map(|l| l[k]).collect();
        let truth: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        // a shape absent from the held-out items leaves both undefined
        let (auc, bacc) = match roc_auc(&scores, &truth) {
            Ok(auc) => {
                let pred: Vec<usize> = scores.iter().map(|&s| (s > 0.0) as usize).collect();
                (auc, balanced_accuracy(&pred, &truth.iter().map(|&t| t as usize).collect::<Vec<_>>())?)
            }
            Err(Error::Domain(_)) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        rows.push(MetricRow::new(format!("zs.auc.{}", shape.name()), auc, n));
        rows.push(MetricRow::new(format!("zs.bacc.{}", shape.name()), bacc, n));
        aucs.push(auc);
        baccs.push(bacc);
    }
    let defined_mean = |v: &[f64]| {
        let d: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
        d.iter().sum::<f64>() / d.len() as f64
    };
    rows.push(MetricRow::new("zs.auc_macro", defined_mean(&aucs), n));
    rows.push(MetricRow::new("zs.bacc_macro", defined_mean(&baccs), n));
    Ok(())
}

/// Image-to-text recall over the template corpus and text-to-image recall
/// over the held-out images.
fn retrieval(studies: &[Study], views: &[StudyView], corpus: &[String], rows: &mut Vec<MetricRow>) -> Result<()> {
    let scores: Vec<Vec<f64>> = views.iter().map(|v| v.corpus.clone()).collect();
    let relevant: Vec<Vec<usize>> = studies
        .iter()
        .map(|s| s.items.iter().filter_map(|i| corpus.iter().position(|c| c == i)).collect())
        .collect();
    for k in [1, 5] {
        rows.push(MetricRow::new(format!("retrieval.i2t@{k}"), recall_at_k(&scores, &relevant, k)?, scores.len()));
    }
    let mut t_scores = Vec::new();
    let mut t_relevant = Vec::new();
    for (c, _) in corpus.iter().enumerate() {
        let rel: Vec<usize> = (0..studies.len()).filter(|&i| relevant[i].contains(&c)).collect();
        if rel.is_empty() {
            continue;
        }
        t_scores.push(views.iter().map(|v| v.corpus[c]).collect::<Vec<f64>>());
        t_relevant.push(rel);
    }
    for k in [1, 5] {
        if k <= studies.len() {
            rows.push(MetricRow::new(
                format!("retrieval.t2i@{k}"),
                recall_at_k(&t_scores, &t_relevant, k)?,
                t_scores.len(),
            ));
        }
    }
    Ok(())
}

/// Attention heatmap of `map` (one value per token) upsampled to
/// `side x side` pixels, min-max scaled to 0..=255.
pub fn heatmap(map: &AttentionMap, grid: usize, side: usize) -> Image {
    let s = map.scores();
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cell = side / grid;
    let mut img = Image::new(side, side, 1);
    for y in 0..side {
        for x in 0..side {
            let v = s[(y / cell) * grid + x / cell];
            let scaled = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            img.set(x, y, 0, (scaled * 255.0).round() as u8);
        }
    }
    img
}

/// Source image blended at one half with the heatmap in the red channel.
pub fn overlay(source: &Image, heat: &Image) -> Result<Image> {
    if source.channels != 3 || heat.channels != 1 || (source.width, source.height) != (heat.width, heat.height) {
        return Err(Error::Shape("overlay needs an RGB image and a same-sized heatmap".into()));
    }
    let mut out = source.clone();
    for y in 0..source.height {
        for x in 0..source.width {
            let h = heat.get(x, y, 0) as f64;
            for c in 0..3 {
                let layer = if c == 0 { h } else { 0.0 };
                let v = 0.5 * source.get(x, y, c) as f64 + 0.5 * layer;
                out.set(x, y, c, v.round() as u8);
            }
        }
    }
    Ok(out)
}

/// Ground-truth token mask of an item, if the study carries masks.
pub fn item_mask(study: &Study, item: usize) -> Option<&TokenMask> {
    study.masks.as_ref().and_then(|m| m.get(item))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_parsing() {
        assert_eq!(Task::parse_list("zs, mll,zs").unwrap(), vec![Task::ZeroShot, Task::Mll]);
        let err = Task::parse_list("zs,bogus").unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("retrieval"));
        assert!(Task::parse_list("").is_err());
    }

    #[test]
    fn corpus_has_all_templates() {
        let c = template_corpus();
        assert_eq!(c.len(), 17);
        assert_eq!(c[0], "a red circle");
        assert_eq!(c[16], NORMAL_ITEM);
    }

    #[test]
    fn flat_heatmap_is_constant() {
        let img = heatmap(&AttentionMap(vec![1.0 / 64.0; 64]), 8, 64);
        assert_eq!((img.width, img.height, img.channels), (64, 64, 1));
        assert!(img.data.iter().all(|&v| v == img.data[0]));
    }

    #[test]
    fn heatmap_upsamples_nearest() {
        let mut s = vec![0.0; 4];
        s[3] = 1.0;
        let img = heatmap(&AttentionMap(s), 2, 4);
        assert_eq!(img.get(3, 3, 0), 255);
        assert_eq!(img.get(2, 2, 0), 255);
        assert_eq!(img.get(1, 3, 0), 0);
        let src = Image::new(4, 4, 3);
        let o = overlay(&src, &img).unwrap();
        assert_eq!(o.get(3, 3, 0), 128);
        assert_eq!(o.get(3, 3, 1), 0);
    }
}
