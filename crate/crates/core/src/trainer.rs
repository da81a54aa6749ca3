//! AdamW training with linear warmup and cosine decay, plus the binary
//! checkpoint format.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{assemble_batch, diverse_sample, exclude_shared_negatives, Study};
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::model::{Model, ModelConfig};
use crate::numerics::{Graph, ParamStore};
use crate::objectives::{loss_total, LossBreakdown, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiverseSampling {
    pub enabled: bool,
    pub max_merge: usize,
    pub flag_p: f64,
}

impl Default for DiverseSampling {
    fn default() -> Self {
        Self {
            enabled: false,
            max_merge: 3,
            flag_p: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub profile: String,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub max_items: usize,
    /// Trailing fraction of the dataset kept out of training.
    pub holdout_frac: f64,
    /// Write the checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Drop negative pairs whose text is also a positive of the anchor.
    pub shared_negative_check: bool,
    pub diverse: DiverseSampling,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            profile: "desk".into(),
            seed: 0,
            lr: 3e-4,
            weight_decay: 0.5,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            epochs: 30,
            warmup_steps: 100,
            batch_size: 16,
            grad_clip: 1.0,
            max_items: 7,
            holdout_frac: 0.1,
            checkpoint_every: 0,
            shared_negative_check: true,
            diverse: DiverseSampling::default(),
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

pub const PROFILES: [&str; 3] = ["desk", "paper-mri", "natural"];

impl TrainConfig {
    /// Named defaults. `paper-mri` records the full-scale brain MRI column
    /// of the published hyperparameters; `natural` keeps desk sizes with the
    /// natural-image loss weights and diverse sampling on.
    pub fn profile(name: &str) -> Result<Self> {
        let desk = Self::default();
        match name {
            "desk" => Ok(desk),
            "paper-mri" => Ok(Self {
                profile: name.into(),
                lr: 1.75e-4,
                weight_decay: 0.2,
                epochs: 24,
                warmup_steps: 2000,
                batch_size: 256,
                ..desk
            }),
            "natural" => Ok(Self {
                profile: name.into(),
                diverse: DiverseSampling {
                    enabled: true,
                    ..Default::default()
                },
                loss: LossWeights {
                    lambda_iis: 0.1,
                    lambda_mps: 0.1,
                    lambda_kta: 0.2,
                    key_frac: 0.2,
                    w_uwp: 2.0,
                    ..Default::default()
                },
                ..desk
            }),
            other => Err(Error::Config(format!(
                "unknown profile `{other}`, expected one of {}",
                PROFILES.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("weight decay must be >= 0 and adam_eps > 0".into());
        }
        if self.batch_size < 2 || self.epochs == 0 || self.max_items == 0 {
            return bad("batch_size >= 2, epochs >= 1, max_items >= 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return bad("holdout_frac must be in [0, 1)".into());
        }
        if self.diverse.max_merge == 0 || !(0.0..=1.0).contains(&self.diverse.flag_p) {
            return bad("diverse sampling needs max_merge >= 1 and flag_p in [0, 1]".into());
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// Objective components that `--ablate` can switch off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Ila,
    Iis,
    Mps,
    Kta,
    Uwp,
    Mask,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Self::Ila, Self::Iis, Self::Mps, Self::Kta, Self::Uwp, Self::Mask];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ila => "ila",
            Self::Iis => "iis",
            Self::Mps => "mps",
            Self::Kta => "kta",
            Self::Uwp => "uwp",
            Self::Mask => "mask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn apply(self, w: &mut LossWeights) {
        match self {
            Self::Ila => w.lambda_ila = 0.0,
            Self::Iis => w.lambda_iis = 0.0,
            Self::Mps => w.lambda_mps = 0.0,
            Self::Kta => w.lambda_kta = 0.0,
            Self::Uwp => w.w_uwp = 1.0,
            Self::Mask => w.p_mask = 0.0,
        }
    }
}

/// Number of leading studies used for training; the rest are held out.
pub fn train_count(n: usize, holdout_frac: f64) -> usize {
    n - (n as f64 * holdout_frac).floor() as usize
}

pub fn steps_per_epoch(train_studies: usize, batch_size: usize) -> usize {
    let full = train_studies / batch_size;
    if train_studies % batch_size >= 2 {
        full + 1
    } else {
        full
    }
}

/// Linear warmup to `lr` over `warmup` steps, then cosine decay to zero at
/// `total`.
pub fn lr_at(step: usize, lr: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Decoupled-decay Adam step. Decay applies only to tensors flagged for it.
pub fn adamw_step(store: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, p: AdamParams) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (id, g) in store.ids().zip(grads) {
        let e = store.entry(id);
        if g.len() != e.tensor.len() {
            return Err(Error::Shape(format!("gradient for {} has {} entries", e.name, g.len())));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("gradient of {} at entry {i}", e.name),
            });
        }
    }
    state.step += 1;
    let c1 = 1.0 - p.beta1.powi(state.step as i32);
    let c2 = 1.0 - p.beta2.powi(state.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let decay = if store.entry(id).decay { p.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((x, &g), m), v) in store.get_mut(id).data_mut().iter_mut().zip(&grads[k]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = p.beta1 * *m + (1.0 - p.beta1) * g;
            *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + p.eps);
            *x -= p.lr * (update + decay * *x);
        }
        let e = store.entry(id);
        if let Some(i) = e.tensor.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("update of {} at entry {i}", e.name),
            });
        }
    }
    Ok(())
}

/// Rescales `grads` in place to global L2 norm at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepLog {
    pub const HEADER: &'static str = "step\tlr\tila\tiis\tmps\tkta\ttotal";

    pub fn tsv(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{:e}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
            self.step, self.lr, l.ila, l.iis, l.mps, l.kta, l.total
        )
    }
}

/// Mean of the first and last `window` totals.
pub fn smoothed_ends(history: &[StepLog], window: usize) -> Option<(f64, f64)> {
    if history.is_empty() {
        return None;
    }
    let w = window.clamp(1, history.len());
    let mean = |s: &[StepLog]| s.iter().map(|h| h.loss.total).sum::<f64>() / s.len() as f64;
    Some((mean(&history[..w]), mean(&history[history.len() - w..])))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    rng: ChaCha8Rng,
    pub history: Vec<StepLog>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), vocab, cfg.seed)?;
        let adam = AdamState::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            cfg,
            model,
            adam,
            rng,
            history: Vec::new(),
        })
    }

    /// Trains on the leading non-held-out studies, writing one log line per
    /// step to `log` and the checkpoint to `checkpoint` when given.
    pub fn run(&mut self, studies: &[Study], log: &mut dyn Write, checkpoint: Option<&Path>) -> Result<()> {
        let n_train = train_count(studies.len(), self.cfg.holdout_frac);
        if n_train < 2 {
            return Err(Error::Precondition(format!("{n_train} training studies; need at least 2")));
        }
        let per_epoch = steps_per_epoch(n_train, self.cfg.batch_size);
        let total = per_epoch * self.cfg.epochs;
        let io = |e| Error::io("training log", e);
        writeln!(log, "{}", StepLog::HEADER).map_err(io)?;
        let mut order: Vec<usize> = (0..n_train).collect();
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            let epoch_studies = self.epoch_view(&studies[..n_train])?;
            let refs: Vec<&Study> = epoch_studies.iter().collect();
            for chunk in order.chunks(self.cfg.batch_size).filter(|c| c.len() >= 2) {
                let step = self.history.len();
                let lr = lr_at(step, self.cfg.lr, self.cfg.warmup_steps, total);
                let loss = self.step(&refs, chunk, lr)?;
                let entry = StepLog { step, lr, loss };
                writeln!(log, "{}", entry.tsv()).map_err(io)?;
                self.history.push(entry);
            }
            if let Some(path) = checkpoint {
                let every = self.cfg.checkpoint_every;
                if every > 0 && (epoch + 1) % every == 0 {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }

    /// Studies as seen this epoch: diverse sampling applied at most once.
    fn epoch_view(&mut self, studies: &[Study]) -> Result<Vec<Study>> {
        let d = &self.cfg.diverse;
        if !d.enabled {
            return Ok(studies.to_vec());
        }
        studies
            .iter()
            .map(|s| {
                let items = diverse_sample(&s.items, d.max_merge, d.flag_p, &mut self.rng)?;
                let masks = if items.len() == s.items.len() { s.masks.clone() } else { None };
                Ok(Study {
                    items,
                    masks,
                    ..s.clone()
                })
            })
            .collect()
    }

    /// One optimizer step on `indices`; returns the pre-update losses.
    pub fn step(&mut self, studies: &[&Study], indices: &[usize], lr: f64) -> Result<LossBreakdown> {
        let m = &self.model;
        let mut batch =
            assemble_batch(studies, indices, &m.vocab, self.cfg.max_items, m.cfg.encoder.max_len, &mut self.rng)?;
        if self.cfg.shared_negative_check {
            exclude_shared_negatives(&mut batch);
        }
        let images: Vec<&Image> = indices.iter().map(|&i| &studies[i].image).collect();
        let mut g = Graph::new();
        let enc = m.encode_batch(&mut g, &batch, &images)?;
        let out = loss_total(&mut g, m, &enc, &batch, &self.cfg.loss, &mut self.rng)?;
        if !out.breakdown.total.is_finite() {
            return Err(Error::NonFinite { op: "total loss".into() });
        }
        let mut grads = g.backward(out.total)?.param_grads(&m.store);
        drop(g);
        clip_global_norm(&mut grads, self.cfg.grad_clip);
        let params = AdamParams {
            lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.adam_eps,
            weight_decay: self.cfg.weight_decay,
        };
        adamw_step(&mut self.model.store, &grads, &mut self.adam, params)?;
        Ok(out.breakdown)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.cfg, &self.model, &self.adam)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ITCL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameters, optimizer moments (`adam.m.*`, `adam.v.*`), the step
/// counter (`meta.step`) and a TOML snapshot of config and vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    config: TrainConfig,
    vocab: Vec<String>,
}

impl Checkpoint {
    pub fn capture(cfg: &TrainConfig, model: &Model, adam: &AdamState) -> Self {
        let mut tensors = Vec::new();
        let entries = model.store.entries();
        for e in entries {
            tensors.push(NamedTensor {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                data: e.tensor.data().to_vec(),
            });
        }
        for (prefix, moments) in [("adam.m.", &adam.m), ("adam.v.", &adam.v)] {
            for (e, data) in entries.iter().zip(moments.iter()) {
                tensors.push(NamedTensor {
                    name: format!("{prefix}{}", e.name),
                    shape: e.tensor.shape().to_vec(),
                    data: data.clone(),
                });
            }
        }
        tensors.push(NamedTensor {
            name: "meta.step".into(),
            shape: vec![1],
            data: vec![adam.step as f64],
        });
        Self {
            tensors,
            config: cfg.clone(),
            vocab: model.vocab.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let too_big = |what: &str| Error::Format {
                what: "checkpoint",
                msg: format!("{what} of tensor {} does not fit the format", t.name),
            };
            let len = u16::try_from(name.len()).map_err(|_| too_big("name"))?;
            let rank = u8::try_from(t.shape.len()).map_err(|_| too_big("rank"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for &d in &t.shape {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("dimension"))?.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let snapshot = Snapshot {
            config: self.config.clone(),
            vocab: self.vocab.words().to_vec(),
        };
        let text = toml::to_string(&snapshot).map_err(|e| Error::Format {
            what: "checkpoint config",
            msg: e.to_string(),
        })?;
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("tensor name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.err("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.err("config is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        let snap: Snapshot = toml::from_str(text).map_err(|e| r.err(&format!("config: {e}")))?;
        Ok(Self {
            tensors,
            config: snap.config,
            vocab: Vocabulary::from_words(snap.vocab),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the model (and optimizer state) exactly as captured.
    pub fn restore(&self) -> Result<(Model, AdamState)> {
        let mut model = Model::new(self.config.model.clone(), self.vocab.clone(), self.config.seed)?;
        let mut adam = AdamState::new(&model.store);
        let mut values = Vec::with_capacity(model.store.len());
        for (k, e) in model.store.entries().iter().enumerate() {
            let missing = || Error::Format {
                what: "checkpoint",
                msg: format!("missing tensor {}", e.name),
            };
            let p = self.tensor(&e.name).ok_or_else(missing)?;
            values.push((p.name.clone(), p.shape.clone(), p.data.clone()));
            for (prefix, dst) in [("adam.m.", &mut adam.m[k]), ("adam.v.", &mut adam.v[k])] {
                let t = self.tensor(&format!("{prefix}{}", e.name)).ok_or_else(missing)?;
                if t.data.len() != dst.len() {
                    return Err(Error::Format {
                        what: "checkpoint",
                        msg: format!("{} has {} entries", t.name, t.data.len()),
                    });
                }
                dst.copy_from_slice(&t.data);
            }
        }
        model.store.load_values(&values)?;
        adam.step = self.tensor("meta.step").and_then(|t| t.data.first()).map_or(0, |s| *s as u64);
        Ok((model, adam))
    }

    pub fn model(&self) -> Result<Model> {
        Ok(self.restore()?.0)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Format {
            what: "checkpoint",
            msg: format!("{msg} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
