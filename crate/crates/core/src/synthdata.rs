//! Synthetic itemized-shapes scenes with ground-truth token masks.
//!
//! Each scene is split into a grid of regions (2x2 quadrants by default).
//! A region holds at most one colored shape, and every shape becomes one
//! text item `"a {color} {shape}"`. Item text never mentions location, so
//! grounding has to come from the pixels. Scenes without shapes are
//! "normal" and carry the single item [`NORMAL_ITEM`].
//!
//! On disk a dataset is a directory with `manifest.jsonl`, `vocab.txt`,
//! `images/*.ppm` (P6) and `masks/*.pgm` (P5, one pixel per token,
//! 255 = inside).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batching::Study;
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::metrics::TokenMask;

pub const NORMAL_ITEM: &str = "nothing present";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Circle, Self::Square, Self::Triangle, Self::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Cross => "cross",
        }
    }

    /// Whether the point `(u, v)` (in units of the shape's box side) is inside.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Self::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Self::Square => (0.08..=0.92).contains(&u) && (0.08..=0.92).contains(&v),
            Self::Triangle => (0.0..=1.0).contains(&v) && (u - 0.5).abs() <= 0.5 * v,
            Self::Cross => (u - 0.5).abs() <= 0.19 || (v - 0.5).abs() <= 0.19,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Self::Red, Self::Green, Self::Blue, Self::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            Self::Red => [0.86, 0.16, 0.16],
            Self::Green => [0.16, 0.78, 0.24],
            Self::Blue => [0.20, 0.31, 0.90],
            Self::Yellow => [0.90, 0.86, 0.16],
        }
    }
}

pub fn item_text(color: Color, shape: ShapeKind) -> String {
    format!("a {} {}", color.name(), shape.name())
}

/// Parses `"a {color} {shape}"` back into its parts.
pub fn parse_item(text: &str) -> Option<(Color, ShapeKind)> {
    let mut words = text.split_whitespace();
    if words.next()? != "a" {
        return None;
    }
    let c = words.next()?;
    let s = words.next()?;
    if words.next().is_some() {
        return None;
    }
    let color = Color::ALL.into_iter().find(|x| x.name() == c)?;
    let shape = ShapeKind::ALL.into_iter().find(|x| x.name() == s)?;
    Some((color, shape))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeDesc {
    pub shape: ShapeKind,
    pub color: Color,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskRule {
    /// Token is in the mask when more than half its pixels are covered.
    Majority,
    AnyOverlap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub image_side: usize,
    pub token_side: usize,
    pub region_rows: usize,
    pub region_cols: usize,
    pub noise_sigma: f64,
    pub min_size: usize,
    pub max_size: usize,
    pub background: f64,
    pub mask_rule: MaskRule,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            token_side: 8,
            region_rows: 2,
            region_cols: 2,
            noise_sigma: 0.02,
            min_size: 20,
            max_size: 28,
            background: 0.08,
            mask_rule: MaskRule::Majority,
        }
    }
}

impl RenderConfig {
    pub fn grid_side(&self) -> usize {
        self.image_side / self.token_side
    }

    pub fn regions(&self) -> usize {
        self.region_rows * self.region_cols
    }

    fn region_px(&self) -> (usize, usize) {
        (self.image_side / self.region_cols, self.image_side / self.region_rows)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.image_side / self.token_side.max(1);
        let ok = self.token_side > 0
            && self.image_side % self.token_side == 0
            && self.region_rows > 0
            && self.region_cols > 0
            && grid % self.region_rows == 0
            && grid % self.region_cols == 0
            && self.min_size >= 4
            && self.min_size <= self.max_size;
        let (rw, rh) = (self.image_side / self.region_cols.max(1), self.image_side / self.region_rows.max(1));
        if !ok || self.max_size > rw.min(rh) {
            return Err(Error::Config(format!("inconsistent render config {self:?}")));
        }
        Ok(())
    }

    /// Token indices of region `r` (row-major regions over the token grid).
    pub fn region_tokens(&self, r: usize) -> Vec<usize> {
        let grid = self.grid_side();
        let (th, tw) = (grid / self.region_rows, grid / self.region_cols);
        let (rr, rc) = (r / self.region_cols, r % self.region_cols);
        let mut out = Vec::with_capacity(th * tw);
        for y in rr * th..(rr + 1) * th {
            for x in rc * tw..(rc + 1) * tw {
                out.push(y * grid + x);
            }
        }
        out
    }

    /// Region containing token `t`.
    pub fn region_of_token(&self, t: usize) -> usize {
        let grid = self.grid_side();
        let (th, tw) = (grid / self.region_rows, grid / self.region_cols);
        (t / grid / th) * self.region_cols + (t % grid) / tw
    }
}

/// Contents of every region of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub regions: Vec<Option<ShapeDesc>>,
}

impl SceneSpec {
    pub fn normal(regions: usize) -> Self {
        Self {
            regions: vec![None; regions],
        }
    }

    pub fn is_normal(&self) -> bool {
        self.regions.iter().all(Option::is_none)
    }

    /// `count` shapes in distinct regions with distinct (color, shape) pairs.
    pub fn random(count: usize, regions: usize, rng: &mut impl Rng) -> Self {
        let count = count.min(regions);
        let mut slots = vec![None; regions];
        let chosen = index::sample(rng, regions, count).into_vec();
        let combos = index::sample(rng, Color::ALL.len() * ShapeKind::ALL.len(), count).into_vec();
        for (r, c) in chosen.into_iter().zip(combos) {
            slots[r] = Some(ShapeDesc {
                color: Color::ALL[c / ShapeKind::ALL.len()],
                shape: ShapeKind::ALL[c % ShapeKind::ALL.len()],
            });
        }
        Self { regions: slots }
    }
}

/// Rasterizes `spec` and derives items and token masks.
pub fn render_study(id: &str, spec: &SceneSpec, cfg: &RenderConfig, rng: &mut impl Rng) -> Result<Study> {
    cfg.validate()?;
    if spec.regions.len() != cfg.regions() {
        return Err(Error::Config(format!(
            "scene has {} regions, render grid has {}",
            spec.regions.len(),
            cfg.regions()
        )));
    }
    let side = cfg.image_side;
    let mut canvas = vec![[cfg.background; 3]; side * side];
    let mut items = Vec::new();
    let mut masks = Vec::new();
    let (rw, rh) = cfg.region_px();
    for (r, slot) in spec.regions.iter().enumerate() {
        let Some(desc) = slot else { continue };
        let size = rng.random_range(cfg.min_size..=cfg.max_size);
        let x0 = (r % cfg.region_cols) * rw + rng.random_range(0..=rw - size);
        let y0 = (r / cfg.region_cols) * rh + rng.random_range(0..=rh - size);
        let mut covered = vec![false; side * side];
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                let u = (x - x0) as f64 + 0.5;
                let v = (y - y0) as f64 + 0.5;
                if desc.shape.contains(u / size as f64, v / size as f64) {
                    covered[y * side + x] = true;
                    canvas[y * side + x] = desc.color.rgb();
                }
            }
        }
        items.push(item_text(desc.color, desc.shape));
        masks.push(token_mask(&covered, cfg));
    }
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut image = Image::new(side, side, 3);
    for (i, px) in canvas.iter().enumerate() {
        for c in 0..3 {
            let v = (px[c] + noise.sample(rng)).clamp(0.0, 1.0);
            image.data[i * 3 + c] = (v * 255.0).round() as u8;
        }
    }
    let is_normal = items.is_empty();
    Ok(Study {
        id: id.to_string(),
        image,
        items: if is_normal { vec![NORMAL_ITEM.to_string()] } else { items },
        is_normal,
        masks: if is_normal { None } else { Some(masks) },
    })
}

fn token_mask(covered: &[bool], cfg: &RenderConfig) -> TokenMask {
    let (side, ts, grid) = (cfg.image_side, cfg.token_side, cfg.grid_side());
    let mut counts = vec![0usize; grid * grid];
    for (i, &c) in covered.iter().enumerate() {
        if c {
            let (x, y) = (i % side, i / side);
            counts[(y / ts) * grid + x / ts] += 1;
        }
    }
    let area = ts * ts;
    let mut tokens: Vec<usize> = (0..counts.len())
        .filter(|&t| match cfg.mask_rule {
            MaskRule::Majority => 2 * counts[t] > area,
            MaskRule::AnyOverlap => counts[t] > 0,
        })
        .collect();
    if tokens.is_empty() {
        let best = (0..counts.len()).max_by_key(|&t| (counts[t], usize::MAX - t)).unwrap_or(0);
        tokens.push(best);
    }
    TokenMask::new(tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub normal_frac: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub render: RenderConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            normal_frac: 0.1,
            min_shapes: 1,
            max_shapes: 4,
            render: RenderConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        if !(0.0..=1.0).contains(&self.normal_frac)
            || self.min_shapes == 0
            || self.min_shapes > self.max_shapes
            || self.max_shapes > self.render.regions()
        {
            return Err(Error::Config(format!("inconsistent dataset spec {self:?}")));
        }
        Ok(())
    }

    pub fn sample_scene(&self, rng: &mut impl Rng) -> SceneSpec {
        if rng.random::<f64>() < self.normal_frac {
            SceneSpec::normal(self.render.regions())
        } else {
            let count = rng.random_range(self.min_shapes..=self.max_shapes);
            SceneSpec::random(count, self.render.regions(), rng)
        }
    }
}

/// One line of `manifest.jsonl`. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub is_normal: bool,
    pub items: Vec<String>,
    pub mask_paths: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

pub fn study_id(index: usize) -> String {
    format!("study{index:05}")
}

/// Study `index` of a dataset drawn with `seed`; each study has its own
/// ChaCha stream so studies can be generated independently.
pub fn generate_study(index: usize, spec: &DatasetSpec, seed: u64) -> Result<Study> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let scene = spec.sample_scene(&mut rng);
    render_study(&study_id(index), &scene, &spec.render, &mut rng)
}

/// Renders `n` studies into `dir` and writes the manifest and vocabulary.
pub fn generate_dataset(dir: &Path, n: usize, spec: &DatasetSpec, seed: u64) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    spec.validate()?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut records = Vec::with_capacity(n);
    let mut studies = Vec::with_capacity(n);
    for i in 0..n {
        let study = generate_study(i, spec, seed)?;
        let image_path = format!("images/{}.ppm", study.id);
        study.image.save(&dir.join(&image_path))?;
        let mut mask_paths = Vec::new();
        if let Some(masks) = &study.masks {
            for (j, m) in masks.iter().enumerate() {
                let p = format!("masks/{}_{j}.pgm", study.id);
                m.to_image(spec.render.grid_side()).save(&dir.join(&p))?;
                mask_paths.push(p);
            }
        }
        records.push(ManifestRecord {
            id: study.id.clone(),
            image_path,
            is_normal: study.is_normal,
            items: study.items.clone(),
            mask_paths,
        });
        studies.push(study);
    }
    let path = dir.join(MANIFEST_FILE);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for r in &records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    let vocab = Vocabulary::induce(studies.iter().flat_map(|s| s.items.iter().map(String::as_str)));
    vocab.save(&dir.join(VOCAB_FILE))?;
    Ok(DatasetManifest { records })
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            what: "manifest",
            msg: format!("line {}: {e}", line_no + 1),
        })?;
        records.push(r);
    }
    Ok(DatasetManifest { records })
}

/// Loads every study listed in the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Study>> {
    let manifest = read_manifest(dir)?;
    manifest.records.iter().map(|r| load_record(dir, r)).collect()
}

fn load_record(dir: &Path, r: &ManifestRecord) -> Result<Study> {
    let fail = |msg: String| Error::Dataset {
        record: r.id.clone(),
        msg,
    };
    let resolve = |p: &str| -> PathBuf { dir.join(p) };
    let image = Image::load(&resolve(&r.image_path)).map_err(|e| fail(format!("image: {e}")))?;
    if r.items.is_empty() {
        return Err(fail("no items".into()));
    }
    let masks = if r.is_normal {
        if !r.mask_paths.is_empty() {
            return Err(fail("normal study with masks".into()));
        }
        None
    } else {
        if r.mask_paths.len() != r.items.len() {
            return Err(fail(format!(
                "{} items but {} masks",
                r.items.len(),
                r.mask_paths.len()
            )));
        }
        let mut masks = Vec::with_capacity(r.mask_paths.len());
        for p in &r.mask_paths {
            let img = Image::load(&resolve(p)).map_err(|e| fail(format!("mask {p}: {e}")))?;
            masks.push(TokenMask::from_image(&img).map_err(|e| fail(format!("mask {p}: {e}")))?);
        }
        Some(masks)
    };
    Ok(Study {
        id: r.id.clone(),
        image,
        items: r.items.clone(),
        is_normal: r.is_normal,
        masks,
    })
}
