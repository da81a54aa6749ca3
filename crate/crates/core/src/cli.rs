//! `itemclip` command line: data generation, training, evaluation and
//! attention heatmap export.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, heatmap, overlay, EvalOptions, Task};
use crate::metrics::VisualQuery;
use crate::model::Model;
use crate::synthdata::{generate_dataset, load_dataset, DatasetSpec, RenderConfig, MANIFEST_FILE, VOCAB_FILE};
use crate::trainer::{smoothed_ends, train_count, Ablation, Checkpoint, TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "itemclip", version, about = "Itemized vision-language training on synthetic shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic itemized-shapes dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a step log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split of a dataset.
    Eval(EvalArgs),
    /// Export the attention heatmap of one study item.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub normal_frac: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML run config; defaults to the desk profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Zero-weight one objective component (repeatable).
    #[arg(long, value_name = "ila|iis|mps|kta|uwp|mask")]
    pub ablate: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Step log path (TSV); defaults to `<out>.log.tsv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "zs,retrieval,mams,mll,seg,region")]
    pub tasks: String,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Tokens per predicted segmentation mask.
    #[arg(long, default_value_t = 4)]
    pub seg_top_n: usize,
    /// Accepted for uniformity; evaluation draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub study: String,
    /// Zero-based item index within the study.
    #[arg(long)]
    pub item: usize,
    /// Heatmap PGM path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional PPM blending the heatmap with the source image.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Accepted for uniformity; visualization draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Exit status for an error: 3 for numeric failures, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::Domain(_) => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Visualize(a) => visualize(&a, out),
    }
}

/// Hex SHA-256 of the TOML rendering of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = toml::to_string(value).expect("config serializes to TOML");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn echo<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<String> {
    let h = config_hash(value);
    say(out, format!("config-hash {h}"))?;
    Ok(h)
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("stdout", e))
}

/// Resolves a run config document: the `profile` key (default `desk`)
/// selects base values, every other key overrides them. Unknown keys are
/// rejected by name.
pub fn resolve_config(text: Option<&str>) -> Result<TrainConfig> {
    let user: toml::Table = match text {
        Some(t) => t.parse().map_err(|e| Error::Config(format!("config: {e}")))?,
        None => toml::Table::new(),
    };
    let profile = match user.get("profile") {
        None => "desk",
        Some(toml::Value::String(s)) => s.as_str(),
        Some(_) => return Err(Error::Config("`profile` must be a string".into())),
    };
    let base = TrainConfig::profile(profile)?;
    let mut merged = toml::Table::try_from(&base).expect("config serializes to TOML");
    merge(&mut merged, user);
    let cfg: TrainConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Serialize)]
struct GenDataEcho<'a> {
    num: usize,
    seed: u64,
    spec: &'a DatasetSpec,
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec = DatasetSpec::default();
    if let Some(f) = a.normal_frac {
        spec.normal_frac = f;
    }
    spec.validate()?;
    echo(
        out,
        &GenDataEcho {
            num: a.num,
            seed: a.seed,
            spec: &spec,
        },
    )?;
    let manifest = generate_dataset(&a.out, a.num, &spec, a.seed)?;
    let normal = manifest.records.iter().filter(|r| r.is_normal).count();
    say(out, format!("manifest {}", a.out.join(MANIFEST_FILE).display()))?;
    say(out, format!("studies {}", manifest.records.len()))?;
    say(out, format!("normal {normal}"))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// The run config `train` would use for these flags.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let text = a.config.as_deref().map(read_text).transpose()?;
    let mut cfg = resolve_config(text.as_deref())?;
    for name in &a.ablate {
        let ab = Ablation::parse(name).ok_or_else(|| {
            let valid: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown ablation `{name}`; valid: {}", valid.join("|")))
        })?;
        ab.apply(&mut cfg.loss);
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = train_config(a)?;
    echo(out, &cfg)?;
    let studies = load_dataset(&a.data)?;
    let vocab = Vocabulary::load(&a.data.join(VOCAB_FILE))?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.tsv");
        PathBuf::from(p)
    });
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut trainer = Trainer::new(cfg, vocab)?;
    trainer.run(&studies, &mut log, Some(&a.out))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    say(out, format!("checkpoint {}", a.out.display()))?;
    say(out, format!("log {}", log_path.display()))?;
    say(out, format!("steps {}", trainer.history.len()))?;
    if let Some((first, last)) = smoothed_ends(&trainer.history, 20) {
        say(out, format!("loss_start {first}"))?;
        say(out, format!("loss_end {last}"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    tasks: Vec<&'static str>,
    seg_top_n: usize,
    seed: u64,
    config: &'a TrainConfig,
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let tasks = Task::parse_list(&a.tasks)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let hash = echo(
        out,
        &EvalEcho {
            tasks: tasks.iter().map(|t| t.token()).collect(),
            seg_top_n: a.seg_top_n,
            seed: a.seed,
            config: &ckpt.config,
        },
    )?;
    let model = ckpt.model()?;
    let studies = load_dataset(&a.data)?;
    let held_out = &studies[train_count(studies.len(), ckpt.config.holdout_frac)..];
    let opts = EvalOptions {
        tasks,
        threads: a.threads,
        seg_top_n: a.seg_top_n,
        render: render_for(&model),
    };
    let rows = evaluate(&model, held_out, &opts)?;
    say(out, "metric\tvalue\tn\tconfig_hash")?;
    for r in rows {
        say(out, format!("{}\t{}\t{}\t{hash}", r.name, r.value, r.n))?;
    }
    Ok(())
}

fn render_for(model: &Model) -> RenderConfig {
    RenderConfig {
        image_side: model.cfg.encoder.image_side,
        token_side: model.cfg.encoder.patch_side,
        ..RenderConfig::default()
    }
}

#[derive(Serialize)]
struct VisualizeEcho<'a> {
    study: &'a str,
    item: usize,
    seed: u64,
    overlay: bool,
    config: &'a TrainConfig,
}

fn visualize(a: &VisualizeArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    echo(
        out,
        &VisualizeEcho {
            study: &a.study,
            item: a.item,
            seed: a.seed,
            overlay: a.overlay.is_some(),
            config: &ckpt.config,
        },
    )?;
    let model = ckpt.model()?;
    let studies = load_dataset(&a.data)?;
    let study = studies
        .iter()
        .find(|s| s.id == a.study)
        .ok_or_else(|| Error::Precondition(format!("no study `{}` in {}", a.study, a.data.display())))?;
    let item = study.items.get(a.item).ok_or_else(|| {
        Error::Precondition(format!("study `{}` has {} items; no item {}", study.id, study.items.len(), a.item))
    })?;
    let emb = model.embed_images(&[&study.image])?.remove(0);
    let text = model.embed_texts(std::slice::from_ref(item))?;
    let (tcsim, map) = VisualQuery::new(&model, emb.vp)?.attend(text.row(0))?;
    let heat = heatmap(&map, model.cfg.encoder.grid_side(), study.image.width);
    heat.save(&a.out)?;
    say(out, format!("item {item}"))?;
    say(out, format!("tcsim {tcsim}"))?;
    say(out, format!("heatmap {}", a.out.display()))?;
    if let Some(p) = &a.overlay {
        overlay(&study.image, &heat)?.save(p)?;
        say(out, format!("overlay {}", p.display()))?;
    }
    Ok(())
}

/// Binary entry point: parses arguments, runs the command, returns the
/// process exit status.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
