//! Command implementations behind the `cmah` binary.

pub mod manifest;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use cmah_core::data::{self, PairRecord, ShapeClass, SyntheticSpec};
use cmah_core::model::{self, checkpoint, CmahModel, ModelConfig, Samples, Variant};
use cmah_core::retrieval::{self, map_at_k, precision_curve, CodeDatabase, EvalOptions};
use cmah_core::trainer::{self, TrainConfig, TrainOutputs};
use cmah_core::{Error, Modality};

pub use manifest::RunManifest;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cmah", version, about = "Cross-modal image / point-cloud hashing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a JSON-lines step log.
    Train(TrainArgs),
    /// Encode one modality of a dataset into a binary code file.
    Encode(EncodeArgs),
    /// Score query codes against gallery codes.
    Eval(EvalArgs),
    /// Per-component parameter and FLOP counts.
    Stats(StatsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    fn model(self) -> ModelConfig {
        match self {
            Preset::Paper => ModelConfig::paper(),
            Preset::Desk => ModelConfig::desk(),
        }
    }

    fn train(self) -> TrainConfig {
        match self {
            Preset::Paper => TrainConfig::paper(),
            Preset::Desk => TrainConfig::desk(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Full,
    NoFusion,
    NoReconstruction,
    NoContrastive,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoFusion => Variant::NoFusion,
            VariantArg::NoReconstruction => Variant::NoReconstruction,
            VariantArg::NoContrastive => Variant::NoContrastive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Image,
    Point,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Image => Modality::Image,
            ModalityArg::Point => Modality::Point,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    I2p,
    P2i,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    JsonLines,
}

fn parse_bits(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(b @ (16 | 32 | 64)) => Ok(b),
        _ => Err(format!("code length must be 16, 32 or 64, got {s:?}")),
    }
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(r) if (0.0..1.0).contains(&r) => Ok(r),
        _ => Err(format!("mask ratio must be in [0, 1), got {s:?}")),
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Class count (first N of the canonical list) or comma-separated names.
    #[arg(long, default_value = "8")]
    pub classes: String,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    pub per_class: u32,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(1..))]
    pub points: u32,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u16).range(1..))]
    pub image_size: u16,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub jitter: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long, value_parser = parse_bits)]
    pub bits: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = parse_positive)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = parse_ratio, default_value_t = 0.75)]
    pub mask_image: f64,
    #[arg(long, value_parser = parse_ratio, default_value_t = 0.60)]
    pub mask_point: f64,
    #[arg(long, value_parser = parse_positive)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub batch_size: Option<u32>,
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// FPS starts at index 0 instead of a seeded random point.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub modality: ModalityArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub query_codes: PathBuf,
    #[arg(long)]
    pub gallery_codes: PathBuf,
    /// Checks that query and gallery modalities match the task.
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u32).range(1..))]
    pub map_k: u32,
    #[arg(long, value_delimiter = ',', default_value = "1,10,50,100")]
    pub curve_ks: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Keep the gallery entry that shares the query's pair id.
    #[arg(long)]
    pub keep_same_pair: bool,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long, value_parser = parse_bits)]
    pub bits: Option<usize>,
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Run one command, printing its report to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    let report = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a)?,
        Command::Train(a) => cmd_train(&a)?,
        Command::Encode(a) => cmd_encode(&a)?,
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Stats(a) => cmd_stats(&a)?,
    };
    print!("{report}");
    Ok(())
}

fn parse_classes(s: &str) -> CliResult<Vec<ShapeClass>> {
    if let Ok(n) = s.trim().parse::<usize>() {
        return ShapeClass::first(n).map_err(|e| CliError::Usage(e.to_string()));
    }
    let classes = s
        .split(',')
        .map(|t| ShapeClass::from_name(t.trim()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut seen = classes.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != classes.len() {
        return Err(CliError::Usage(format!("duplicate class in {s:?}")));
    }
    Ok(classes)
}

pub fn cmd_gen_data(a: &GenDataArgs) -> CliResult<String> {
    let start = Instant::now();
    let mut spec = SyntheticSpec::new(1, 1, a.seed)?;
    spec.classes = parse_classes(&a.classes)?;
    spec.per_class = a.per_class as usize;
    spec.points = a.points as usize;
    spec.image_size = a.image_size as usize;
    spec.jitter = a.jitter;
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let records = spec.generate()?;
    data::write_dataset(&records, &a.out)?;
    RunManifest::new("gen-data", &spec, Some(a.seed), vec![a.out.clone()], start)
        .with_format("dataset", data::FORMAT_VERSION)
        .write_beside(&a.out)?;
    Ok(format!("wrote {} records to {}\n", records.len(), a.out.display()))
}

/// Check that every record can be tokenized under `cfg` for `modality`.
pub fn check_records(cfg: &ModelConfig, records: &[PairRecord], modality: Modality) -> CliResult<()> {
    for r in records {
        match modality {
            Modality::Image => {
                if r.image.height() != cfg.image_size || r.image.width() != cfg.image_size {
                    return Err(CliError::Data(format!(
                        "record {} holds a {}x{} image; the model expects image modality at {}x{}",
                        r.pair_id,
                        r.image.height(),
                        r.image.width(),
                        cfg.image_size,
                        cfg.image_size
                    )));
                }
            }
            Modality::Point => {
                if r.cloud.len() != cfg.points {
                    return Err(CliError::Data(format!(
                        "record {} holds {} points; the model expects point modality at {}",
                        r.pair_id,
                        r.cloud.len(),
                        cfg.points
                    )));
                }
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainManifestConfig<'a> {
    preset: Preset,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    data: &'a Path,
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<String> {
    let start = Instant::now();
    let mut cfg = a.preset.model().with_variant(a.variant.into());
    if let Some(b) = a.bits {
        cfg = cfg.with_bits(b);
    }
    let mut tc = a.preset.train();
    tc.seed = a.seed;
    tc.mask_image = a.mask_image;
    tc.mask_point = a.mask_point;
    tc.deterministic = a.deterministic;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(t) = a.tau {
        tc.loss.tau = t;
    }
    if let Some(lr) = a.lr {
        tc.lr0 = lr;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b as usize;
    }
    let records = data::read_dataset(&a.data)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{} holds no records", a.data.display())));
    }
    check_records(&cfg, &records, Modality::Image)?;
    check_records(&cfg, &records, Modality::Point)?;

    fs::create_dir_all(&a.out_dir)?;
    let ckpt = a.out_dir.join("model.ckpt");
    let log = a.out_dir.join("train_log.jsonl");
    let mut model = CmahModel::new(cfg.clone(), a.seed)?;
    let pairs: Vec<_> = records.iter().map(|r| (&r.cloud, &r.image)).collect();
    let outputs = TrainOutputs {
        log: Some(log.clone()),
        checkpoint: Some(ckpt.clone()),
    };
    let outcome = trainer::train(&mut model, &pairs, &tc, &outputs)?;
    let manifest_cfg = TrainManifestConfig {
        preset: a.preset,
        model: &cfg,
        train: &tc,
        data: &a.data,
    };
    RunManifest::new("train", &manifest_cfg, Some(a.seed), vec![ckpt.clone(), log.clone()], start)
        .with_format("checkpoint", checkpoint::FORMAT_VERSION)
        .write_to(&a.out_dir.join("manifest.json"))?;
    let last = outcome.log.last().map(|r| r.losses.overall).unwrap_or(f64::NAN);
    info!("trained {} steps, {} skipped", outcome.log.records.len(), outcome.skipped_steps);
    Ok(format!(
        "trained {} steps (batch {}), final loss {last:.6}; checkpoint {}\n",
        outcome.log.records.len(),
        outcome.batch_size,
        ckpt.display()
    ))
}

/// Binary codes for one modality of `records`, labeled by class.
pub fn encode_records(model: &CmahModel, records: &[PairRecord], modality: Modality) -> CliResult<CodeDatabase> {
    check_records(model.config(), records, modality)?;
    let bits = model.config().code_bits;
    let labels = Some(records.iter().map(|r| r.label).collect());
    if records.is_empty() {
        return Ok(CodeDatabase::from_codes(bits, &[], labels, modality)?);
    }
    let codes = match modality {
        Modality::Image => {
            let imgs: Vec<_> = records.iter().map(|r| &r.image).collect();
            model.encode_for_retrieval(Samples::Images(&imgs))?
        }
        Modality::Point => {
            let pts: Vec<_> = records.iter().map(|r| &r.cloud).collect();
            model.encode_for_retrieval(Samples::Points(&pts))?
        }
    };
    Ok(CodeDatabase::from_codes(bits, &codes, labels, modality)?)
}

#[derive(Serialize)]
struct EncodeManifestConfig<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    modality: Modality,
    bits: usize,
}

pub fn cmd_encode(a: &EncodeArgs) -> CliResult<String> {
    let start = Instant::now();
    let model = checkpoint::load(&a.ckpt)?;
    let records = data::read_dataset(&a.data)?;
    let modality: Modality = a.modality.into();
    let db = encode_records(&model, &records, modality)?;
    db.save(&a.out)?;
    let cfg = EncodeManifestConfig {
        checkpoint: &a.ckpt,
        data: &a.data,
        modality,
        bits: db.bits(),
    };
    RunManifest::new("encode", &cfg, Some(model.seed()), vec![a.out.clone()], start)
        .with_format("codes", retrieval::FORMAT_VERSION)
        .with_format("checkpoint", checkpoint::FORMAT_VERSION)
        .with_format("dataset", data::FORMAT_VERSION)
        .write_beside(&a.out)?;
    Ok(format!(
        "encoded {} {modality} samples at K = {} to {}\n",
        db.len(),
        db.bits(),
        a.out.display()
    ))
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: &'static str,
    pub k: usize,
    pub value: f64,
}

pub fn evaluate(query: &CodeDatabase, gallery: &CodeDatabase, map_k: usize, ks: &[usize], opts: EvalOptions) -> CliResult<Vec<MetricRow>> {
    let mut rows = vec![MetricRow {
        metric: "map",
        k: map_k,
        value: map_at_k(query, gallery, map_k, opts)?,
    }];
    rows.extend(precision_curve(query, gallery, ks, opts)?.into_iter().map(|(k, value)| MetricRow {
        metric: "precision",
        k,
        value,
    }));
    Ok(rows)
}

fn check_task(task: Task, query: &CodeDatabase, gallery: &CodeDatabase) -> CliResult<()> {
    let (q, g) = match task {
        Task::I2p => (Modality::Image, Modality::Point),
        Task::P2i => (Modality::Point, Modality::Image),
    };
    if query.modality() != q || gallery.modality() != g {
        return Err(CliError::Data(format!(
            "task expects {q} queries against {g} gallery codes, got {} against {}",
            query.modality(),
            gallery.modality()
        )));
    }
    Ok(())
}

pub fn format_rows<T: Serialize>(rows: &[T], headers: &[&str], format: Format) -> CliResult<String> {
    let values: Vec<serde_json::Map<String, serde_json::Value>> = rows
        .iter()
        .map(|r| match serde_json::to_value(r) {
            Ok(serde_json::Value::Object(m)) => Ok(m),
            _ => Err(CliError::Data("report row is not an object".into())),
        })
        .collect::<CliResult<_>>()?;
    let cell = |m: &serde_json::Map<String, serde_json::Value>, h: &str| match &m[h] {
        serde_json::Value::String(s) => s.clone(),
        v => v.to_string(),
    };
    let mut out = String::new();
    match format {
        Format::JsonLines => {
            for m in &values {
                writeln!(out, "{}", serde_json::Value::Object(m.clone())).expect("write to string");
            }
        }
        Format::Csv => {
            writeln!(out, "{}", headers.join(",")).expect("write to string");
            for m in &values {
                let cells: Vec<String> = headers.iter().map(|h| cell(m, h)).collect();
                writeln!(out, "{}", cells.join(",")).expect("write to string");
            }
        }
        Format::Table => {
            let body: Vec<Vec<String>> = values.iter().map(|m| headers.iter().map(|h| cell(m, h)).collect()).collect();
            let widths: Vec<usize> = headers
                .iter()
                .enumerate()
                .map(|(i, h)| body.iter().map(|r| r[i].len()).chain([h.len()]).max().unwrap_or(0))
                .collect();
            let line = |cells: Vec<&str>| {
                cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
            writeln!(out, "{}", line(headers.to_vec())).expect("write to string");
            for r in &body {
                writeln!(out, "{}", line(r.iter().map(String::as_str).collect())).expect("write to string");
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct EvalManifestConfig<'a> {
    query_codes: &'a Path,
    gallery_codes: &'a Path,
    map_k: u32,
    curve_ks: &'a [usize],
    exclude_same_pair: bool,
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<String> {
    let start = Instant::now();
    if a.curve_ks.is_empty() || a.curve_ks.contains(&0) {
        return Err(CliError::Usage("curve cutoffs must be positive".into()));
    }
    let query = CodeDatabase::load(&a.query_codes)?;
    let gallery = CodeDatabase::load(&a.gallery_codes)?;
    if let Some(t) = a.task {
        check_task(t, &query, &gallery)?;
    }
    let opts = EvalOptions {
        exclude_same_pair: !a.keep_same_pair,
    };
    let rows = evaluate(&query, &gallery, a.map_k as usize, &a.curve_ks, opts)?;
    let report = format_rows(&rows, &["metric", "k", "value"], a.format)?;
    let mut artifacts = Vec::new();
    if let Some(out) = &a.out {
        fs::write(out, &report)?;
        artifacts.push(out.clone());
    }
    let cfg = EvalManifestConfig {
        query_codes: &a.query_codes,
        gallery_codes: &a.gallery_codes,
        map_k: a.map_k,
        curve_ks: &a.curve_ks,
        exclude_same_pair: opts.exclude_same_pair,
    };
    let beside = a.out.clone().unwrap_or_else(|| a.query_codes.with_extension("eval"));
    RunManifest::new("eval", &cfg, None, artifacts, start)
        .with_format("codes", retrieval::FORMAT_VERSION)
        .write_beside(&beside)?;
    Ok(report)
}

#[derive(Serialize)]
struct StatsRow {
    component: String,
    params: usize,
    flops: u64,
}

pub fn cmd_stats(a: &StatsArgs) -> CliResult<String> {
    let start = Instant::now();
    let mut cfg = a.preset.model().with_variant(a.variant.into());
    if let Some(b) = a.bits {
        cfg = cfg.with_bits(b);
    }
    let stats = model::model_stats(&cfg)?;
    let rows: Vec<StatsRow> = stats
        .rows
        .iter()
        .map(|r| StatsRow {
            component: r.component.to_string(),
            params: r.params,
            flops: r.flops,
        })
        .collect();
    let report = format_rows(&rows, &["component", "params", "flops"], a.format)?;
    if let Some(out) = &a.out {
        fs::write(out, &report)?;
        RunManifest::new("stats", &cfg, None, vec![out.clone()], start).write_beside(out)?;
    }
    Ok(report)
}

/// Format versions of every container this build reads and writes.
pub fn format_versions() -> BTreeMap<&'static str, u16> {
    BTreeMap::from([
        ("checkpoint", checkpoint::FORMAT_VERSION),
        ("codes", retrieval::FORMAT_VERSION),
        ("dataset", data::FORMAT_VERSION),
    ])
}
