//! AdamW training loop with a step-decay learning-rate schedule.
//!
//! AdamW update for parameter `p` with gradient `g` at step `t` (from 1):
//!
//! ```text
//! p ← p − lr·wd·p                      (only parameters flagged for decay)
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! p ← p − lr · (m / (1 − β1^t)) / (sqrt(v / (1 − β2^t)) + ε)
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::losses::{overall, LossBreakdown, LossConfig};
use crate::model::{checkpoint, CmahModel, FpsMode, TrainBatch};
use crate::seed::derive_seed;
use crate::tokenizer::{ImageGrid, MaskSpec};

/// Consecutive skipped steps after which training gives up.
const MAX_CONSECUTIVE_SKIPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mask_image: f64,
    pub mask_point: f64,
    pub loss: LossConfig,
    /// FPS always starts at index 0 instead of a seeded random point.
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            batch_size: 32,
            epochs: 60,
            lr0: 1e-4,
            lr_decay: 0.1,
            decay_every: 20,
            lr_min: 1e-5,
            adam: AdamConfig::default(),
            seed: 0,
            mask_image: 0.75,
            mask_point: 0.6,
            loss: LossConfig::default(),
            deterministic: false,
        }
    }

    /// Randomly initialized desk-scale models need a larger step size.
    pub fn desk() -> Self {
        Self {
            lr0: 1e-3,
            ..Self::paper()
        }
    }

    /// `max(lr0 · decay^floor(epoch / decay_every), lr_min)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.decay_every.max(1)) as i32;
        (self.lr0 * self.lr_decay.powi(k)).max(self.lr_min)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
        if !(self.lr0 > 0.0) || !(self.lr_min >= 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        self.masks(0).validate()
    }

    pub fn masks(&self, seed: u64) -> MaskSpec {
        MaskSpec {
            ratio_image: self.mask_image,
            ratio_point: self.mask_point,
            seed,
        }
    }
}

/// AdamW moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    skipped: u64,
}

impl AdamW {
    pub fn new(ps: &ParamStore) -> Self {
        let zeros = || ps.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Apply one update from the store's gradient accumulators. Parameters
    /// without a gradient are left untouched. Returns `false` (and counts a
    /// skip) when any gradient is non-finite.
    pub fn step(&mut self, ps: &mut ParamStore, lr: f64, cfg: &AdamConfig) -> Result<bool> {
        let bad = ps.iter().find_map(|(_, p)| {
            p.grad()
                .and_then(|g| g.data().iter().position(|v| !v.is_finite()))
                .map(|i| (p.name.clone(), i))
        });
        if let Some((name, i)) = bad {
            self.skipped += 1;
            warn!("skipping optimizer step: non-finite gradient in {name}[{i}]");
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<_> = ps.iter().map(|(id, p)| (id, p.decay)).collect();
        for (id, decay) in ids {
            let Some(g) = ps.grad(id).map(|g| g.data().to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = ps.value_mut(id)?.data_mut();
            for i in 0..p.len() {
                if decay {
                    p[i] -= lr * cfg.weight_decay * p[i];
                }
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            }
        }
        Ok(true)
    }
}

/// One optimizer step's log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub wall_time: f64,
}

impl StepRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        self.step == other.step
            && self.epoch == other.epoch
            && self.lr.to_bits() == other.lr.to_bits()
            && serde_json::to_string(&self.losses).ok() == serde_json::to_string(&other.losses).ok()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut records = vec![];
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::format(format!("train log line {}: {e}", i + 1)))?);
        }
        Ok(Self { records })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            write_record(&mut w, r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn same_values(&self, other: &Self) -> bool {
        self.records.len() == other.records.len() && self.records.iter().zip(&other.records).all(|(a, b)| a.same_values(b))
    }

    pub fn first(&self) -> Option<&StepRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

fn write_record<W: Write>(w: &mut W, r: &StepRecord) -> Result<()> {
    let line = serde_json::to_string(r).map_err(|e| Error::format(e.to_string()))?;
    writeln!(w, "{line}")?;
    Ok(())
}

/// Where the training loop writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub skipped_steps: u64,
    pub batch_size: usize,
}

/// Train `model` on aligned `(cloud, image)` pairs.
pub fn train(
    model: &mut CmahModel,
    pairs: &[(&PointCloud, &ImageGrid)],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let batch_size = if pairs.len() < cfg.batch_size {
        warn!("dataset has {} pairs; shrinking batch from {} to fit", pairs.len(), cfg.batch_size);
        pairs.len()
    } else {
        cfg.batch_size
    };
    let mut sink = match &outputs.log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let result = run(model, pairs, cfg, batch_size, &mut sink);
    if let Some(s) = sink.as_mut() {
        s.flush()?;
    }
    let (log, skipped) = result?;
    if let Some(p) = &outputs.checkpoint {
        checkpoint::save(model, p)?;
    }
    Ok(TrainOutcome {
        log,
        skipped_steps: skipped,
        batch_size,
    })
}

fn run(
    model: &mut CmahModel,
    pairs: &[(&PointCloud, &ImageGrid)],
    cfg: &TrainConfig,
    batch_size: usize,
    sink: &mut Option<BufWriter<File>>,
) -> Result<(TrainLog, u64)> {
    let start = Instant::now();
    let variant = model.config().variant;
    let group_size = model.config().group_size;
    let mut opt = AdamW::new(&model.params);
    let mut log = TrainLog::default();
    let mut step: u64 = 0;
    let mut consecutive_skips = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        for chunk in order.chunks_exact(batch_size) {
            let batch_pairs: Vec<_> = chunk.iter().map(|&i| pairs[i]).collect();
            let step_seed = derive_seed(cfg.seed, &[epoch as u64, step]);
            let fps = if cfg.deterministic {
                FpsMode::Deterministic
            } else {
                FpsMode::Seeded(derive_seed(step_seed, &[1]))
            };
            let batch = TrainBatch::new(model.config(), &batch_pairs, &cfg.masks(step_seed), fps)?;
            let mut g = Graph::new(step_seed);
            let bundle = model.full_forward(&mut g, &batch)?;
            let (loss, losses) = overall(&mut g, &bundle, &cfg.loss, variant, group_size)?;
            let grads = g.backward(loss)?;
            model.params.zero_grad();
            grads.apply_to(&mut model.params)?;
            if opt.step(&mut model.params, lr, &cfg.adam)? && losses.is_finite() {
                consecutive_skips = 0;
            } else {
                consecutive_skips += 1;
                if consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::NonFinite {
                        index: step as usize,
                        context: format!("{consecutive_skips} consecutive non-finite training steps"),
                    });
                }
            }
            let rec = StepRecord {
                step,
                epoch,
                lr,
                losses,
                wall_time: start.elapsed().as_secs_f64(),
            };
            if let Some(w) = sink.as_mut() {
                write_record(w, &rec)?;
            }
            log.records.push(rec);
            step += 1;
        }
        if let Some(r) = log.last() {
            info!(
                "epoch {epoch}: lr {lr:.2e} overall {:.4} contrastive {:.4}",
                r.losses.overall,
                r.losses.contrastive()
            );
        }
    }
    model.params.zero_grad();
    Ok((log, opt.skipped()))
}
