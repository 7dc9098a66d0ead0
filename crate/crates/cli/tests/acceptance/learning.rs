//! Desk-scale learning protocol shared by the end-to-end and ablation
//! criteria: 8 classes x 50 training pairs, 8 x 25 held-out pairs used as
//! both query and gallery, K = 16, 60 epochs, three seeds.

use std::time::Instant;

use cmah_core::data::{PairRecord, SyntheticSpec};
use cmah_core::model::{CmahModel, ModelConfig, Samples, Variant};
use cmah_core::retrieval::{map_at_k, CodeDatabase, EvalOptions};
use cmah_core::trainer::{train, TrainConfig, TrainOutputs};
use cmah_core::Modality;

use crate::Outcome;

const SEEDS: [u64; 3] = [0, 1, 2];
const BITS: usize = 16;
const MAP_K: usize = 100;
const EPOCHS: usize = 60;
const TARGET: f64 = 0.45;
const UNTRAINED: (f64, f64) = (0.08, 0.18);
const TIME_LIMIT_SECS: f64 = 30.0 * 60.0;

#[derive(Clone, Copy, Debug)]
pub struct Scores {
    pub i2p: f64,
    pub p2i: f64,
}

impl Scores {
    fn mean(self) -> f64 {
        (self.i2p + self.p2i) / 2.0
    }
}

impl std::fmt::Display for Scores {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}/{:.3}", self.i2p, self.p2i)
    }
}

pub struct SeedRuns {
    pub seed: u64,
    pub untrained: Scores,
    /// Trained scores and wall time per variant, in `Variant::ALL` order.
    pub trained: Vec<(Variant, Scores, f64)>,
}

impl SeedRuns {
    fn get(&self, v: Variant) -> Scores {
        self.trained
            .iter()
            .find(|t| t.0 == v)
            .map(|t| t.1)
            .expect("every variant is trained")
    }
}

fn evaluate(model: &CmahModel, set: &[PairRecord]) -> Scores {
    let imgs: Vec<_> = set.iter().map(|r| &r.image).collect();
    let pts: Vec<_> = set.iter().map(|r| &r.cloud).collect();
    let labels: Vec<u32> = set.iter().map(|r| r.label).collect();
    let ic = model.encode_for_retrieval(Samples::Images(&imgs)).unwrap();
    let pc = model.encode_for_retrieval(Samples::Points(&pts)).unwrap();
    let idb = CodeDatabase::from_codes(BITS, &ic, Some(labels.clone()), Modality::Image).unwrap();
    let pdb = CodeDatabase::from_codes(BITS, &pc, Some(labels), Modality::Point).unwrap();
    let opts = EvalOptions::default();
    Scores {
        i2p: map_at_k(&idb, &pdb, MAP_K, opts).unwrap(),
        p2i: map_at_k(&pdb, &idb, MAP_K, opts).unwrap(),
    }
}

pub fn run_protocol() -> Vec<SeedRuns> {
    SEEDS
        .iter()
        .map(|&seed| {
            let train_set = SyntheticSpec::new(8, 50, 1000 + seed).unwrap().generate().unwrap();
            let eval_set = SyntheticSpec::new(8, 25, 2000 + seed).unwrap().generate().unwrap();
            let pairs: Vec<_> = train_set.iter().map(|r| (&r.cloud, &r.image)).collect();
            let cfg = ModelConfig::desk().with_bits(BITS);
            let untrained = evaluate(&CmahModel::new(cfg.clone(), seed).unwrap(), &eval_set);
            let trained = Variant::ALL
                .iter()
                .map(|&variant| {
                    let start = Instant::now();
                    let mut model = CmahModel::new(cfg.clone().with_variant(variant), seed).unwrap();
                    let mut tc = TrainConfig::desk();
                    tc.epochs = EPOCHS;
                    tc.seed = seed;
                    train(&mut model, &pairs, &tc, &TrainOutputs::default()).unwrap();
                    let s = evaluate(&model, &eval_set);
                    let secs = start.elapsed().as_secs_f64();
                    eprintln!("  seed {seed} {}: {s} in {secs:.0}s", variant.name());
                    (variant, s, secs)
                })
                .collect();
            SeedRuns { seed, untrained, trained }
        })
        .collect()
}

pub fn end_to_end(runs: &[SeedRuns]) -> Outcome {
    let mut good = 0;
    let mut parts = Vec::new();
    for r in runs {
        let (_, full, secs) = r.trained[0];
        let learned = full.i2p >= TARGET && full.p2i >= TARGET;
        let in_band = |v: f64| (UNTRAINED.0..=UNTRAINED.1).contains(&v);
        let untrained_ok = in_band(r.untrained.i2p) && in_band(r.untrained.p2i);
        let ok = learned && untrained_ok && secs < TIME_LIMIT_SECS;
        good += ok as usize;
        parts.push(format!(
            "seed {}: trained {full} in {secs:.0}s, untrained {}{}",
            r.seed,
            r.untrained,
            if ok { "" } else { " (miss)" }
        ));
    }
    Outcome::new(
        good * 2 > runs.len(),
        format!(
            "mAP@{MAP_K} I->P/P->I, need >= {TARGET} and untrained in [{}, {}] on 2 of 3 seeds; {}",
            UNTRAINED.0,
            UNTRAINED.1,
            parts.join("; ")
        ),
    )
}

pub fn ablation(runs: &[SeedRuns]) -> Outcome {
    let mut good = 0;
    let mut parts = Vec::new();
    for r in runs {
        let [full, nf, nr, nc] = [Variant::Full, Variant::NoFusion, Variant::NoReconstruction, Variant::NoContrastive].map(|v| r.get(v));
        let ordered = full.mean() >= nf.mean() && nf.mean() >= nr.mean();
        let chance = nc.i2p <= UNTRAINED.1 && nc.p2i <= UNTRAINED.1;
        good += (ordered && chance) as usize;
        parts.push(format!(
            "seed {}: full {full} >= no-fusion {nf} >= no-recon {nr}: {}, no-contrastive {nc} near chance: {}",
            r.seed,
            if ordered { "yes" } else { "no" },
            if chance { "yes" } else { "no" }
        ));
    }
    Outcome::new(
        good * 2 > runs.len(),
        format!(
            "ordering by mean of both directions, {good}/{} seeds hold; {}",
            runs.len(),
            parts.join("; ")
        ),
    )
}
