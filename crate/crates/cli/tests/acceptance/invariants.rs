//! Property checks of the loss functions.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use cmah_core::data::SyntheticSpec;
use cmah_core::diffcore::{Graph, Tensor};
use cmah_core::geometry::{self, Point};
use cmah_core::losses::{self, nce_unit, ContrastTerm, ContrastiveBatch, LossConfig, Similarity};
use cmah_core::model::{CmahModel, FpsMode, ModelConfig, TrainBatch};
use cmah_core::tokenizer::MaskSpec;

use crate::Outcome;

fn vecs(n: std::ops::Range<usize>, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, k), n)
}

fn cloud(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), n)
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

/// Rotation matrix from a (not necessarily unit) quaternion.
fn rotation(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(r: &[[f64; 3]; 3], pts: &[Point]) -> Vec<Point> {
    pts.iter()
        .map(|p| [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]))
        .collect()
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn nonnegative() -> Result<(), String> {
    let strat = (vecs(2..10, 6), 0.05f64..2.0, any::<bool>());
    runner(256)
        .run(&strat, |(v, tau, cosine)| {
            let sim = if cosine { Similarity::Cosine } else { Similarity::Dot };
            let negs: Vec<&[f64]> = v[2..].iter().map(Vec::as_slice).collect();
            let l = nce_unit(&v[0], &v[1], &negs, tau, sim).unwrap();
            prop_assert!(l >= 0.0, "nce {l}");
            Ok(())
        })
        .map_err(|e| format!("nce_unit: {e}"))?;
    let strat = (vecs(8..9, 5), vecs(8..9, 5), 0.05f64..1.0);
    runner(64)
        .run(&strat, |(a, b, tau)| {
            let (a, b) = (tensor(&a), tensor(&b));
            let batch = ContrastiveBatch::new(a.clone(), b.clone(), b.clone(), a, tau).unwrap();
            for term in ContrastTerm::ALL {
                let l = batch.term(term).unwrap();
                prop_assert!(l >= 0.0, "{term:?} {l}");
            }
            Ok(())
        })
        .map_err(|e| format!("contrastive terms: {e}"))
}

fn single_pair_zero() -> Result<(), String> {
    let strat = (vecs(4..5, 7), 0.05f64..2.0);
    runner(128)
        .run(&strat, |(v, tau)| {
            let t: Vec<Tensor> = v.iter().map(|r| tensor(std::slice::from_ref(r))).collect();
            let batch = ContrastiveBatch::new(t[0].clone(), t[1].clone(), t[2].clone(), t[3].clone(), tau).unwrap();
            for term in ContrastTerm::ALL {
                let l = batch.term(term).unwrap();
                prop_assert!(l.abs() < 1e-12, "{term:?} = {l} at B = 1");
            }
            Ok(())
        })
        .map_err(|e| format!("B = 1: {e}"))
}

fn unmasked_contrast_triples() -> Result<(), String> {
    let cfg = ModelConfig::desk();
    let mut worst: f64 = 0.0;
    for seed in 0..4u64 {
        let model = CmahModel::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let data = SyntheticSpec::new(8, 1, 40 + seed).unwrap().generate().unwrap();
        let refs: Vec<_> = data.iter().map(|r| (&r.cloud, &r.image)).collect();
        let masks = MaskSpec {
            ratio_image: 0.0,
            ratio_point: 0.0,
            seed,
        };
        let batch = TrainBatch::new(&cfg, &refs, &masks, FpsMode::Seeded(seed)).map_err(|e| e.to_string())?;
        let mut g = Graph::inference(0);
        let bundle = model.full_forward(&mut g, &batch).map_err(|e| e.to_string())?;
        let (_, br) = losses::overall(&mut g, &bundle, &LossConfig::default(), cfg.variant, cfg.group_size).map_err(|e| e.to_string())?;
        let rel = (br.contrastive() - 3.0 * br.ff).abs() / br.ff.abs().max(1e-12);
        worst = worst.max(rel);
        if rel > 1e-9 {
            return Err(format!("ratio 0: L_c {} vs 3 L_ff {}", br.contrastive(), 3.0 * br.ff));
        }
    }
    log::debug!("ratio-0 worst relative gap {worst:e}");
    Ok(())
}

fn chamfer_laws() -> Result<(), String> {
    let strat = (cloud(1..40), cloud(1..40), prop::array::uniform4(-1.0f64..1.0));
    runner(256)
        .run(&strat, |(a, b, q)| {
            let ab = geometry::chamfer(&a, &b).unwrap();
            let ba = geometry::chamfer(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0), "symmetry {ab} vs {ba}");
            prop_assert_eq!(geometry::chamfer(&a, &a).unwrap(), 0.0);
            prop_assert!(ab >= 0.0);
            if q.iter().map(|v| v * v).sum::<f64>() < 1e-3 {
                return Err(TestCaseError::reject("degenerate quaternion"));
            }
            let r = rotation(q);
            let rot = geometry::chamfer(&rotate(&r, &a), &rotate(&r, &b)).unwrap();
            prop_assert!((rot - ab).abs() <= 1e-9 * ab.max(1.0), "rotation {ab} vs {rot}");
            Ok(())
        })
        .map_err(|e| format!("chamfer: {e}"))
}

fn mse_offset() -> Result<(), String> {
    let strat = (vecs(1..12, 9), -3.0f64..3.0);
    runner(256)
        .run(&strat, |(rows, delta)| {
            let target = tensor(&rows);
            let shifted = Tensor::new(target.shape().to_vec(), target.data().iter().map(|v| v + delta).collect()).unwrap();
            let mut g = Graph::inference(0);
            let (p, t) = (g.constant(shifted), g.constant(target));
            let l = losses::recon_2d(&mut g, p, t).unwrap();
            let l = g.value(l).item();
            prop_assert!(
                (l - delta * delta).abs() <= 1e-12 * (1.0 + delta * delta),
                "{l} vs {}",
                delta * delta
            );
            Ok(())
        })
        .map_err(|e| format!("mse offset: {e}"))
}

type Check = fn() -> Result<(), String>;

pub fn run() -> Outcome {
    let checks: [(&str, Check); 5] = [
        ("loss >= 0", nonnegative),
        ("B=1 contrast = 0", single_pair_zero),
        ("ratio 0 => L_c = 3 L_ff", unmasked_contrast_triples),
        ("chamfer symmetry/zero/rotation", chamfer_laws),
        ("MSE offset = delta^2", mse_offset),
    ];
    let mut failures = Vec::new();
    for (name, f) in checks {
        if let Err(e) = f() {
            failures.push(format!("{name}: {e}"));
        }
    }
    if failures.is_empty() {
        Outcome::new(true, checks.map(|c| c.0).join(", "))
    } else {
        Outcome::new(false, failures.join("; "))
    }
}
