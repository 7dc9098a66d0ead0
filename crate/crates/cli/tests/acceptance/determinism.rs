//! Repeat runs with fixed seeds must agree bit for bit.

use std::path::Path;
use std::process::Command;

use cmah_cli::RunManifest;
use cmah_core::data::{self, SyntheticSpec};
use cmah_core::model::{checkpoint, CmahModel, ModelConfig, Samples};
use cmah_core::trainer::{train, TrainConfig, TrainLog, TrainOutputs};

use crate::Outcome;

struct LibRun {
    log: TrainLog,
    ckpt: Vec<u8>,
    codes: Vec<Vec<i8>>,
    dataset: Vec<u8>,
}

fn library_run(dir: &Path) -> Result<LibRun, String> {
    let mut spec = SyntheticSpec::new(8, 2, 77).unwrap();
    spec.points = 256;
    let records = spec.generate().map_err(|e| e.to_string())?;
    let ds = dir.join("d.ds");
    data::write_dataset(&records, &ds).map_err(|e| e.to_string())?;
    let records = data::read_dataset(&ds).map_err(|e| e.to_string())?;
    let mut model = CmahModel::new(ModelConfig::desk(), 3).map_err(|e| e.to_string())?;
    let mut tc = TrainConfig::desk();
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.seed = 3;
    let pairs: Vec<_> = records.iter().map(|r| (&r.cloud, &r.image)).collect();
    let outputs = TrainOutputs {
        log: Some(dir.join("log.jsonl")),
        checkpoint: Some(dir.join("m.ckpt")),
    };
    train(&mut model, &pairs, &tc, &outputs).map_err(|e| e.to_string())?;
    let reloaded = checkpoint::load(&dir.join("m.ckpt")).map_err(|e| e.to_string())?;
    let imgs: Vec<_> = records.iter().map(|r| &r.image).collect();
    Ok(LibRun {
        log: TrainLog::read_jsonl(&dir.join("log.jsonl")).map_err(|e| e.to_string())?,
        ckpt: std::fs::read(dir.join("m.ckpt")).map_err(|e| e.to_string())?,
        codes: reloaded.encode_for_retrieval(Samples::Images(&imgs)).map_err(|e| e.to_string())?,
        dataset: std::fs::read(&ds).map_err(|e| e.to_string())?,
    })
}

fn library() -> Result<String, String> {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (x, y) = (library_run(a.path())?, library_run(b.path())?);
    let mut diffs = Vec::new();
    if !x.log.same_values(&y.log) {
        diffs.push("train log");
    }
    if x.ckpt != y.ckpt {
        diffs.push("checkpoint");
    }
    if x.codes != y.codes {
        diffs.push("codes");
    }
    if x.dataset != y.dataset {
        diffs.push("dataset");
    }
    if diffs.is_empty() {
        Ok(format!(
            "library: {} log records, checkpoint, codes, dataset identical",
            x.log.records.len()
        ))
    } else {
        Err(format!("library runs differ in {}", diffs.join(", ")))
    }
}

const CLI_STEPS: &[&[&str]] = &[
    &["gen-data", "--classes", "4", "--per-class", "2", "--seed", "5", "--out", "d.ds"],
    &[
        "train",
        "--data",
        "d.ds",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--seed",
        "5",
        "--deterministic",
        "--out-dir",
        "run",
    ],
    &[
        "encode",
        "--ckpt",
        "run/model.ckpt",
        "--data",
        "d.ds",
        "--modality",
        "image",
        "--out",
        "i.codes",
    ],
    &[
        "encode",
        "--ckpt",
        "run/model.ckpt",
        "--data",
        "d.ds",
        "--modality",
        "point",
        "--out",
        "p.codes",
    ],
    &[
        "eval",
        "--query-codes",
        "i.codes",
        "--gallery-codes",
        "p.codes",
        "--map-k",
        "8",
        "--format",
        "csv",
        "--out",
        "r.csv",
    ],
];

const OUTPUTS: &[&str] = &["d.ds", "run/model.ckpt", "run/train_log.jsonl", "i.codes", "p.codes", "r.csv"];
const MANIFESTS: &[&str] = &[
    "d.ds.manifest.json",
    "run/manifest.json",
    "i.codes.manifest.json",
    "p.codes.manifest.json",
    "r.csv.manifest.json",
];

fn cli_run(dir: &Path) -> Result<(), String> {
    for args in CLI_STEPS {
        let out = Command::new(env!("CARGO_BIN_EXE_cmah"))
            .args(*args)
            .current_dir(dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn strip_times(log: &str) -> Vec<serde_json::Value> {
    log.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["wall_time"] = serde_json::Value::Null;
            v
        })
        .collect()
}

fn cli() -> Result<String, String> {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cli_run(a.path())?;
    cli_run(b.path())?;
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).map_err(|e| format!("{f}: {e}"));
    let mut diffs = Vec::new();
    for f in OUTPUTS {
        let (x, y) = (read(a.path(), f)?, read(b.path(), f)?);
        let same = if f.ends_with(".jsonl") {
            strip_times(&String::from_utf8_lossy(&x)) == strip_times(&String::from_utf8_lossy(&y))
        } else {
            x == y
        };
        if !same {
            diffs.push(f.to_string());
        }
    }
    for f in MANIFESTS {
        let mut x = RunManifest::read(&a.path().join(f)).map_err(|e| e.to_string())?;
        let mut y = RunManifest::read(&b.path().join(f)).map_err(|e| e.to_string())?;
        x.wall_time_secs = 0.0;
        y.wall_time_secs = 0.0;
        if x != y {
            diffs.push(f.to_string());
        }
    }
    if diffs.is_empty() {
        Ok(format!(
            "cli: {} outputs and {} manifests identical",
            OUTPUTS.len(),
            MANIFESTS.len()
        ))
    } else {
        Err(format!("cli runs differ in {}", diffs.join(", ")))
    }
}

pub fn run() -> Outcome {
    let results = [library(), cli()];
    let passed = results.iter().all(Result::is_ok);
    let detail = results
        .into_iter()
        .map(|r| r.unwrap_or_else(|e| format!("error: {e}")))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(passed, detail)
}
