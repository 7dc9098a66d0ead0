//! write -> read -> write byte identity for the three on-disk containers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmah_core::data::{self, PairRecord, SyntheticSpec, Viewpoint};
use cmah_core::geometry::PointCloud;
use cmah_core::model::{checkpoint, CmahModel, ModelConfig, Variant};
use cmah_core::retrieval::CodeDatabase;
use cmah_core::tokenizer::ImageGrid;
use cmah_core::Modality;

use crate::Outcome;

fn dataset() -> Result<String, String> {
    let mut spec = SyntheticSpec::new(8, 3, 17).unwrap();
    spec.points = 128;
    let records = spec.generate().map_err(|e| e.to_string())?;
    let mut first = Vec::new();
    data::write_records(&records, &mut first).map_err(|e| e.to_string())?;
    let back = data::read_records(&first[..]).map_err(|e| e.to_string())?;
    let mut second = Vec::new();
    data::write_records(&back, &mut second).map_err(|e| e.to_string())?;
    if first != second || back != records {
        return Err("generated dataset changed across write/read/write".into());
    }

    // Arbitrary pixels are quantized on the first write only.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rec = PairRecord {
        pair_id: 9,
        label: 2,
        cloud: PointCloud::new((0..50).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap(),
        image: ImageGrid::new(6, 6, (0..108).map(|_| rng.gen()).collect()).unwrap(),
        view: Viewpoint {
            azimuth: 1.0,
            elevation: 0.25,
        },
    };
    let mut a = Vec::new();
    data::write_records(std::slice::from_ref(&rec), &mut a).map_err(|e| e.to_string())?;
    let once = data::read_records(&a[..]).map_err(|e| e.to_string())?;
    let mut b = Vec::new();
    data::write_records(&once, &mut b).map_err(|e| e.to_string())?;
    if a != b {
        return Err("quantized dataset not stable on second write".into());
    }
    Ok(format!("dataset {} bytes", first.len()))
}

fn codes() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sizes = Vec::new();
    for (bits, labeled) in [(16, true), (32, false), (64, true)] {
        let codes: Vec<Vec<i8>> = (0..57)
            .map(|_| (0..bits).map(|_| if rng.gen() { 1 } else { -1 }).collect())
            .collect();
        let labels = labeled.then(|| (0..57).map(|i| i % 8).collect());
        let db = CodeDatabase::from_codes(bits, &codes, labels, Modality::Image).map_err(|e| e.to_string())?;
        let mut first = Vec::new();
        db.write_to(&mut first).map_err(|e| e.to_string())?;
        let back = CodeDatabase::read_from(&first[..]).map_err(|e| e.to_string())?;
        let mut second = Vec::new();
        back.write_to(&mut second).map_err(|e| e.to_string())?;
        if first != second || back != db {
            return Err(format!("{bits}-bit code file changed"));
        }
        sizes.push(first.len().to_string());
    }
    Ok(format!("codes {} bytes", sizes.join("/")))
}

fn checkpoints() -> Result<String, String> {
    let mut sizes = Vec::new();
    for (variant, bits) in [(Variant::Full, 16), (Variant::NoFusion, 32), (Variant::NoReconstruction, 64)] {
        let model = CmahModel::new(ModelConfig::desk().with_bits(bits).with_variant(variant), 6).map_err(|e| e.to_string())?;
        let mut first = Vec::new();
        checkpoint::write_to(&model, &mut first).map_err(|e| e.to_string())?;
        let back = checkpoint::read_from(&first[..]).map_err(|e| e.to_string())?;
        let mut second = Vec::new();
        checkpoint::write_to(&back, &mut second).map_err(|e| e.to_string())?;
        if first != second {
            return Err(format!("{variant:?} checkpoint changed"));
        }
        sizes.push(first.len().to_string());
    }
    Ok(format!("checkpoints {} bytes", sizes.join("/")))
}

pub fn run() -> Outcome {
    let results = [dataset(), codes(), checkpoints()];
    let passed = results.iter().all(Result::is_ok);
    let detail = results
        .iter()
        .map(|r| match r {
            Ok(s) => s.clone(),
            Err(e) => format!("error: {e}"),
        })
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(passed, detail)
}
