//! Checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic | `b"CMAHCKPT"` |
//! | format version | u16 (currently 1) |
//! | header length | u32 |
//! | header | UTF-8 JSON: `{"format_version", "seed", "config"}` |
//! | tensor count | u32 |
//!
//! followed by one record per parameter in registration order: name length
//! u16, UTF-8 name, rank u8, rank × u32 extents, then the values as f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{CmahModel, ModelConfig};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CMAHCKPT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u16,
    pub seed: u64,
    pub config: ModelConfig,
}

pub fn write_to<W: Write>(model: &CmahModel, mut w: W) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        seed: model.seed(),
        config: model.config().clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    w.write_all(MAGIC)?;
    w.write_u16::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(json.len() as u32)?;
    w.write_all(&json)?;
    w.write_u32::<LE>(model.params.len() as u32)?;
    for (_, p) in model.params.iter() {
        w.write_u16::<LE>(p.name.len() as u16)?;
        w.write_all(p.name.as_bytes())?;
        w.write_u8(p.shape.len() as u8)?;
        for &d in &p.shape {
            w.write_u32::<LE>(d as u32)?;
        }
        for &v in p.value()?.data() {
            w.write_f64::<LE>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_header<R: Read>(r: &mut R) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            std::str::from_utf8(MAGIC).unwrap_or_default()
        )));
    }
    let version = r.read_u16::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.read_u32::<LE>()? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    serde_json::from_slice(&json).map_err(|e| Error::format(format!("checkpoint header: {e}")))
}

pub fn read_from<R: Read>(mut r: R) -> Result<CmahModel> {
    let header = read_header(&mut r)?;
    let mut model = CmahModel::layout(header.config)?;
    model.seed = header.seed;
    let count = r.read_u32::<LE>()? as usize;
    if count != model.params.len() {
        return Err(Error::format(format!(
            "checkpoint holds {count} tensors, configuration needs {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let len = r.read_u16::<LE>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let rank = r.read_u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LE>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        r.read_f64_into::<LE>(&mut data)?;
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::format(format!("unknown tensor {name:?} in checkpoint")))?;
        let t = Tensor::new(shape, data).map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
        model
            .params
            .set_value(id, t)
            .map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
    }
    if !model.params.is_materialized() {
        return Err(Error::format("checkpoint is missing tensors"));
    }
    Ok(model)
}

pub fn save(model: &CmahModel, path: &Path) -> Result<()> {
    write_to(model, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<CmahModel> {
    read_from(BufReader::new(File::open(path)?))
}
