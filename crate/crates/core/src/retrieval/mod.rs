//! Hamming-space retrieval: packed codes, popcount distance, ranked search
//! and the mAP@k / precision@k metrics.
//!
//! Code file layout, all integers little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic | `b"CMAHCODE"` |
//! | version | u16 (currently 1) |
//! | K | u16 |
//! | count | u64 |
//! | modality | u8 (0 image, 1 point) |
//! | labels present | u8 (0 or 1) |
//! | codes | count × ⌈K/64⌉ u64 words |
//! | labels | count × u32, only if present |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Modality;

pub const MAGIC: &[u8; 8] = b"CMAHCODE";
pub const FORMAT_VERSION: u16 = 1;

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Pack a `{-1, +1}` code; bit `j` of the result is set iff `b[j] == +1`.
pub fn pack(b: &[i8]) -> Result<Vec<u64>> {
    let mut words = vec![0u64; words_for(b.len())];
    for (j, &v) in b.iter().enumerate() {
        match v {
            1 => words[j / 64] |= 1 << (j % 64),
            -1 => {}
            _ => return Err(Error::invalid(format!("code entry {j} is {v}, expected ±1"))),
        }
    }
    Ok(words)
}

pub fn unpack(words: &[u64], bits: usize) -> Vec<i8> {
    (0..bits).map(|j| if words[j / 64] >> (j % 64) & 1 == 1 { 1 } else { -1 }).collect()
}

/// Number of differing bits.
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Immutable set of packed codes with optional class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeDatabase {
    bits: usize,
    words: Vec<u64>,
    labels: Option<Vec<u32>>,
    modality: Modality,
}

impl CodeDatabase {
    pub fn from_codes(bits: usize, codes: &[Vec<i8>], labels: Option<Vec<u32>>, modality: Modality) -> Result<Self> {
        if bits == 0 || bits > u16::MAX as usize {
            return Err(Error::invalid(format!("code length {bits} out of range")));
        }
        let mut words = Vec::with_capacity(codes.len() * words_for(bits));
        for (i, c) in codes.iter().enumerate() {
            if c.len() != bits {
                return Err(Error::invalid(format!("code {i} has {} bits, expected {bits}", c.len())));
            }
            words.extend(pack(c)?);
        }
        Self::from_words(bits, words, labels, modality)
    }

    pub fn from_words(bits: usize, words: Vec<u64>, labels: Option<Vec<u32>>, modality: Modality) -> Result<Self> {
        let w = words_for(bits);
        if bits == 0 || words.len() % w != 0 {
            return Err(Error::invalid(format!("{} words do not hold whole {bits}-bit codes", words.len())));
        }
        let count = words.len() / w;
        if bits % 64 != 0 {
            let spare = !0u64 << (bits % 64);
            if let Some(i) = (0..count).find(|i| words[i * w + w - 1] & spare != 0) {
                return Err(Error::invalid(format!("code {i} has bits set beyond K = {bits}")));
            }
        }
        if let Some(l) = &labels {
            if l.len() != count {
                return Err(Error::invalid(format!("{} labels for {count} codes", l.len())));
            }
        }
        Ok(Self {
            bits,
            words,
            labels,
            modality,
        })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.words.len() / words_for(self.bits)
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn code(&self, i: usize) -> &[u64] {
        let w = words_for(self.bits);
        &self.words[i * w..(i + 1) * w]
    }

    pub fn unpack(&self, i: usize) -> Vec<i8> {
        unpack(self.code(i), self.bits)
    }

    fn require_labels(&self, side: &str) -> Result<&[u32]> {
        self.labels().ok_or_else(|| Error::invalid(format!("{side} codes carry no labels")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u16::<LE>(FORMAT_VERSION)?;
        w.write_u16::<LE>(self.bits as u16)?;
        w.write_u64::<LE>(self.len() as u64)?;
        w.write_u8(self.modality.code())?;
        w.write_u8(self.labels.is_some() as u8)?;
        for &x in &self.words {
            w.write_u64::<LE>(x)?;
        }
        if let Some(l) = &self.labels {
            for &x in l {
                w.write_u32::<LE>(x)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format(format!(
                "bad code file magic {:?}, expected \"CMAHCODE\"",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = r.read_u16::<LE>()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported code file version {version}")));
        }
        let bits = r.read_u16::<LE>()? as usize;
        let count = r.read_u64::<LE>()? as usize;
        let modality = Modality::from_code(r.read_u8()?)?;
        let has_labels = match r.read_u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::format(format!("labels flag must be 0 or 1, got {v}"))),
        };
        if bits == 0 {
            return Err(Error::format("code length is zero"));
        }
        let mut words = vec![0u64; count * words_for(bits)];
        r.read_u64_into::<LE>(&mut words)?;
        let labels = if has_labels {
            let mut l = vec![0u32; count];
            r.read_u32_into::<LE>(&mut l)?;
            Some(l)
        } else {
            None
        };
        Self::from_words(bits, words, labels, modality).map_err(|e| Error::format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// `(entry id, distance)` pairs ordered by distance, then id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedResult {
    pub entries: Vec<(usize, u32)>,
}

fn check_bits(query: &[u64], db: &CodeDatabase) -> Result<()> {
    if query.len() != words_for(db.bits) {
        return Err(Error::invalid(format!(
            "query has {} words, database codes have {}",
            query.len(),
            words_for(db.bits)
        )));
    }
    Ok(())
}

/// Counting sort over the `K + 1` possible distances. Ids within a bucket
/// stay ascending because the scan is in id order.
fn rank(query: &[u64], db: &CodeDatabase, topk: usize, exclude: Option<usize>) -> RankedResult {
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); db.bits + 1];
    for i in 0..db.len() {
        if Some(i) != exclude {
            buckets[hamming(query, db.code(i)) as usize].push(i);
        }
    }
    let entries = buckets
        .iter()
        .enumerate()
        .flat_map(|(d, ids)| ids.iter().map(move |&i| (i, d as u32)))
        .take(topk)
        .collect();
    RankedResult { entries }
}

/// Top-`topk` entries of `db` nearest to `query`.
pub fn search(query: &[u64], db: &CodeDatabase, topk: usize) -> Result<RankedResult> {
    check_bits(query, db)?;
    Ok(rank(query, db, topk, None))
}

/// Full scan and comparison sort; the slow reference for [`search`].
pub fn search_reference(query: &[u64], db: &CodeDatabase, topk: usize) -> Result<RankedResult> {
    check_bits(query, db)?;
    let mut all: Vec<(usize, u32)> = (0..db.len()).map(|i| (i, hamming(query, db.code(i)))).collect();
    all.sort_by_key(|&(i, d)| (d, i));
    all.truncate(topk);
    Ok(RankedResult { entries: all })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Drop gallery entry `i` when ranking for query `i`. Entry index is the
    /// pair id, so this removes the query's own aligned partner.
    pub exclude_same_pair: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { exclude_same_pair: true }
    }
}

fn prepare<'a>(queries: &'a CodeDatabase, gallery: &'a CodeDatabase) -> Result<(&'a [u32], &'a [u32])> {
    if queries.bits != gallery.bits {
        return Err(Error::invalid(format!(
            "query codes have K = {}, gallery codes K = {}",
            queries.bits, gallery.bits
        )));
    }
    Ok((queries.require_labels("query")?, gallery.require_labels("gallery")?))
}

/// Average precision of one ranked list truncated at `k`, with
/// `min(k, R_total)` in the denominator. `None` when nothing is relevant.
fn average_precision(ranked: &RankedResult, label: u32, gallery: &[u32], r_total: usize, k: usize) -> Option<f64> {
    if r_total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &(id, _)) in ranked.entries.iter().take(k).enumerate() {
        if gallery[id] == label {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Some(sum / k.min(r_total) as f64)
}

/// Mean over queries with at least one relevant gallery entry of AP@k.
pub fn map_at_k(queries: &CodeDatabase, gallery: &CodeDatabase, k: usize, opts: EvalOptions) -> Result<f64> {
    let (ql, gl) = prepare(queries, gallery)?;
    if k == 0 {
        return Err(Error::invalid("mAP cutoff k must be ≥ 1"));
    }
    let aps: Vec<Option<f64>> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let exclude = opts.exclude_same_pair.then_some(q).filter(|&i| i < gallery.len());
            let r_total = gl.iter().enumerate().filter(|&(i, &l)| l == ql[q] && Some(i) != exclude).count();
            let ranked = rank(queries.code(q), gallery, k, exclude);
            average_precision(&ranked, ql[q], gl, r_total, k)
        })
        .collect();
    let valid: Vec<f64> = aps.into_iter().flatten().collect();
    if valid.is_empty() {
        return Ok(0.0);
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

/// `(k, mean precision@k)` for every cutoff in `ks`.
pub fn precision_curve(queries: &CodeDatabase, gallery: &CodeDatabase, ks: &[usize], opts: EvalOptions) -> Result<Vec<(usize, f64)>> {
    let (ql, gl) = prepare(queries, gallery)?;
    if ks.contains(&0) {
        return Err(Error::invalid("precision cutoffs must be ≥ 1"));
    }
    if queries.is_empty() {
        return Ok(ks.iter().map(|&k| (k, 0.0)).collect());
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    // Per query, the running relevant count at each rank.
    let hits: Vec<Vec<usize>> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let exclude = opts.exclude_same_pair.then_some(q).filter(|&i| i < gallery.len());
            let ranked = rank(queries.code(q), gallery, kmax, exclude);
            ranked
                .entries
                .iter()
                .scan(0, |n, &(id, _)| {
                    *n += (gl[id] == ql[q]) as usize;
                    Some(*n)
                })
                .collect()
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let total: f64 = hits
                .iter()
                .map(|h| h.get(k - 1).or(h.last()).copied().unwrap_or(0) as f64 / k as f64)
                .sum();
            (k, total / queries.len() as f64)
        })
        .collect())
}
