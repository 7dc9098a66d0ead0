//! Synthetic paired dataset: procedural shapes, depth-splat renders and the
//! `CMAHDS1` container.
//!
//! Container layout, all integers little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic | `b"CMAHDS1"` |
//! | version | u16 (currently 1) |
//! | record count | u64 |
//!
//! then per record: pair id u64, label u32, N u32, N × 3 f32 coordinates,
//! H u16, W u16, H × W × 3 u8 pixels (`round(value · 255)`), azimuth f32,
//! elevation f32.

pub mod shapes;

use std::f64::consts::{FRAC_PI_3, TAU};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize, Point, PointCloud};
use crate::seed::derive_seed;
use crate::tokenizer::ImageGrid;

pub use shapes::{sample_surface, ShapeClass};

pub const MAGIC: &[u8; 7] = b"CMAHDS1";
pub const FORMAT_VERSION: u16 = 1;

/// Half-width of the square splat drawn for each point, in pixels.
pub const SPLAT_RADIUS: usize = 1;

/// Camera direction as azimuth / elevation in radians. Stored at single
/// precision, matching the container.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub azimuth: f32,
    pub elevation: f32,
}

impl Viewpoint {
    /// Orthonormal `(right, up, toward-camera)` basis.
    fn basis(self) -> Result<(Point, Point, Point)> {
        let (a, e) = (self.azimuth as f64, self.elevation as f64);
        if !a.is_finite() || !e.is_finite() || e.cos().abs() < 1e-6 {
            return Err(Error::invalid(format!("degenerate view direction (azimuth {a}, elevation {e})")));
        }
        let dir = [e.cos() * a.cos(), e.cos() * a.sin(), e.sin()];
        let right = [-a.sin(), a.cos(), 0.0];
        let up = [
            dir[1] * right[2] - dir[2] * right[1],
            dir[2] * right[0] - dir[0] * right[2],
            dir[0] * right[1] - dir[1] * right[0],
        ];
        Ok((right, up, dir))
    }
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Orthographic depth-buffered splat render of a unit-sphere cloud.
///
/// The view plane spans `[-1, 1]²`, so the origin lands on pixel
/// `(height / 2, width / 2)`. The point closest to the camera wins each pixel
/// and is shaded `0.2 + 0.8 · (depth + 1) / 2`; empty pixels stay 0.
pub fn render(cloud: &PointCloud, view: Viewpoint, height: usize, width: usize) -> Result<ImageGrid> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("render target must be non-empty, got {height}x{width}")));
    }
    let (right, up, dir) = view.basis()?;
    let mut zbuf = vec![f64::NEG_INFINITY; height * width];
    let to_pixel = |t: f64, n: usize| (((t + 1.0) / 2.0 * n as f64).floor().max(0.0) as usize).min(n - 1);
    for &p in cloud.points() {
        let depth = dot(p, dir).clamp(-1.0, 1.0);
        let col = to_pixel(dot(p, right), width);
        let row = to_pixel(-dot(p, up), height);
        let rows = row.saturating_sub(SPLAT_RADIUS)..=(row + SPLAT_RADIUS).min(height - 1);
        for r in rows {
            for c in col.saturating_sub(SPLAT_RADIUS)..=(col + SPLAT_RADIUS).min(width - 1) {
                let z = &mut zbuf[r * width + c];
                if depth > *z {
                    *z = depth;
                }
            }
        }
    }
    let mut img = ImageGrid::zeros(height, width);
    for (i, &z) in zbuf.iter().enumerate() {
        if z.is_finite() {
            img.set_rgb(i / width, i % width, 0.2 + 0.8 * (z + 1.0) / 2.0);
        }
    }
    Ok(img)
}

fn through_f32(points: &[Point]) -> Vec<Point> {
    points.iter().map(|p| p.map(|v| v as f32 as f64)).collect()
}

/// Sample `n` surface points of `class`, add Gaussian jitter, normalize to
/// the unit sphere. Coordinates are rounded to single precision so the
/// container stores them exactly.
pub fn gen_shape(class: ShapeClass, seed: u64, n: usize, jitter: f64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("shape needs at least one point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = sample_surface(class, &mut rng, n);
    shapes::jitter(&mut pts, &mut rng, jitter)?;
    let cloud = normalize(&PointCloud::new(pts)?)?;
    PointCloud::new(through_f32(cloud.points()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: Vec<ShapeClass>,
    pub per_class: usize,
    pub points: usize,
    pub image_size: usize,
    pub seed: u64,
    pub jitter: f64,
    /// Half-open azimuth range in radians.
    pub azimuth: [f64; 2],
    /// Half-open elevation range in radians.
    pub elevation: [f64; 2],
}

impl SyntheticSpec {
    /// `classes` first shapes, desk-preset sizes.
    pub fn new(classes: usize, per_class: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            classes: ShapeClass::first(classes)?,
            per_class,
            points: 256,
            image_size: 32,
            seed,
            jitter: 0.01,
            azimuth: [0.0, TAU],
            elevation: [-FRAC_PI_3, FRAC_PI_3],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.classes.len() * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.per_class == 0 || self.points == 0 || self.image_size == 0 {
            return Err(Error::invalid(
                "synthetic spec needs classes, per-class count, points and image size ≥ 1",
            ));
        }
        if self.image_size > u16::MAX as usize || self.points > u32::MAX as usize {
            return Err(Error::invalid("image size or point count exceeds the container limits"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::invalid(format!("jitter must be finite and ≥ 0, got {}", self.jitter)));
        }
        for (name, [lo, hi]) in [("azimuth", self.azimuth), ("elevation", self.elevation)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("{name} range [{lo}, {hi}) is invalid")));
            }
        }
        let lim = std::f64::consts::FRAC_PI_2;
        if self.elevation[0] <= -lim || self.elevation[1] >= lim {
            return Err(Error::invalid("elevation range must stay strictly inside (-π/2, π/2)"));
        }
        Ok(())
    }

    fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    }

    /// Record `index`: class `classes[index % classes.len()]`, everything
    /// else derived from `(seed, index)`.
    pub fn record(&self, index: usize) -> Result<PairRecord> {
        let class = self.classes[index % self.classes.len()];
        let base = derive_seed(self.seed, &[index as u64]);
        let cloud = gen_shape(class, derive_seed(base, &[0]), self.points, self.jitter)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, &[1]));
        let view = Viewpoint {
            azimuth: Self::draw(&mut rng, self.azimuth) as f32,
            elevation: Self::draw(&mut rng, self.elevation) as f32,
        };
        let img = render(&cloud, view, self.image_size, self.image_size)?;
        Ok(PairRecord {
            pair_id: index as u64,
            label: class as u32,
            cloud,
            image: quantize(&img)?,
            view,
        })
    }

    /// All records, generated in parallel, in index order.
    pub fn generate(&self) -> Result<Vec<PairRecord>> {
        self.validate()?;
        (0..self.len()).into_par_iter().map(|i| self.record(i)).collect()
    }
}

/// Snap every pixel to the nearest multiple of 1/255.
pub fn quantize(img: &ImageGrid) -> Result<ImageGrid> {
    let px = img.pixels().iter().map(|&v| to_u8(v) as f64 / 255.0).collect();
    ImageGrid::new(img.height(), img.width(), px)
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub pair_id: u64,
    /// Class id; for synthetic data the index of the shape in
    /// [`ShapeClass::ALL`].
    pub label: u32,
    pub cloud: PointCloud,
    pub image: ImageGrid,
    pub view: Viewpoint,
}

/// Anything that yields paired records. Real-dataset loaders (a directory of
/// point-cloud / rendered-image pairs) plug in here.
pub trait PairSource {
    fn load(&self) -> Result<Vec<PairRecord>>;
}

impl PairSource for SyntheticSpec {
    fn load(&self) -> Result<Vec<PairRecord>> {
        self.generate()
    }
}

/// A dataset container on disk.
#[derive(Clone, Debug)]
pub struct DatasetFile(pub PathBuf);

impl PairSource for DatasetFile {
    fn load(&self) -> Result<Vec<PairRecord>> {
        read_dataset(&self.0)
    }
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::format(format!("{what} {v} exceeds the container limit")))
}

pub fn write_records<W: Write>(records: &[PairRecord], mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u16::<LE>(FORMAT_VERSION)?;
    w.write_u64::<LE>(records.len() as u64)?;
    for r in records {
        w.write_u64::<LE>(r.pair_id)?;
        w.write_u32::<LE>(r.label)?;
        w.write_u32::<LE>(narrow(r.cloud.len(), "point count")?)?;
        for p in r.cloud.points() {
            for &c in p {
                w.write_f32::<LE>(c as f32)?;
            }
        }
        w.write_u16::<LE>(narrow(r.image.height(), "image height")?)?;
        w.write_u16::<LE>(narrow(r.image.width(), "image width")?)?;
        let px: Vec<u8> = r.image.pixels().iter().map(|&v| to_u8(v)).collect();
        w.write_all(&px)?;
        w.write_f32::<LE>(r.view.azimuth)?;
        w.write_f32::<LE>(r.view.elevation)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<PairRecord>> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad dataset magic {:?}, expected \"CMAHDS1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.read_u16::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let count = r.read_u64::<LE>()?;
    let mut out = Vec::new();
    for i in 0..count {
        let pair_id = r.read_u64::<LE>()?;
        let label = r.read_u32::<LE>()?;
        let n = r.read_u32::<LE>()? as usize;
        let mut coords = vec![0f32; n * 3];
        r.read_f32_into::<LE>(&mut coords)?;
        let points = coords.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
        let cloud = PointCloud::new(points).map_err(|e| Error::format(format!("record {i}: {e}")))?;
        let h = r.read_u16::<LE>()? as usize;
        let w = r.read_u16::<LE>()? as usize;
        let mut px = vec![0u8; h * w * 3];
        r.read_exact(&mut px)?;
        let image =
            ImageGrid::new(h, w, px.iter().map(|&b| b as f64 / 255.0).collect()).map_err(|e| Error::format(format!("record {i}: {e}")))?;
        let view = Viewpoint {
            azimuth: r.read_f32::<LE>()?,
            elevation: r.read_f32::<LE>()?,
        };
        out.push(PairRecord {
            pair_id,
            label,
            cloud,
            image,
            view,
        });
    }
    Ok(out)
}

pub fn write_dataset(records: &[PairRecord], path: &Path) -> Result<()> {
    write_records(records, BufWriter::new(File::create(path)?))
}

pub fn read_dataset(path: &Path) -> Result<Vec<PairRecord>> {
    read_records(BufReader::new(File::open(path)?))
}
