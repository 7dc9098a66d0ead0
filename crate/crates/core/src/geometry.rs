//! Point-cloud kernels: normalization, farthest point sampling, k-NN grouping
//! and the squared-L2 Chamfer distance.
//!
//! Every tie is broken towards the lowest index so results are reproducible
//! and comparable against brute-force references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::kernels::dist2;
use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// A non-empty set of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite {
                index: i,
                context: format!("point {i} has coordinates {:?}", points[i]),
            });
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Largest distance of any point from the origin.
    pub fn max_norm(&self) -> f64 {
        self.points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Center on the centroid and scale so the farthest point has norm 1.
/// A cloud whose points all coincide collapses to the origin.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    let c = cloud.centroid();
    let mut pts: Vec<Point> = cloud.points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let r = pts
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if r > 0.0 {
        for p in &mut pts {
            for v in p.iter_mut() {
                *v /= r;
            }
        }
    } else {
        pts.iter_mut().for_each(|p| *p = [0.0; 3]);
    }
    PointCloud::new(pts)
}

/// How farthest point sampling picks its first center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    /// Always start at index 0 (deterministic / test mode).
    First,
    /// Uniform draw from a seeded generator (training mode).
    Seeded(u64),
}

/// Greedy farthest point sampling of `m` distinct indices.
pub fn fps(cloud: &PointCloud, m: usize, start: FpsStart) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("fps: cannot pick {m} centers from {n} points")));
    }
    let pts = cloud.points();
    let first = match start {
        FpsStart::First => 0,
        FpsStart::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed).gen_range(0..n),
    };
    let mut chosen = vec![false; n];
    let mut min_d: Vec<f64> = pts.iter().map(|p| dist2(p, &pts[first])).collect();
    let mut out = Vec::with_capacity(m);
    out.push(first);
    chosen[first] = true;
    while out.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if !chosen[i] && d > best_d {
                best = i;
                best_d = d;
            }
        }
        chosen[best] = true;
        out.push(best);
        let c = pts[best];
        for (d, p) in min_d.iter_mut().zip(pts) {
            *d = d.min(dist2(p, &c));
        }
    }
    Ok(out)
}

/// Local neighborhoods around sampled centers, stored center-relative.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedCloud {
    pub centers: Vec<Point>,
    /// `centers.len() * k` offsets, group-major.
    pub groups: Vec<Point>,
    pub center_indices: Vec<usize>,
    pub neighbor_indices: Vec<usize>,
    pub k: usize,
}

impl GroupedCloud {
    pub fn num_groups(&self) -> usize {
        self.centers.len()
    }

    pub fn group(&self, g: usize) -> &[Point] {
        &self.groups[g * self.k..(g + 1) * self.k]
    }

    /// Group offsets flattened to `[groups, k, 3]` order.
    pub fn flat_groups(&self) -> Vec<f64> {
        self.groups.iter().flatten().copied().collect()
    }

    pub fn flat_centers(&self) -> Vec<f64> {
        self.centers.iter().flatten().copied().collect()
    }
}

/// The `k` nearest source points of each center (the center itself
/// included), nearest first.
pub fn knn_group(cloud: &PointCloud, centers: &[usize], k: usize) -> Result<GroupedCloud> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("knn_group: k={k} with {n} points")));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::invalid(format!("knn_group: center index {bad} out of range")));
    }
    let pts = cloud.points();
    let mut groups = Vec::with_capacity(centers.len() * k);
    let mut neighbor_indices = Vec::with_capacity(centers.len() * k);
    let mut order: Vec<usize> = (0..n).collect();
    let mut dist = vec![0.0; n];
    for &ci in centers {
        let c = pts[ci];
        for (d, p) in dist.iter_mut().zip(pts) {
            *d = dist2(p, &c);
        }
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        let key = |a: &usize, b: &usize| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b));
        if k < n {
            order.select_nth_unstable_by(k - 1, key);
        }
        order[..k].sort_unstable_by(key);
        for &j in &order[..k] {
            let p = pts[j];
            groups.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            neighbor_indices.push(j);
        }
    }
    Ok(GroupedCloud {
        centers: centers.iter().map(|&i| pts[i]).collect(),
        groups,
        center_indices: centers.to_vec(),
        neighbor_indices,
        k,
    })
}

/// Squared-L2 symmetric Chamfer distance: mean nearest squared distance from
/// `a` into `b` plus the same from `b` into `a`.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance of an empty point set"));
    }
    let one_way = |from: &[Point], to: &[Point]| {
        from.iter()
            .map(|p| to.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}
