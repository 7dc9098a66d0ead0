use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Ellipsoid,
    Prism,
}

/// Torus tube radius relative to the ring radius.
const TORUS_TUBE: f64 = 0.35;
const ELLIPSOID_AXES: [f64; 3] = [1.0, 0.65, 0.4];
const PYRAMID_HEIGHT: f64 = 1.2;

impl ShapeClass {
    pub const ALL: [ShapeClass; 8] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::Torus,
        ShapeClass::Pyramid,
        ShapeClass::Ellipsoid,
        ShapeClass::Prism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::Pyramid => "pyramid",
            ShapeClass::Ellipsoid => "ellipsoid",
            ShapeClass::Prism => "prism",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown shape class {name:?}")))
    }

    /// The first `n` classes in canonical order.
    pub fn first(n: usize) -> Result<Vec<Self>> {
        if n == 0 || n > Self::ALL.len() {
            return Err(Error::invalid(format!("class count must be in 1..=8, got {n}")));
        }
        Ok(Self::ALL[..n].to_vec())
    }

    /// Whether the canonical surface is symmetric under `p -> -p`.
    pub fn centrally_symmetric(self) -> bool {
        matches!(
            self,
            ShapeClass::Sphere | ShapeClass::Cube | ShapeClass::Cylinder | ShapeClass::Torus | ShapeClass::Ellipsoid
        )
    }
}

fn lerp3(a: Point, b: Point, t: f64) -> Point {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Uniform point on triangle `abc`.
fn on_triangle<R: Rng>(rng: &mut R, a: Point, b: Point, c: Point) -> Point {
    let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
    if u + v > 1.0 {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    [
        a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
        a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
        a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2]),
    ]
}

fn tri_area(a: Point, b: Point, c: Point) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let x = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Area-weighted sampling over a triangle soup.
fn on_mesh<R: Rng>(rng: &mut R, tris: &[[Point; 3]]) -> Point {
    let areas: Vec<f64> = tris.iter().map(|t| tri_area(t[0], t[1], t[2])).collect();
    let mut r = rng.gen::<f64>() * areas.iter().sum::<f64>();
    for (t, a) in tris.iter().zip(&areas) {
        if r < *a {
            return on_triangle(rng, t[0], t[1], t[2]);
        }
        r -= a;
    }
    let t = tris[tris.len() - 1];
    on_triangle(rng, t[0], t[1], t[2])
}

fn pyramid_mesh() -> Vec<[Point; 3]> {
    let h = PYRAMID_HEIGHT / 2.0;
    let apex = [0.0, 0.0, h];
    let base = [[-1.0, -1.0, -h], [1.0, -1.0, -h], [1.0, 1.0, -h], [-1.0, 1.0, -h]];
    let mut tris: Vec<[Point; 3]> = (0..4).map(|i| [base[i], base[(i + 1) % 4], apex]).collect();
    tris.push([base[0], base[1], base[2]]);
    tris.push([base[0], base[2], base[3]]);
    tris
}

fn prism_mesh() -> Vec<[Point; 3]> {
    let tri: Vec<[f64; 2]> = (0..3)
        .map(|i| {
            let a = PI / 2.0 + TAU * i as f64 / 3.0;
            [a.cos(), a.sin()]
        })
        .collect();
    let (lo, hi) = (-1.0, 1.0);
    let mut tris = vec![
        [[tri[0][0], tri[0][1], lo], [tri[1][0], tri[1][1], lo], [tri[2][0], tri[2][1], lo]],
        [[tri[0][0], tri[0][1], hi], [tri[1][0], tri[1][1], hi], [tri[2][0], tri[2][1], hi]],
    ];
    for i in 0..3 {
        let (a, b) = (tri[i], tri[(i + 1) % 3]);
        let q = [[a[0], a[1], lo], [b[0], b[1], lo], [b[0], b[1], hi], [a[0], a[1], hi]];
        tris.push([q[0], q[1], q[2]]);
        tris.push([q[0], q[2], q[3]]);
    }
    tris
}

/// `n` points on the ideal surface of `class` in its canonical pose, before
/// jitter and normalization.
///
/// Centrally symmetric classes are sampled in antipodal pairs, so for even
/// `n` the centroid is exactly the origin and normalization keeps the points
/// on the ideal surface.
pub fn sample_surface<R: Rng>(class: ShapeClass, rng: &mut R, n: usize) -> Vec<Point> {
    if class.centrally_symmetric() {
        let half = sample_independent(class, rng, n.div_ceil(2));
        let mut out = Vec::with_capacity(n);
        for p in half {
            out.push(p);
            if out.len() < n {
                out.push(p.map(|v| -v));
            }
        }
        return out;
    }
    sample_independent(class, rng, n)
}

fn sample_independent<R: Rng>(class: ShapeClass, rng: &mut R, n: usize) -> Vec<Point> {
    let pyramid = pyramid_mesh();
    let prism = prism_mesh();
    (0..n)
        .map(|_| match class {
            ShapeClass::Sphere => UnitSphere.sample(rng),
            ShapeClass::Ellipsoid => {
                let p: [f64; 3] = UnitSphere.sample(rng);
                [p[0] * ELLIPSOID_AXES[0], p[1] * ELLIPSOID_AXES[1], p[2] * ELLIPSOID_AXES[2]]
            }
            ShapeClass::Cube => {
                let face = rng.gen_range(0..6);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                p[axis] = sign;
                p
            }
            ShapeClass::Cylinder => {
                // Side area 4π, each cap π.
                let a = rng.gen_range(0.0..TAU);
                let pick = rng.gen_range(0.0..6.0);
                if pick < 4.0 {
                    [a.cos(), a.sin(), rng.gen_range(-1.0..1.0)]
                } else {
                    let r = rng.gen::<f64>().sqrt();
                    [r * a.cos(), r * a.sin(), if pick < 5.0 { 1.0 } else { -1.0 }]
                }
            }
            ShapeClass::Cone => {
                // Base radius 1 at z = -1, apex at z = 1: lateral area π√5, base π.
                let a = rng.gen_range(0.0..TAU);
                let lateral = 5f64.sqrt();
                if rng.gen_range(0.0..lateral + 1.0) < lateral {
                    let r = rng.gen::<f64>().sqrt();
                    lerp3([0.0, 0.0, 1.0], [a.cos(), a.sin(), -1.0], r)
                } else {
                    let r = rng.gen::<f64>().sqrt();
                    [r * a.cos(), r * a.sin(), -1.0]
                }
            }
            ShapeClass::Torus => {
                let u = rng.gen_range(0.0..TAU);
                // Rejection on the tube angle for uniform surface density.
                let v = loop {
                    let v = rng.gen_range(0.0..TAU);
                    if rng.gen::<f64>() * (1.0 + TORUS_TUBE) <= 1.0 + TORUS_TUBE * v.cos() {
                        break v;
                    }
                };
                let w = 1.0 + TORUS_TUBE * v.cos();
                [w * u.cos(), w * u.sin(), TORUS_TUBE * v.sin()]
            }
            ShapeClass::Pyramid => on_mesh(rng, &pyramid),
            ShapeClass::Prism => on_mesh(rng, &prism),
        })
        .collect()
}

/// Add isotropic Gaussian noise with standard deviation `sigma`.
pub fn jitter<R: Rng>(points: &mut [Point], rng: &mut R, sigma: f64) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let n = Normal::new(0.0, sigma).map_err(|e| Error::invalid(format!("jitter sigma {sigma}: {e}")))?;
    for p in points {
        for c in p.iter_mut() {
            *c += n.sample(rng);
        }
    }
    Ok(())
}
