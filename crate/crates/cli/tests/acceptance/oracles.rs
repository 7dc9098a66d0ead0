//! Brute-force oracles, written independently of the library code paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmah_core::diffcore::{Graph, Tensor};
use cmah_core::geometry::{self, FpsStart, Point, PointCloud};
use cmah_core::losses::{nce_unit, ContrastTerm, ContrastiveBatch, Similarity};
use cmah_core::retrieval::{self, map_at_k, search, CodeDatabase, EvalOptions};
use cmah_core::Modality;

use crate::Outcome;

const TRIALS: usize = 120;
const FLOAT_TOL: f64 = 1e-6;

fn sq(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect()
}

/// Greedy FPS that recomputes every point-to-set distance from scratch.
fn fps_oracle(pts: &[Point], m: usize, first: usize) -> Vec<usize> {
    let mut out = vec![first];
    while out.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..pts.len() {
            if out.contains(&i) {
                continue;
            }
            let d = out.iter().map(|&c| sq(&pts[i], &pts[c])).fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        out.push(best.unwrap().1);
    }
    out
}

/// Full sort by (distance, index), then the first `k`.
fn knn_oracle(pts: &[Point], center: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| sq(&pts[a], &pts[center]).total_cmp(&sq(&pts[b], &pts[center])).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn chamfer_oracle(a: &[Point], b: &[Point]) -> f64 {
    let mut ab = 0.0;
    for p in a {
        ab += b.iter().map(|q| sq(p, q)).fold(f64::INFINITY, f64::min);
    }
    let mut ba = 0.0;
    for q in b {
        ba += a.iter().map(|p| sq(p, q)).fold(f64::INFINITY, f64::min);
    }
    ab / a.len() as f64 + ba / b.len() as f64
}

fn random_code(rng: &mut ChaCha8Rng, bits: usize) -> Vec<i8> {
    (0..bits).map(|_| if rng.gen() { 1 } else { -1 }).collect()
}

fn bit_distance(a: &[i8], b: &[i8]) -> u32 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u32
}

/// Definitional AP@k with denominator `min(k, R_total)`.
fn map_oracle(q: &[Vec<i8>], ql: &[u32], g: &[Vec<i8>], gl: &[u32], k: usize, exclude: bool) -> f64 {
    let mut aps = Vec::new();
    for i in 0..q.len() {
        let mut order: Vec<(u32, usize)> = (0..g.len())
            .filter(|&j| !(exclude && i == j))
            .map(|j| (bit_distance(&q[i], &g[j]), j))
            .collect();
        order.sort();
        let rel: Vec<bool> = order.iter().map(|&(_, j)| gl[j] == ql[i]).collect();
        let total = rel.iter().filter(|&&r| r).count();
        if total == 0 {
            continue;
        }
        let mut hits = 0;
        let mut ap = 0.0;
        for (r, &is_rel) in rel.iter().take(k).enumerate() {
            if is_rel {
                hits += 1;
                ap += hits as f64 / (r + 1) as f64;
            }
        }
        aps.push(ap / k.min(total) as f64);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let k = t.shape()[1];
    t.data().chunks(k).map(<[f64]>::to_vec).collect()
}

/// Mean over both anchor directions of `nce_unit`, with negatives drawn
/// from both families at every index other than the anchor's.
fn contrast_oracle(p: &Tensor, i: &Tensor, tau: f64) -> f64 {
    let (p, i) = (rows(p), rows(i));
    let n = p.len();
    let mut total = 0.0;
    for a in 0..n {
        let negs: Vec<&[f64]> = (0..n)
            .filter(|&j| j != a)
            .flat_map(|j| [p[j].as_slice(), i[j].as_slice()])
            .collect();
        total += nce_unit(&p[a], &i[a], &negs, tau, Similarity::Cosine).unwrap();
        total += nce_unit(&i[a], &p[a], &negs, tau, Similarity::Cosine).unwrap();
    }
    total / (2 * n) as f64
}

struct Tally {
    name: &'static str,
    instances: usize,
    mismatches: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            mismatches: 0,
            worst: 0.0,
        }
    }

    fn exact(&mut self, ok: bool) {
        self.instances += 1;
        if !ok {
            self.mismatches += 1;
        }
    }

    fn close(&mut self, a: f64, b: f64) {
        self.instances += 1;
        let d = (a - b).abs();
        self.worst = self.worst.max(d);
        if d.is_nan() || d > FLOAT_TOL {
            self.mismatches += 1;
        }
    }
}

fn fps_and_knn(rng: &mut ChaCha8Rng) -> (Tally, Tally) {
    let (mut fps, mut knn) = (Tally::new("fps"), Tally::new("knn"));
    for trial in 0..TRIALS {
        let n = rng.gen_range(8..120);
        let pts = random_cloud(rng, n);
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let m = rng.gen_range(1..=n.min(32));
        let seeded = trial % 2 == 1;
        let start = if seeded { FpsStart::Seeded(trial as u64) } else { FpsStart::First };
        let got = geometry::fps(&cloud, m, start).unwrap();
        // The seeded start is part of the contract under test only through
        // the greedy steps that follow it.
        fps.exact(got == fps_oracle(&pts, m, got[0]) && (seeded || got[0] == 0));

        let k = rng.gen_range(1..=n.min(32));
        let grouped = geometry::knn_group(&cloud, &got, k).unwrap();
        let mut ok = true;
        for (gi, &c) in got.iter().enumerate() {
            let expect = knn_oracle(&pts, c, k);
            ok &= grouped.neighbor_indices[gi * k..(gi + 1) * k] == expect[..];
            for (off, &j) in grouped.group(gi).iter().zip(&expect) {
                let want = [pts[j][0] - pts[c][0], pts[j][1] - pts[c][1], pts[j][2] - pts[c][2]];
                ok &= off.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12);
            }
        }
        knn.exact(ok);
    }
    (fps, knn)
}

fn chamfer(rng: &mut ChaCha8Rng) -> Tally {
    let mut t = Tally::new("chamfer");
    for _ in 0..TRIALS {
        let (na, nb) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let (a, b) = (random_cloud(rng, na), random_cloud(rng, nb));
        let want = chamfer_oracle(&a, &b);
        t.close(geometry::chamfer(&a, &b).unwrap(), want);
        // The differentiable op, batched over two identical groups.
        let mut g = Graph::inference(0);
        let flat = |p: &[Point]| p.iter().flatten().copied().collect::<Vec<f64>>();
        let ta = Tensor::new(vec![2, na, 3], [flat(&a), flat(&a)].concat()).unwrap();
        let tb = Tensor::new(vec![2, nb, 3], [flat(&b), flat(&b)].concat()).unwrap();
        let (va, vb) = (g.constant(ta), g.constant(tb));
        let c = g.chamfer(va, vb).unwrap();
        t.close(g.value(c).data()[1], want);
    }
    t
}

fn hamming_search(rng: &mut ChaCha8Rng) -> Tally {
    let mut t = Tally::new("hamming search");
    for _ in 0..TRIALS {
        let bits = [7, 16, 32, 64, 100][rng.gen_range(0..5)];
        let n = rng.gen_range(1..200);
        let codes: Vec<Vec<i8>> = (0..n).map(|_| random_code(rng, bits)).collect();
        let db = CodeDatabase::from_codes(bits, &codes, None, Modality::Point).unwrap();
        let q = random_code(rng, bits);
        let topk = rng.gen_range(1..250);
        let got = search(&retrieval::pack(&q).unwrap(), &db, topk).unwrap();
        let mut want: Vec<(u32, usize)> = codes.iter().enumerate().map(|(j, c)| (bit_distance(&q, c), j)).collect();
        want.sort();
        want.truncate(topk);
        let want: Vec<(usize, u32)> = want.into_iter().map(|(d, j)| (j, d)).collect();
        t.exact(got.entries == want);
    }
    t
}

fn map(rng: &mut ChaCha8Rng) -> Tally {
    let mut t = Tally::new("map");
    for trial in 0..TRIALS {
        let bits = [4, 8, 16, 32][trial % 4];
        let (nq, ng) = (rng.gen_range(1..30), rng.gen_range(1..60));
        let classes = rng.gen_range(1..6);
        let qc: Vec<Vec<i8>> = (0..nq).map(|_| random_code(rng, bits)).collect();
        let gc: Vec<Vec<i8>> = (0..ng).map(|_| random_code(rng, bits)).collect();
        let ql: Vec<u32> = (0..nq).map(|_| rng.gen_range(0..classes)).collect();
        let gl: Vec<u32> = (0..ng).map(|_| rng.gen_range(0..classes)).collect();
        let q = CodeDatabase::from_codes(bits, &qc, Some(ql.clone()), Modality::Image).unwrap();
        let g = CodeDatabase::from_codes(bits, &gc, Some(gl.clone()), Modality::Point).unwrap();
        let k = rng.gen_range(1..80);
        let exclude = trial % 3 != 0;
        let got = map_at_k(
            &q,
            &g,
            k,
            EvalOptions {
                exclude_same_pair: exclude,
            },
        )
        .unwrap();
        t.close(got, map_oracle(&qc, &ql, &gc, &gl, k, exclude));
    }
    t
}

fn contrastive(rng: &mut ChaCha8Rng) -> Vec<Tally> {
    let mut tallies = vec![Tally::new("L_ff"), Tally::new("L_fm"), Tally::new("L_mf")];
    for _ in 0..TRIALS {
        let (b, k) = (rng.gen_range(1..12), rng.gen_range(2..20));
        let tau = rng.gen_range(0.05..1.0);
        let mut codes = || {
            let data = (0..b * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![b, k], data).unwrap()
        };
        let (p, i, pv, iv) = (codes(), codes(), codes(), codes());
        let batch = ContrastiveBatch::new(p.clone(), i.clone(), pv.clone(), iv.clone(), tau).unwrap();
        for (t, term) in tallies.iter_mut().zip(ContrastTerm::ALL) {
            let want = match term {
                ContrastTerm::FullFull => contrast_oracle(&p, &i, tau),
                ContrastTerm::FullMasked => contrast_oracle(&p, &iv, tau),
                ContrastTerm::MaskedFull => contrast_oracle(&pv, &i, tau),
            };
            t.close(batch.term(term).unwrap(), want);
        }
    }
    tallies
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (fps, knn) = fps_and_knn(&mut rng);
    let mut all = vec![fps, knn, chamfer(&mut rng), hamming_search(&mut rng), map(&mut rng)];
    all.extend(contrastive(&mut rng));
    let passed = all.iter().all(|t| t.mismatches == 0 && t.instances >= 100);
    let detail = all
        .iter()
        .map(|t| {
            if t.worst > 0.0 {
                format!(
                    "{} {}/{} (max err {:.1e})",
                    t.name,
                    t.instances - t.mismatches,
                    t.instances,
                    t.worst
                )
            } else {
                format!("{} {}/{}", t.name, t.instances - t.mismatches, t.instances)
            }
        })
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(passed, detail)
}
