//! Finite-difference checks of every graph op, the hash head, each loss
//! component and a sample of the end-to-end objective, on desk shapes.

use std::cell::RefCell;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmah_core::data::SyntheticSpec;
use cmah_core::diffcore::{grad_check, param_grad_check, GradCheckReport, Graph, ParamId, ParamStore, Tensor, Var};
use cmah_core::losses::{self, CodeVars, ContrastTerm, LossConfig, NegativeSet};
use cmah_core::model::{CmahModel, FpsMode, HashHead, ModelConfig, TrainBatch};
use cmah_core::tokenizer::MaskSpec;
use cmah_core::Result;

use crate::Outcome;

const EPS: f64 = 1e-6;
const RTOL: f64 = 2e-3;

// Desk token geometry: batch 2, 16 patches + CLS, width 64, 4 heads.
const B: usize = 2;
const M: usize = 17;
const D: usize = 64;
const HEADS: usize = 4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ w ⊙ v` for a fixed random `w`, so every output element carries its
/// own upstream gradient.
fn weighted(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = uniform(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

struct Suite {
    rng: RefCell<ChaCha8Rng>,
    failures: Vec<String>,
    checks: usize,
    worst: f64,
}

impl Suite {
    fn record(&mut self, name: &str, report: Result<GradCheckReport>) {
        self.checks += 1;
        match report {
            Ok(r) => {
                self.worst = self.worst.max(r.max_rel_error());
                if !r.passed() {
                    self.failures.push(format!("{name}: {:?}", r.worst()));
                }
            }
            Err(e) => self.failures.push(format!("{name}: {e}")),
        }
    }

    fn check<F>(&mut self, name: &str, x: Tensor, f: F)
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let r = grad_check(|g, v| f(g, v).and_then(|o| weighted(g, o, 99)), &x, EPS, RTOL);
        self.record(name, r);
    }

    fn t(&self, shape: &[usize]) -> Tensor {
        uniform(&mut self.rng.borrow_mut(), shape, -1.0, 1.0)
    }
}

fn ops(s: &mut Suite) {
    let x3 = [B, M, D];
    let bias = s.t(&[D]);
    let other = s.t(&x3);
    let w = s.t(&[D, 16]);

    let (b1, o1) = (bias.clone(), other.clone());
    s.check("add lhs", s.t(&x3), move |g, v| {
        let c = g.constant(b1.clone());
        g.add(v, c)
    });
    let o2 = o1.clone();
    s.check("add broadcast rhs", bias.clone(), move |g, v| {
        let c = g.constant(o2.clone());
        g.add(c, v)
    });
    for (name, lhs) in [("sub lhs", true), ("sub rhs", false), ("mul lhs", true), ("mul rhs", false)] {
        let o = o1.clone();
        let is_mul = name.starts_with("mul");
        s.check(name, s.t(&x3), move |g, v| {
            let c = g.constant(o.clone());
            let (a, b) = if lhs { (v, c) } else { (c, v) };
            if is_mul {
                g.mul(a, b)
            } else {
                g.sub(a, b)
            }
        });
    }
    s.check("scale", s.t(&x3), |g, v| Ok(g.scale(v, -1.7)));
    let w1 = w.clone();
    s.check("matmul lhs", s.t(&x3), move |g, v| {
        let c = g.constant(w1.clone());
        g.matmul(v, c)
    });
    let o3 = o1.clone();
    s.check("matmul rhs", w.clone(), move |g, v| {
        let c = g.constant(o3.clone());
        g.matmul(c, v)
    });
    s.check("transpose", s.t(&x3), |g, v| g.transpose(v));
    s.check("reshape", s.t(&x3), |g, v| g.reshape(v, &[B * M, D]));
    let o4 = o1.clone();
    s.check("concat", s.t(&x3), move |g, v| {
        let c = g.constant(o4.clone());
        g.concat(&[c, v, c], 1)
    });
    s.check("slice", s.t(&x3), |g, v| g.slice(v, 1, 1, 9));
    s.check("softmax", s.t(&[B, HEADS, M, M]), |g, v| g.softmax(v));
    s.check("logsumexp", s.t(&x3), |g, v| g.logsumexp(v));
    let pos = uniform(&mut s.rng.borrow_mut(), &x3, 0.5, 2.0);
    s.check("log", pos, |g, v| Ok(g.log(v)));
    s.check("exp", s.t(&x3), |g, v| Ok(g.exp(v)));
    s.check("mean", s.t(&x3), |g, v| Ok(g.mean(v)));
    s.check("sum", s.t(&x3), |g, v| Ok(g.sum(v)));
    let kinked = off_zero(&mut s.rng.borrow_mut(), &x3);
    s.check("relu", kinked, |g, v| Ok(g.relu(v)));
    s.check("gelu", s.t(&x3), |g, v| Ok(g.gelu(v)));
    s.check("tanh", s.t(&x3), |g, v| Ok(g.tanh(v)));
    s.check("layernorm", s.t(&x3), |g, v| g.layernorm(v));
    s.check("l2_normalize", s.t(&[32, 16]), |g, v| g.l2_normalize(v));
    s.check("max_axis", s.t(&[B * 16, 16, 64]), |g, v| g.max_axis(v, 1));
    s.check("embedding", s.t(&[20, D]), |g, v| g.embedding(v, &[3, 0, 19, 3, 7, 3, 12]));

    let (q, k, v) = (s.t(&x3), s.t(&x3), s.t(&x3));
    let mask: Vec<bool> = (0..B * M).map(|i| i % 5 == 2).collect();
    for (name, which, masked) in [
        ("attention q", 0, false),
        ("attention k", 1, false),
        ("attention v", 2, false),
        ("attention q masked keys", 0, true),
        ("attention k masked keys", 1, true),
    ] {
        let (q, k, v, mask) = (q.clone(), k.clone(), v.clone(), mask.clone());
        let x = [&q, &k, &v][which].clone();
        s.check(name, x, move |g, x| {
            let mut ins = [g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone())];
            ins[which] = x;
            g.attention(ins[0], ins[1], ins[2], HEADS, masked.then_some(mask.as_slice()))
        });
    }
    // Cross-attention with fewer keys than queries.
    let kv = s.t(&[B, 9, D]);
    s.check("attention cross", s.t(&x3), move |g, x| {
        let c = g.constant(kv.clone());
        g.attention(x, c, c, HEADS, None)
    });

    let (pa, pb) = (s.t(&[16, 16, 3]), s.t(&[16, 12, 3]));
    let pb1 = pb.clone();
    s.check("chamfer lhs", pa.clone(), move |g, v| {
        let c = g.constant(pb1.clone());
        g.chamfer(v, c)
    });
    s.check("chamfer rhs", pb, move |g, v| {
        let c = g.constant(pa.clone());
        g.chamfer(c, v)
    });
}

fn hash_head(s: &mut Suite) {
    let mut ps = ParamStore::new(ChaCha8Rng::seed_from_u64(5));
    let head = HashHead::new(&mut ps, "h", D, D, 16);
    let cls = s.t(&[32, D]);
    let r = grad_check(
        |g, v| {
            let h = head.forward(g, &ps, v)?;
            weighted(g, h, 3)
        },
        &cls,
        EPS,
        RTOL,
    );
    s.record("hash head input", r);
    let probes: Vec<(ParamId, usize)> = [head.fc1.weight, head.fc1.bias, head.fc2.weight, head.fc2.bias]
        .into_iter()
        .flat_map(|id| {
            let n = ps.param(id).numel();
            (0..n).step_by((n / 40).max(1)).map(move |i| (id, i))
        })
        .collect();
    let x = cls.clone();
    let r = param_grad_check(
        &ps,
        &probes,
        |g, ps| {
            let v = g.constant(x.clone());
            let h = head.forward(g, ps, v)?;
            weighted(g, h, 3)
        },
        EPS,
        RTOL,
    );
    s.record("hash head params", r);
}

fn loss_components(s: &mut Suite) {
    let (n, k) = (32, 16);
    // Continuous codes live in (-1, 1).
    let codes = uniform(&mut s.rng.borrow_mut(), &[4 * n, k], -0.95, 0.95);
    let split = |g: &mut Graph, v: Var| -> Result<CodeVars> {
        Ok(CodeVars {
            point: g.slice(v, 0, 0, n)?,
            image: g.slice(v, 0, n, 2 * n)?,
            point_vis: g.slice(v, 0, 2 * n, 3 * n)?,
            image_vis: g.slice(v, 0, 3 * n, 4 * n)?,
        })
    };
    for negatives in [NegativeSet::BothFamilies, NegativeSet::CrossOnly] {
        let cfg = LossConfig {
            negatives,
            ..LossConfig::default()
        };
        for term in ContrastTerm::ALL {
            let r = grad_check(
                |g, v| {
                    let c = split(g, v)?;
                    losses::contrast_term(g, &c, term, &cfg)
                },
                &codes,
                EPS,
                RTOL,
            );
            s.record(&format!("contrast {term:?} {negatives:?}"), r);
        }
        let r = grad_check(
            |g, v| {
                let c = split(g, v)?;
                let mut total = g.constant(Tensor::scalar(0.0));
                for term in ContrastTerm::ALL {
                    let t = losses::contrast_term(g, &c, term, &cfg)?;
                    total = g.add(total, t)?;
                }
                Ok(total)
            },
            &codes,
            EPS,
            RTOL,
        );
        s.record(&format!("contrastive total {negatives:?}"), r);
    }

    let (groups, gk) = (40, 16);
    let target = s.t(&[groups, gk * 3]);
    let t1 = target.clone();
    let r = grad_check(
        |g, v| {
            let t = g.constant(t1.clone());
            losses::recon_3d(g, v, t, gk)
        },
        &s.t(&[groups, gk * 3]),
        EPS,
        RTOL,
    );
    s.record("chamfer reconstruction", r);
    let pix = s.t(&[48, 192]);
    let r = grad_check(
        |g, v| {
            let t = g.constant(pix.clone());
            losses::recon_2d(g, v, t)
        },
        &s.t(&[48, 192]),
        EPS,
        RTOL,
    );
    s.record("pixel reconstruction", r);
    let r = grad_check(
        |g, v| {
            let a = g.slice(v, 1, 0, gk * 3)?;
            let b = g.slice(v, 1, gk * 3, gk * 6)?;
            let t = g.constant(target.clone());
            let l3 = losses::recon_3d(g, a, t, gk)?;
            let u = g.constant(Tensor::zeros(&[groups, gk * 3]));
            let l2 = losses::recon_2d(g, b, u)?;
            g.add(l3, l2)
        },
        &s.t(&[groups, gk * 6]),
        EPS,
        RTOL,
    );
    s.record("reconstruction total", r);
}

fn overall_sample(s: &mut Suite) {
    let cfg = ModelConfig::desk();
    let model = CmahModel::new(cfg.clone(), 21).unwrap();
    let data = SyntheticSpec::new(4, 1, 8).unwrap().generate().unwrap();
    let refs: Vec<_> = data.iter().map(|r| (&r.cloud, &r.image)).collect();
    let masks = MaskSpec {
        ratio_image: 0.75,
        ratio_point: 0.6,
        seed: 5,
    };
    let batch = TrainBatch::new(&cfg, &refs, &masks, FpsMode::Deterministic).unwrap();
    let sizes: Vec<(ParamId, usize)> = model.params.iter().map(|(id, p)| (id, p.numel())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    // 24 entries spread evenly over the flattened parameter vector.
    let probes: Vec<_> = (0..24)
        .map(|j| {
            let mut flat = j * total / 24 + 11;
            for &(id, n) in &sizes {
                if flat < n {
                    return (id, flat);
                }
                flat -= n;
            }
            unreachable!()
        })
        .collect();
    let lc = LossConfig::default();
    let store = model.params.clone();
    let cell = RefCell::new(model);
    let r = param_grad_check(
        &store,
        &probes,
        |g, ps| {
            cell.borrow_mut().params = ps.clone();
            let m = cell.borrow();
            let bundle = m.full_forward(g, &batch)?;
            Ok(losses::overall(g, &bundle, &lc, cfg.variant, cfg.group_size)?.0)
        },
        EPS,
        RTOL,
    );
    s.record("overall objective parameter sample", r);
}

pub fn run() -> Outcome {
    let start = Instant::now();
    let mut s = Suite {
        rng: RefCell::new(ChaCha8Rng::seed_from_u64(2024)),
        failures: Vec::new(),
        checks: 0,
        worst: 0.0,
    };
    ops(&mut s);
    hash_head(&mut s);
    loss_components(&mut s);
    overall_sample(&mut s);
    let secs = start.elapsed().as_secs_f64();
    let passed = s.failures.is_empty() && secs < 120.0;
    let mut detail = format!(
        "{} checks at rtol {RTOL}, worst relative error {:.2e}, {secs:.1}s (limit 120s)",
        s.checks, s.worst
    );
    if !s.failures.is_empty() {
        detail.push_str(&format!("; failing: {}", s.failures.join("; ")));
    }
    Outcome::new(passed, detail)
}
