use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One element of a gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(|numeric|, 1)`; infinite when either side
    /// is non-finite.
    pub rel_error: f64,
    pub finite: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.finite && e.rel_error <= self.rtol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Build a report from paired analytic / numeric gradients.
pub fn compare_gradients(indices: &[usize], analytic: &[f64], numeric: &[f64], rtol: f64) -> GradCheckReport {
    let entries = indices
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(&index, (&a, &n))| {
            let finite = a.is_finite() && n.is_finite();
            let rel_error = if finite { (a - n).abs() / n.abs().max(1.0) } else { f64::INFINITY };
            GradCheckEntry {
                index,
                analytic: a,
                numeric: n,
                rel_error,
                finite,
            }
        })
        .collect();
    GradCheckReport { entries, rtol }
}

/// Compare the reverse-mode gradient of a scalar function against central
/// finite differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, rtol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new(0);
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    let grads = g.backward(out)?;
    let analytic = grads.get(xv).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::inference(0);
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    let indices: Vec<usize> = (0..x.numel()).collect();
    Ok(compare_gradients(&indices, &analytic, &numeric, rtol))
}

/// Finite-difference check of parameter gradients.
///
/// `probes` lists `(parameter, flat element)` pairs; report entry `i`
/// refers to `probes[i]`. `f` builds the scalar loss from the store.
pub fn param_grad_check<F>(store: &ParamStore, probes: &[(ParamId, usize)], f: F, eps: f64, rtol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new(0);
    let out = f(&mut g, store)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<f64> = probes
        .iter()
        .map(|&(id, i)| grads.param_grads().find(|(p, _)| *p == id).map_or(0.0, |(_, t)| t.data()[i]))
        .collect();

    let mut local = store.clone();
    let mut eval = |id: ParamId, i: usize, delta: f64| -> Result<f64> {
        let orig = local.value(id)?.data()[i];
        local.value_mut(id)?.data_mut()[i] = orig + delta;
        let mut g = Graph::inference(0);
        let out = f(&mut g, &local);
        local.value_mut(id)?.data_mut()[i] = orig;
        let out = out?;
        Ok(g.value(out).item())
    };
    let mut numeric = Vec::with_capacity(probes.len());
    for &(id, i) in probes {
        numeric.push((eval(id, i, eps)? - eval(id, i, -eps)?) / (2.0 * eps));
    }
    let indices: Vec<usize> = (0..probes.len()).collect();
    Ok(compare_gradients(&indices, &analytic, &numeric, rtol))
}
