//! Central-difference verification of analytic gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::graph::{Graph, NodeId};
use super::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen elements per tensor.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor and element index where the maximum was attained.
    pub worst: String,
    pub checked: usize,
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Reduces an arbitrary node to a scalar through a fixed random linear
/// functional, so every output element contributes to the gradient.
pub fn project_to_scalar(g: &mut Graph<f64>, node: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(node).shape().to_vec();
    let w = Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut rng));
    let w = g.constant(w);
    let prod = g.mul(node, w)?;
    Ok(g.mean_all(prod))
}

fn evaluate<F>(f: &mut F, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
    let out = f(&mut g, store, &ids)?;
    let v = g.value(out).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite value {v} during gradient check")));
    }
    Ok(v)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences, over every input tensor and every trainable parameter.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    inputs: &mut [Tensor<f64>],
    opts: GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, store, &ids)?;
    if !g.value(out).all_finite() {
        return Err(Error::Numeric("non-finite output in gradient check".into()));
    }
    let grads = g.backward(out)?;
    let input_grads: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, t)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut param_grads = Vec::new();
    for (pid, node) in g.param_nodes() {
        if store.get(pid).trainable {
            let grad = grads
                .get(node)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.value(pid).shape()));
            param_grads.push((pid, grad));
        }
    }
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pick = |len: usize| -> Vec<usize> {
        match opts.max_per_tensor {
            Some(m) if m < len => {
                let mut v = sample(&mut rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    };

    let eps = opts.eps;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let record = |report: &mut GradCheckReport, a: f64, n: f64, label: String| {
        let e = relative_error(a, n);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e;
            report.worst = label;
        }
    };

    for ti in 0..inputs.len() {
        for idx in pick(inputs[ti].len()) {
            let orig = inputs[ti].data()[idx];
            inputs[ti].data_mut()[idx] = orig + eps;
            let fp = evaluate(&mut f, store, inputs)?;
            inputs[ti].data_mut()[idx] = orig - eps;
            let fm = evaluate(&mut f, store, inputs)?;
            inputs[ti].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            record(&mut report, input_grads[ti].data()[idx], numeric, format!("input{ti}[{idx}]"));
        }
    }
    for (pid, grad) in &param_grads {
        for idx in pick(grad.len()) {
            let orig = store.value(*pid).data()[idx];
            store.get_mut(*pid).value.data_mut()[idx] = orig + eps;
            let fp = evaluate(&mut f, store, inputs)?;
            store.get_mut(*pid).value.data_mut()[idx] = orig - eps;
            let fm = evaluate(&mut f, store, inputs)?;
            store.get_mut(*pid).value.data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let name = store.get(*pid).name.clone();
            record(&mut report, grad.data()[idx], numeric, format!("{name}[{idx}]"));
        }
    }
    Ok(report)
}
