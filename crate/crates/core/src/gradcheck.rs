//! Central finite-difference verification of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffcore::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::math;

mod suite;
pub use suite::{grad_check_suite, OpReport, SuiteOptions, SuiteReport, TOLERANCE};

/// Settings of one finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub step: f64,
    /// Denominator floor for the relative error, so gradients that are
    /// zero in both routes compare on an absolute scale.
    pub floor: f64,
    /// Upper bound on checked elements per input tensor (random subset).
    pub max_elements: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_elements: 24,
        }
    }
}

/// Worst disagreement found by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct FdOutcome {
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = math::abs(analytic).max(math::abs(numeric)).max(floor);
    math::abs(analytic - numeric) / denom
}

/// Compares the analytic gradient of `f` against central differences for
/// every tensor of `inputs` (a random subset of elements per tensor when the
/// tensor is large).
pub fn check<F, R>(inputs: &ParamStore, f: F, cfg: FdConfig, rng: &mut R) -> Result<FdOutcome>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut graph = Graph::new();
    let bound = inputs.bind(&mut graph, |_| true);
    let loss = f(&mut graph, &bound)?;
    let mut grads = graph.backward(loss)?;
    let analytic = bound.grads(&mut grads);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| false);
        let l = f(&mut g, &b)?;
        Ok(g.value(l).item())
    };

    let mut out = FdOutcome {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.clone();
    for (id, name, tensor) in inputs.iter() {
        let n = tensor.len();
        let elems: Vec<usize> = if n <= cfg.max_elements {
            (0..n).collect()
        } else {
            (0..cfg.max_elements).map(|_| rng.gen_range(0..n)).collect()
        };
        for e in elems {
            let orig = tensor.data()[e];
            probe.get_mut(id).data_mut()[e] = orig + cfg.step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = orig - cfg.step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let err = rel_error(analytic[id.0].data()[e], numeric, cfg.floor);
            out.checked += 1;
            if err > out.max_rel_error || out.worst.is_none() {
                out.max_rel_error = err;
                out.worst = Some((String::from(name), e));
            }
        }
    }
    Ok(out)
}

/// Reduces an output to the scalar `sum(y * weights)`; with random weights
/// every output element contributes a distinct gradient.
pub fn readout(graph: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let r = graph.constant(weights.clone().reshaped(graph.dims(y))?);
    let p = graph.mul(y, r)?;
    Ok(graph.sum(p))
}

/// Tensor with entries uniform in `[-scale, scale)`.
pub fn random_tensor<R: Rng + ?Sized>(dims: &[usize], scale: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-scale..scale))
}
