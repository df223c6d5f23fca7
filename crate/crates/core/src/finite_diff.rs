//! Central-difference gradient verification.
//!
//! The checker owns both sides of the comparison: it mounts the parameter
//! tensors as trainable leaves and runs backward for the analytic gradient,
//! then re-evaluates the same builder on perturbed constants for the numeric
//! one. Builders therefore express the function once and cannot leak the
//! implementation gradient into the oracle side.

use crate::graph::{Graph, Value};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Result for one named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// flat element index where the max occurred
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error with an absolute floor so that zero-gradient functions
/// (constants) compare as exact instead of 0/0.
fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / denom
}

/// Central-difference check of `build` at the given parameters.
///
/// `build` must construct a scalar root from the mounted parameter leaves
/// (one leaf per entry of `params`, same order). `h` is the step of the
/// two-sided difference; `tol` the pass threshold on the max relative error.
pub fn finite_diff_check<F: Real>(
    params: &[(String, Tensor<F>)],
    build: &dyn Fn(&mut Graph<F>, &[Value]) -> Value,
    h: f64,
    tol: f64,
) -> FiniteDiffReport {
    finite_diff_check_with_fault(params, build, h, tol, 0.0)
}

/// Variant with an injected analytic-gradient bias, used to prove the
/// detector actually detects (self-test hook; pass 0.0 for real checks).
pub fn finite_diff_check_with_fault<F: Real>(
    params: &[(String, Tensor<F>)],
    build: &dyn Fn(&mut Graph<F>, &[Value]) -> Value,
    h: f64,
    tol: f64,
    fault_bias: f64,
) -> FiniteDiffReport {
    assert!(h > 0.0, "finite_diff_check requires h > 0");

    // analytic side
    let mut g = Graph::new();
    let leaves: Vec<Value> = params
        .iter()
        .map(|(_, t)| g.leaf(t.clone(), true))
        .collect();
    let root = build(&mut g, &leaves);
    let grads = g.backward(root).expect("builder must return a scalar");
    let analytic: Vec<Tensor<F>> = params
        .iter()
        .zip(&leaves)
        .map(|((_, t), &v)| grads.of_leaf(v, t.shape()))
        .collect();

    let eval = |ps: &[Tensor<F>]| -> f64 {
        let mut g = Graph::new();
        let leaves: Vec<Value> = ps.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let root = build(&mut g, &leaves);
        g.value(root).item().to_f64().unwrap()
    };

    let mut work: Vec<Tensor<F>> = params.iter().map(|(_, t)| t.clone()).collect();
    let hh = F::from_f64_c(h);
    let mut out = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;

    for (pi, (name, _)) in params.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut worst_index = 0usize;
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + hh;
            let fp = eval(&work);
            work[pi].data_mut()[ei] = orig - hh;
            let fm = eval(&work);
            work[pi].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[ei].to_f64().unwrap() + fault_bias;
            let e = rel_err(a, numeric);
            if e > worst {
                worst = e;
                worst_index = ei;
            }
        }
        overall = overall.max(worst);
        out.push(ParamCheck { name: name.clone(), max_rel_err: worst, worst_index });
    }

    FiniteDiffReport { params: out, max_rel_err: overall, tol }
}
