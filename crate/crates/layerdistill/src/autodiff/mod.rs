//! Deterministic reverse-mode differentiation over dense real tensors.
//!
//! This is the numeric substrate for every trainable operation in the
//! crate: the encoder forward pass, the projection heads, and both
//! distillation losses all compile down to one of these graphs.
//!
//! Evaluation is sequential and bitwise deterministic for fixed inputs.
//! Tensors and graphs are immutable after construction, so sharing them
//! across threads and running distinct graphs concurrently is safe.

mod graph;
mod kernels;
mod tensor;

pub use graph::{Bindings, Evaluation, Gradients, Graph, GraphBuilder, NodeId, COSINE_EPS};
pub use tensor::{sc, Scalar, Tensor};

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Forward values for every named output of `graph`.
pub fn evaluate<T: Scalar>(
    graph: &Graph<T>,
    inputs: &Bindings<T>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    Ok(graph.forward(inputs)?.outputs())
}

/// Reverse-mode partial derivatives of the scalar output `output` with
/// respect to every bound input marked `requires_grad`.
pub fn gradient<T: Scalar>(
    graph: &Graph<T>,
    output: &str,
    inputs: &Bindings<T>,
) -> Result<Gradients<T>> {
    graph.forward(inputs)?.backward_scalar(output)
}

/// Relative errors below this floor are treated as matching: central
/// differences carry O(eps^2) truncation plus roundoff noise, so raw
/// relative error is meaningless for near-zero gradient components.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Gradient-check verdict for one input tensor.
#[derive(Debug, Clone)]
pub struct FdInputReport {
    pub input: String,
    pub max_rel_error: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

/// Result of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub output: String,
    pub epsilon: f64,
    pub tolerance: f64,
    pub inputs: Vec<FdInputReport>,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.inputs.iter().all(|r| r.pass)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &FdInputReport> {
        self.inputs.iter().filter(|r| !r.pass)
    }
}

/// Central-difference check of `gradient` for the scalar output `output`.
///
/// Every component of every `requires_grad` input is perturbed by
/// `epsilon` in both directions. The report flags any input whose largest
/// relative error exceeds `tolerance`; failures are reported, not raised.
pub fn finite_difference_check<T: Scalar>(
    graph: &Graph<T>,
    output: &str,
    inputs: &Bindings<T>,
    epsilon: f64,
    tolerance: f64,
) -> Result<FdReport> {
    if epsilon <= 0.0 {
        return Err(Error::usage(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic = gradient(graph, output, inputs)?;

    let mut reports = Vec::new();
    let names: Vec<String> = graph.input_names().map(str::to_owned).collect();
    for name in names {
        let bound = match inputs.get(&name) {
            Some(t) if t.requires_grad() => t.clone(),
            _ => continue,
        };
        let grad = analytic
            .get(&name)
            .expect("gradient for every requires_grad input");
        let mut worst = FdInputReport {
            input: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            pass: true,
        };
        for idx in 0..bound.numel() {
            let numeric = central_difference(graph, output, inputs, &name, &bound, idx, epsilon)?;
            let ad = grad.data()[idx].to_f64().unwrap();
            let denom = ad.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let rel = (ad - numeric).abs() / denom;
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.worst_index = idx;
                worst.analytic = ad;
                worst.numeric = numeric;
            }
        }
        worst.pass = worst.max_rel_error <= tolerance;
        reports.push(worst);
    }

    Ok(FdReport {
        output: output.to_string(),
        epsilon,
        tolerance,
        inputs: reports,
    })
}

fn central_difference<T: Scalar>(
    graph: &Graph<T>,
    output: &str,
    inputs: &Bindings<T>,
    name: &str,
    bound: &Tensor<T>,
    idx: usize,
    epsilon: f64,
) -> Result<f64> {
    let eval_at = |shift: f64| -> Result<f64> {
        let mut data = bound.data().to_vec();
        data[idx] = data[idx] + sc::<T>(shift);
        let perturbed = Tensor::new(bound.shape().to_vec(), data)?;
        let bindings = inputs.clone().set(name, perturbed);
        let eval = graph.forward(&bindings)?;
        Ok(eval.output(output)?.item()?.to_f64().unwrap())
    };
    let plus = eval_at(epsilon)?;
    let minus = eval_at(-epsilon)?;
    Ok((plus - minus) / (2.0 * epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_graph() -> Graph<f64> {
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", vec![1]).unwrap();
        let y = gb.mul(x, x).unwrap();
        gb.output("y", y).unwrap();
        gb.finish()
    }

    #[test]
    fn scalar_square_value_and_gradient() {
        let g = square_graph();
        let binds = Bindings::new().set("x", Tensor::scalar(3.0).with_grad());
        let out = evaluate(&g, &binds).unwrap();
        assert_eq!(out["y"].data(), &[9.0]);
        let grads = gradient(&g, "y", &binds).unwrap();
        assert_eq!(grads["x"].data(), &[6.0]);
    }

    #[test]
    fn softmax_of_symmetric_pair() {
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", vec![2]).unwrap();
        let y = gb.softmax(x).unwrap();
        gb.output("y", y).unwrap();
        let g = gb.finish();
        let out = evaluate(&g, &Bindings::new().set("x", Tensor::vector(vec![0.0, 0.0]))).unwrap();
        assert_eq!(out["y"].data(), &[0.5, 0.5]);
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        let mut gb = GraphBuilder::<f64>::new();
        let u = gb.input("u", vec![2]).unwrap();
        let v = gb.input("v", vec![2]).unwrap();
        let y = gb.row_cosine(u, v).unwrap();
        gb.output("y", y).unwrap();
        let g = gb.finish();
        let binds = Bindings::new()
            .set("u", Tensor::vector(vec![1.0, 0.0]))
            .set("v", Tensor::vector(vec![0.0, 1.0]));
        let out = evaluate(&g, &binds).unwrap();
        assert!(out["y"].data()[0].abs() < 1e-12);
    }

    #[test]
    fn cosine_with_itself_has_zero_gradient() {
        let mut gb = GraphBuilder::<f64>::new();
        let u = gb.input("u", vec![3]).unwrap();
        let c = gb.row_cosine(u, u).unwrap();
        let y = gb.sum(c);
        gb.output("y", y).unwrap();
        let g = gb.finish();
        let binds = Bindings::new().set("u", Tensor::vector(vec![0.3, -1.2, 2.0]).with_grad());
        let grads = gradient(&g, "y", &binds).unwrap();
        // Zero up to the epsilon norm guard, which leaves an O(eps) residue.
        for &v in grads["u"].data() {
            assert!(v.abs() < 1e-7, "gradient component {v} not ~0");
        }
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        // lse(v) = v_0 - log_softmax(v)_0, so d lse / d v = softmax(v).
        let mut gb = GraphBuilder::<f64>::new();
        let v = gb.input("v", vec![2]).unwrap();
        let lsm = gb.log_softmax(v).unwrap();
        let v0 = gb.slice_cols(v, 0, 1).unwrap();
        let l0 = gb.slice_cols(lsm, 0, 1).unwrap();
        let diff = gb.sub(v0, l0).unwrap();
        let y = gb.sum(diff);
        gb.output("y", y).unwrap();
        let g = gb.finish();
        let binds = Bindings::new().set("v", Tensor::vector(vec![0.0, 0.0]).with_grad());
        let out = evaluate(&g, &binds).unwrap();
        assert!((out["y"].data()[0] - 2.0f64.ln()).abs() < 1e-12);
        let grads = gradient(&g, "y", &binds).unwrap();
        assert!((grads["v"].data()[0] - 0.5).abs() < 1e-12);
        assert!((grads["v"].data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_vector_output_is_usage_error() {
        let mut gb = GraphBuilder::<f64>::new();
        let x = gb.input("x", vec![2]).unwrap();
        let y = gb.scale(x, 2.0);
        gb.output("y", y).unwrap();
        let g = gb.finish();
        let binds = Bindings::new().set("x", Tensor::vector(vec![1.0, 2.0]).with_grad());
        let err = gradient(&g, "y", &binds).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn missing_binding_is_config_error() {
        let g = square_graph();
        let err = evaluate(&g, &Bindings::new()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let g = square_graph();
        let binds = Bindings::new().set("x", Tensor::vector(vec![1.0, 2.0]));
        let err = evaluate(&g, &binds).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_finite_intermediate_names_the_node() {
        let mut gb = GraphBuilder::<f64>::new();
        let x = gb.input("x", vec![1]).unwrap();
        let y = gb.mul(x, x).unwrap();
        gb.label(y, "blowup");
        gb.output("y", y).unwrap();
        let g = gb.finish();
        let binds = Bindings::new().set("x", Tensor::scalar(1e200));
        let err = evaluate(&g, &binds).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("blowup"), "message: {msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn fd_check_on_square() {
        let g = square_graph();
        let binds = Bindings::new().set("x", Tensor::scalar(3.0).with_grad());
        let report = finite_difference_check(&g, "y", &binds, 1e-5, 1e-6).unwrap();
        assert!(report.pass(), "max rel error {}", report.max_rel_error());
        assert!(report.max_rel_error() < 1e-6);
    }

    #[test]
    fn fd_check_identity_is_exact() {
        let mut gb = GraphBuilder::<f64>::new();
        let x = gb.input("x", vec![1]).unwrap();
        let y = gb.scale(x, 1.0);
        gb.output("y", y).unwrap();
        let g = gb.finish();
        let binds = Bindings::new().set("x", Tensor::scalar(0.7).with_grad());
        let report = finite_difference_check(&g, "y", &binds, 1e-5, 1e-9).unwrap();
        assert!(report.pass());
        assert!(report.max_rel_error() < 1e-10);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let mut gb = GraphBuilder::<f32>::new();
        let x = gb.input("x", vec![4, 8]).unwrap();
        let w = gb.input("w", vec![8, 8]).unwrap();
        let h = gb.matmul(x, w).unwrap();
        let s = gb.swish(h).unwrap();
        let sm = gb.softmax(s).unwrap();
        let y = gb.sum(sm);
        gb.output("y", y).unwrap();
        let g = gb.finish();
        let xs: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let ws: Vec<f32> = (0..64).map(|i| (i as f32 * 0.11).cos()).collect();
        let binds = Bindings::new()
            .set("x", Tensor::matrix(4, 8, xs).unwrap())
            .set("w", Tensor::matrix(8, 8, ws).unwrap());
        let a = evaluate(&g, &binds).unwrap();
        let b = evaluate(&g, &binds).unwrap();
        assert_eq!(a["y"].data(), b["y"].data());
    }

    #[test]
    fn chain_rule_composition_matches_product_of_parts() {
        // h(x) = swish(scale(x, 2)): dh/dx must equal swish'(2x) * 2.
        let mut gb = GraphBuilder::<f64>::new();
        let x = gb.input("x", vec![1]).unwrap();
        let gx = gb.scale(x, 2.0);
        let h = gb.swish(gx).unwrap();
        let y = gb.sum(h);
        gb.output("y", y).unwrap();
        let g = gb.finish();

        let x0 = 0.8;
        let binds = Bindings::new().set("x", Tensor::scalar(x0).with_grad());
        let composed = gradient(&g, "y", &binds).unwrap()["x"].data()[0];

        // Inner derivative via its own one-op graph.
        let mut gb_f = GraphBuilder::<f64>::new();
        let u = gb_f.input("u", vec![1]).unwrap();
        let s = gb_f.swish(u).unwrap();
        let yf = gb_f.sum(s);
        gb_f.output("y", yf).unwrap();
        let gf = gb_f.finish();
        let binds_f = Bindings::new().set("u", Tensor::scalar(2.0 * x0).with_grad());
        let f_prime = gradient(&gf, "y", &binds_f).unwrap()["u"].data()[0];

        assert!((composed - f_prime * 2.0).abs() < 1e-12);
    }
}
