//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is an
//! independent oracle for the tape's backward rules.

use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Worst observed deviation from one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index, analytic, numeric) at the worst site.
    pub worst: (usize, usize, f64, f64),
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Scaled relative error: |a - n| / max(1, |a|, |n|).
pub fn max_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central differences of a scalar-valued forward function at `inputs`.
pub fn central_diff_gradients<F: Scalar>(
    f: &dyn Fn(&[Tensor<F>]) -> f64,
    inputs: &[Tensor<F>],
    step: f64,
) -> Vec<Tensor<F>> {
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + F::of(step);
            let plus = f(&work);
            work[i].data_mut()[e] = orig - F::of(step);
            let minus = f(&work);
            work[i].data_mut()[e] = orig;
            g.data_mut()[e] = F::of((plus - minus) / (2.0 * step));
        }
        grads.push(g);
    }
    grads
}

/// Checks a graph builder's analytic gradients against central differences.
///
/// `build` receives a fresh tape plus one leaf per input and must return a
/// scalar. It is re-invoked for every perturbed evaluation.
pub fn gradcheck<F, B>(build: B, inputs: &[Tensor<F>], step: f64) -> GradCheckReport
where
    F: Scalar,
    B: for<'t> Fn(&'t Tape<F>, &[Var<'t, F>]) -> Var<'t, F>,
{
    let eval = |xs: &[Tensor<F>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_, F>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        build(&tape, &vars).value().item().as_f64()
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_, F>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor<F>> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let numeric = central_diff_gradients(&eval, inputs, step);

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0, 0.0, 0.0) };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (e, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let err = max_rel_err(av.as_f64(), nv.as_f64());
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, e, av.as_f64(), nv.as_f64());
            }
        }
    }
    report
}
