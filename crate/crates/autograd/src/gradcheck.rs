//! Central finite-difference gradient checking.
//!
//! The numeric side is always evaluated in `f64`, so an `f32` analytic gradient is
//! compared against a reference that is not limited by single precision.

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// A scalar function of several tensors, evaluable at any precision.
pub trait ScalarFn {
    fn eval<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Var;
}

#[derive(Clone, Copy, Debug)]
pub struct Options {
    /// Finite-difference step.
    pub step: f64,
    /// Entries probed per input; evenly strided when the input is larger.
    pub max_entries: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: usize::MAX,
        }
    }
}

/// Outcome for one input tensor.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max |analytic - numeric| / max(|numeric|_inf, |analytic|_inf)`, 0 when both vanish.
    pub rel_err: f64,
}

fn eval_f64<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f.eval(&mut g, &vars);
    g.value(out).item()
}

/// Analytic gradient at precision `T` against an `f64` central difference.
pub fn check<T: Real, F: ScalarFn>(f: &F, inputs: &[Tensor<f64>], opts: Options) -> Vec<InputReport> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.cast())).collect();
    let out = f.eval(&mut g, &vars);
    let grads = g.backward(out);

    let mut reports = Vec::with_capacity(inputs.len());
    for (i, (&v, input)) in vars.iter().zip(inputs).enumerate() {
        let full: Vec<f64> = match grads.wrt(v) {
            Some(t) => t.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; input.len()],
        };
        let stride = input.len().div_ceil(opts.max_entries.max(1)).max(1);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut probe = inputs.to_vec();
        for idx in (0..input.len()).step_by(stride) {
            let orig = input.data()[idx];
            probe[i].data_mut()[idx] = orig + opts.step;
            let fp = eval_f64(f, &probe);
            probe[i].data_mut()[idx] = orig - opts.step;
            let fm = eval_f64(f, &probe);
            probe[i].data_mut()[idx] = orig;
            analytic.push(full[idx]);
            numeric.push((fp - fm) / (2.0 * opts.step));
        }
        let scale = analytic
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, x| m.max(x.abs()));
        let diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let rel_err = if scale == 0.0 { 0.0 } else { diff / scale };
        reports.push(InputReport {
            analytic,
            numeric,
            rel_err,
        });
    }
    reports
}

/// Largest relative error over all inputs.
pub fn max_rel_err<T: Real, F: ScalarFn>(f: &F, inputs: &[Tensor<f64>], opts: Options) -> f64 {
    check::<T, F>(f, inputs, opts)
        .iter()
        .fold(0.0, |m, r| m.max(r.rel_err))
}
