//! Differentiable operations. Each submodule adds constructors to [`Graph`] and the
//! matching backward rule.

mod conv;
mod elementwise;
mod loss;
mod norm;
mod shape;

use crate::graph::{GradSink, Graph, Var};
use crate::kernels::ConvGeom;
use crate::real::Real;
use crate::tensor::Tensor;

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MulChannel {
        s: Var,
        a: Var,
    },
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanBatch(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Diff {
        x: Var,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BceWithLogits {
        x: Var,
        target: Tensor<T>,
    },
    SoftmaxCrossEntropy {
        x: Var,
        target: Tensor<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Real> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(x, _) | Offset(x) | LeakyRelu(x, _) | Sigmoid(x) | Tanh(x) | Abs(x)
            | Square(x) | Sum(x) | Mean(x) | MeanBatch(x) | Reshape(x) => vec![*x],
            AddBias { x, bias } => vec![*x, *bias],
            MulChannel { s, a } => vec![*s, *a],
            Concat { parts } => parts.clone(),
            Narrow { x, .. } | Diff { x, .. } => vec![*x],
            Linear { x, w, b } | Conv2d { x, w, b, .. } | ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            BceWithLogits { x, .. } | SoftmaxCrossEntropy { x, .. } => vec![*x],
            Custom { inputs, .. } => inputs.clone(),
        }
    }

    pub(crate) fn backward(&self, g: &Graph<T>, out: Var, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        use Op::*;
        match self {
            Leaf => {}
            Add(..) | Sub(..) | Mul(..) | Scale(..) | Offset(..) | AddBias { .. }
            | MulChannel { .. } | LeakyRelu(..) | Sigmoid(..) | Tanh(..) | Abs(..) | Square(..)
            | Sum(..) | Mean(..) | MeanBatch(..) => {
                elementwise::backward(self, g, out, grad, sink)
            }
            Reshape(..) | Concat { .. } | Narrow { .. } | Diff { .. } => {
                shape::backward(self, g, out, grad, sink)
            }
            Linear { .. } | Conv2d { .. } | ConvTranspose2d { .. } => {
                conv::backward(self, g, out, grad, sink)
            }
            InstanceNorm { .. } => norm::backward(self, g, out, grad, sink),
            BceWithLogits { .. } | SoftmaxCrossEntropy { .. } => {
                loss::backward(self, g, out, grad, sink)
            }
            Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| g.value(v)).collect();
                let wants: Vec<bool> = inputs.iter().map(|&v| sink.wants(v)).collect();
                let grads = op.backward(&values, g.value(out), grad, &wants);
                assert_eq!(grads.len(), inputs.len(), "{}: wrong gradient count", op.name());
                for (&v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        assert_eq!(gi.shape(), g.shape(v), "{}: gradient shape", op.name());
                        sink.acc(v, gi);
                    }
                }
            }
        }
    }
}

/// A differentiable op defined outside this crate.
///
/// The forward value is computed by the caller and handed to [`Graph::custom`];
/// only the vector-Jacobian product lives here.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Returns one entry per input; `None` where `wants[i]` is false or the
    /// gradient is identically zero.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        wants: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

impl<T: Real> Graph<T> {
    /// Records a custom op whose forward `value` was computed from `inputs`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
