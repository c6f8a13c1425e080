use super::{sigmoid, softplus, Op};
use crate::graph::{GradSink, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    /// Mean binary cross-entropy between `sigmoid(x)` and `target`, elementwise.
    pub fn bce_with_logits(&mut self, x: Var, target: Tensor<T>) -> Var {
        assert_eq!(self.shape(x), target.shape(), "bce_with_logits: target shape");
        let xv = self.value(x);
        // softplus(x) - x*z == -[z log s(x) + (1-z) log(1-s(x))]
        let total: T = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &z)| softplus(a) - a * z)
            .sum();
        let v = Tensor::scalar(total / T::from_usize(xv.len()).unwrap());
        self.push(v, Op::BceWithLogits { x, target })
    }

    /// Softmax cross-entropy of `x [n, k]` against target distributions, mean over `n`.
    pub fn softmax_cross_entropy(&mut self, x: Var, target: Tensor<T>) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() == 2, "softmax_cross_entropy expects [n, k] logits");
        assert_eq!(shape.as_slice(), target.shape(), "softmax_cross_entropy: target shape");
        let k = shape[1];
        let mut total = T::zero();
        for (row, z) in self.value(x).data().chunks(k).zip(target.data().chunks(k)) {
            let lse = log_sum_exp(row);
            total += row.iter().zip(z).map(|(&a, &zi)| zi * (lse - a)).sum::<T>();
        }
        let v = Tensor::scalar(total / T::from_usize(shape[0]).unwrap());
        self.push(v, Op::SoftmaxCrossEntropy { x, target })
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&a| (a - m).exp()).sum::<T>().ln()
}

pub(super) fn backward<T: Real>(
    op: &Op<T>,
    g: &Graph<T>,
    _out: Var,
    grad: &Tensor<T>,
    sink: &mut GradSink<T>,
) {
    let d = grad.data()[0];
    match op {
        Op::BceWithLogits { x, target } => {
            let xv = g.value(*x);
            let k = d / T::from_usize(xv.len()).unwrap();
            sink.acc_with(*x, xv.shape(), |gx| {
                for ((o, &a), &z) in gx.iter_mut().zip(xv.data()).zip(target.data()) {
                    *o += k * (sigmoid(a) - z);
                }
            });
        }
        Op::SoftmaxCrossEntropy { x, target } => {
            let xv = g.value(*x);
            let (n, kk) = (xv.dim(0), xv.dim(1));
            let scale = d / T::from_usize(n).unwrap();
            sink.acc_with(*x, xv.shape(), |gx| {
                for ((dst, row), z) in gx
                    .chunks_mut(kk)
                    .zip(xv.data().chunks(kk))
                    .zip(target.data().chunks(kk))
                {
                    let lse = log_sum_exp(row);
                    let mass: T = z.iter().copied().sum();
                    for ((o, &a), &zi) in dst.iter_mut().zip(row).zip(z) {
                        *o += scale * ((a - lse).exp() * mass - zi);
                    }
                }
            });
        }
        _ => unreachable!("not a loss op"),
    }
}
