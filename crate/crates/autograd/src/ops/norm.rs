use super::Op;
use crate::graph::{GradSink, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    /// Per-sample, per-channel normalization over the spatial plane followed by a
    /// channel-wise affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "instance_norm expects NCHW input");
        let c = shape[1];
        assert_eq!(self.shape(gamma), &[c], "instance_norm: gamma shape");
        assert_eq!(self.shape(beta), &[c], "instance_norm: beta shape");
        let plane = shape[2] * shape[3];
        let m = T::from_usize(plane).unwrap();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / plane);
        let mut out = vec![T::zero(); xv.len()];
        for (i, ((src, xh), dst)) in xv
            .chunks(plane)
            .zip(xhat.chunks_mut(plane))
            .zip(out.chunks_mut(plane))
            .enumerate()
        {
            let mean = src.iter().copied().sum::<T>() / m;
            let var = src.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / m;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let (gc, bc) = (gv[i % c], bv[i % c]);
            for ((&a, h), o) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                *h = (a - mean) * is;
                *o = gc * *h + bc;
            }
        }
        let v = Tensor::new(&shape, out).unwrap();
        self.push(
            v,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }
}

pub(super) fn backward<T: Real>(
    op: &Op<T>,
    g: &Graph<T>,
    _out: Var,
    grad: &Tensor<T>,
    sink: &mut GradSink<T>,
) {
    let Op::InstanceNorm {
        x,
        gamma,
        beta,
        xhat,
        inv_std,
    } = op
    else {
        unreachable!("not instance norm")
    };
    let shape = g.shape(*x);
    let c = shape[1];
    let plane = shape[2] * shape[3];
    let gd = grad.data();
    if sink.wants(*gamma) {
        sink.acc_with(*gamma, &[c], |gg| {
            for (i, (d, h)) in gd.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                gg[i % c] += d.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>();
            }
        });
    }
    if sink.wants(*beta) {
        sink.acc_with(*beta, &[c], |gb| {
            for (i, d) in gd.chunks(plane).enumerate() {
                gb[i % c] += d.iter().copied().sum::<T>();
            }
        });
    }
    if sink.wants(*x) {
        let gv = g.value(*gamma).data();
        let m = T::from_usize(plane).unwrap();
        sink.acc_with(*x, shape, |gx| {
            for (i, ((d, h), dst)) in gd
                .chunks(plane)
                .zip(xhat.chunks(plane))
                .zip(gx.chunks_mut(plane))
                .enumerate()
            {
                let gc = gv[i % c];
                let sum_d: T = d.iter().copied().sum::<T>() * gc;
                let sum_dh: T = d.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() * gc;
                let k = inv_std[i] / m;
                for ((o, &dv), &hv) in dst.iter_mut().zip(d).zip(h) {
                    *o += k * (m * dv * gc - sum_d - hv * sum_dh);
                }
            }
        });
    }
}
