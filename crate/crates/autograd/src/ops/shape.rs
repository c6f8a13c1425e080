use super::Op;
use crate::graph::{GradSink, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Real> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.push(v, Op::Reshape(x))
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len() && s[0] == first[0] && s[2..] == first[2..],
                "concat: shape {s:?} incompatible with {first:?}"
            );
            total += s[1];
        }
        let (outer, _, inner) = split(&first, 1);
        let mut shape = first.clone();
        shape[1] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.dim(1) * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let v = Tensor::new(&shape, data).unwrap();
        self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    /// Slice `start..start+len` of axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(
            start + len <= shape[1],
            "narrow: {start}+{len} exceeds axis of size {}",
            shape[1]
        );
        let (outer, full, inner) = split(&shape, 1);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[1] = len;
        let v = Tensor::new(&out_shape, data).unwrap();
        self.push(v, Op::Narrow { x, start })
    }

    /// Forward differences `x[i+1] - x[i]` along `axis`; that axis shrinks by one.
    pub fn diff(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(shape[axis] >= 2, "diff: axis {axis} has length < 2");
        let (outer, len, inner) = split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (len - 1) * inner);
        for o in 0..outer {
            for i in 0..len - 1 {
                let a = (o * len + i) * inner;
                let b = a + inner;
                data.extend(src[b..b + inner].iter().zip(&src[a..a + inner]).map(|(&p, &q)| p - q));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] -= 1;
        let v = Tensor::new(&out_shape, data).unwrap();
        self.push(v, Op::Diff { x, axis })
    }
}

pub(super) fn backward<T: Real>(
    op: &Op<T>,
    g: &Graph<T>,
    _out: Var,
    grad: &Tensor<T>,
    sink: &mut GradSink<T>,
) {
    let gd = grad.data();
    match op {
        Op::Reshape(x) => {
            let t = grad.clone().reshape(g.shape(*x)).unwrap();
            sink.acc(*x, t);
        }
        Op::Concat { parts } => {
            let (outer, total, inner) = split(grad.shape(), 1);
            let mut offset = 0;
            for &p in parts {
                let c = g.shape(p)[1];
                if sink.wants(p) {
                    sink.acc_with(p, g.shape(p), |gp| {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + c) * inner];
                            let dst = &mut gp[o * c * inner..(o + 1) * c * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    });
                }
                offset += c;
            }
        }
        Op::Narrow { x, start } => {
            let shape = g.shape(*x);
            let (outer, full, inner) = split(shape, 1);
            let len = grad.dim(1);
            sink.acc_with(*x, shape, |gx| {
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let dst = &mut gx[base..base + len * inner];
                    let src = &gd[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            });
        }
        Op::Diff { x, axis } => {
            let shape = g.shape(*x);
            let (outer, len, inner) = split(shape, *axis);
            sink.acc_with(*x, shape, |gx| {
                for o in 0..outer {
                    for i in 0..len - 1 {
                        let src = &gd[(o * (len - 1) + i) * inner..(o * (len - 1) + i + 1) * inner];
                        let a = (o * len + i) * inner;
                        for (k, &d) in src.iter().enumerate() {
                            gx[a + inner + k] += d;
                            gx[a + k] -= d;
                        }
                    }
                }
            });
        }
        _ => unreachable!("not a shape op"),
    }
}
