use super::{sigmoid, Op};
use crate::graph::{GradSink, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

fn same_shape<T: Real>(g: &Graph<T>, op: &str, a: Var, b: Var) {
    assert_eq!(
        g.shape(a),
        g.shape(b),
        "{op}: operand shapes differ ({:?} vs {:?})",
        g.shape(a),
        g.shape(b)
    );
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, "add", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, "sub", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, "mul", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s))
    }

    /// Adds a scalar constant.
    pub fn offset(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a + s);
        self.push(v, Op::Offset(x))
    }

    /// Adds `bias[c]` to every element of channel `c` of `x` (`[n, c, ...]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[1];
        assert_eq!(self.shape(bias), &[c], "add_bias: bias must have {c} entries");
        let inner: usize = shape[2..].iter().product();
        let mut v = self.value(x).clone();
        let b = self.value(bias).data();
        for (i, chunk) in v.data_mut().chunks_mut(inner).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|e| *e += bc);
        }
        self.push(v, Op::AddBias { x, bias })
    }

    /// `s` (`[n, 1, h, w]`) times every channel of `a` (`[n, c, h, w]`).
    pub fn mul_channel(&mut self, s: Var, a: Var) -> Var {
        let ss = self.shape(s).to_vec();
        let sa = self.shape(a).to_vec();
        assert!(
            ss.len() == 4 && sa.len() == 4 && ss[1] == 1 && ss[0] == sa[0] && ss[2..] == sa[2..],
            "mul_channel: shapes {ss:?} and {sa:?} do not broadcast"
        );
        let plane = sa[2] * sa[3];
        let c = sa[1];
        let sd = self.value(s).data();
        let mut v = self.value(a).clone();
        for (i, chunk) in v.data_mut().chunks_mut(plane).enumerate() {
            let n = i / c;
            let sp = &sd[n * plane..(n + 1) * plane];
            chunk.iter_mut().zip(sp).for_each(|(e, &m)| *e *= m);
        }
        self.push(v, Op::MulChannel { s, a })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self
            .value(x)
            .map(|a| if a > T::zero() { a } else { a * slope });
        self.push(v, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        self.push(v, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.abs());
        self.push(v, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x))
    }

    /// Mean over the leading axis; the result keeps a leading axis of size 1.
    pub fn mean_batch(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.dim(0);
        let per = t.len() / n;
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        let inv = T::one() / T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); per];
        for chunk in t.data().chunks(per) {
            out.iter_mut().zip(chunk).for_each(|(o, &c)| *o += c);
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let v = Tensor::new(&shape, out).unwrap();
        self.push(v, Op::MeanBatch(x))
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.square(d);
        self.mean(d)
    }
}

pub(super) fn backward<T: Real>(
    op: &Op<T>,
    g: &Graph<T>,
    out: Var,
    grad: &Tensor<T>,
    sink: &mut GradSink<T>,
) {
    let gd = grad.data();
    match *op {
        Op::Add(a, b) => {
            sink.acc(a, grad.clone());
            sink.acc(b, grad.clone());
        }
        Op::Sub(a, b) => {
            sink.acc(a, grad.clone());
            sink.acc(b, grad.map(|x| -x));
        }
        Op::Mul(a, b) => {
            if sink.wants(a) {
                sink.acc(a, grad.zip_map(g.value(b), |d, y| d * y));
            }
            if sink.wants(b) {
                sink.acc(b, grad.zip_map(g.value(a), |d, x| d * x));
            }
        }
        Op::Scale(x, s) => sink.acc(x, grad.map(|d| d * s)),
        Op::Offset(x) => sink.acc(x, grad.clone()),
        Op::AddBias { x, bias } => {
            sink.acc(x, grad.clone());
            let shape = g.shape(x);
            let c = shape[1];
            let inner: usize = shape[2..].iter().product();
            sink.acc_with(bias, &[c], |gb| {
                for (i, chunk) in gd.chunks(inner).enumerate() {
                    gb[i % c] += chunk.iter().copied().sum::<T>();
                }
            });
        }
        Op::MulChannel { s, a } => {
            let sa = g.shape(a);
            let (c, plane) = (sa[1], sa[2] * sa[3]);
            let sv = g.value(s).data();
            let av = g.value(a).data();
            if sink.wants(a) {
                sink.acc_with(a, sa, |ga| {
                    for (i, (gch, dch)) in ga.chunks_mut(plane).zip(gd.chunks(plane)).enumerate() {
                        let n = i / c;
                        let sp = &sv[n * plane..(n + 1) * plane];
                        for ((o, &d), &m) in gch.iter_mut().zip(dch).zip(sp) {
                            *o += d * m;
                        }
                    }
                });
            }
            if sink.wants(s) {
                sink.acc_with(s, g.shape(s), |gs| {
                    for (i, (dch, ach)) in gd.chunks(plane).zip(av.chunks(plane)).enumerate() {
                        let n = i / c;
                        let dst = &mut gs[n * plane..(n + 1) * plane];
                        for ((o, &d), &x) in dst.iter_mut().zip(dch).zip(ach) {
                            *o += d * x;
                        }
                    }
                });
            }
        }
        Op::LeakyRelu(x, slope) => {
            let t = grad.zip_map(g.value(x), |d, a| if a > T::zero() { d } else { d * slope });
            sink.acc(x, t);
        }
        Op::Sigmoid(x) => {
            let y = g.value(out);
            sink.acc(x, grad.zip_map(y, |d, s| d * s * (T::one() - s)));
        }
        Op::Tanh(x) => {
            let y = g.value(out);
            sink.acc(x, grad.zip_map(y, |d, t| d * (T::one() - t * t)));
        }
        Op::Abs(x) => {
            let t = grad.zip_map(g.value(x), |d, a| {
                if a > T::zero() {
                    d
                } else if a < T::zero() {
                    -d
                } else {
                    T::zero()
                }
            });
            sink.acc(x, t);
        }
        Op::Square(x) => {
            let two = T::lit(2.0);
            sink.acc(x, grad.zip_map(g.value(x), |d, a| two * a * d));
        }
        Op::Sum(x) => {
            let d = gd[0];
            sink.acc(x, Tensor::full(g.shape(x), d));
        }
        Op::Mean(x) => {
            let n = T::from_usize(g.value(x).len()).unwrap();
            sink.acc(x, Tensor::full(g.shape(x), gd[0] / n));
        }
        Op::MeanBatch(x) => {
            let shape = g.shape(x);
            let n = shape[0];
            let inv = T::one() / T::from_usize(n).unwrap();
            sink.acc_with(x, shape, |gx| {
                for chunk in gx.chunks_mut(gd.len()) {
                    chunk.iter_mut().zip(gd).for_each(|(o, &d)| *o += d * inv);
                }
            });
        }
        _ => unreachable!("not an elementwise op"),
    }
}
