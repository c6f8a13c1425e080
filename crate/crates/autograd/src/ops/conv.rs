use super::Op;
use crate::graph::{GradSink, Graph, Var};
use crate::kernels::{
    col2im, direct_conv, direct_conv_grad_w, direct_conv_grad_x, im2col, prefers_direct, swap_outer,
    ConvGeom,
};
use crate::real::Real;
use crate::tensor::Tensor;

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], inner: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(inner).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|e| *e += b);
    }
}

fn bias_grad<T: Real>(grad: &[T], c: usize, inner: usize, gb: &mut [T]) {
    for (i, chunk) in grad.chunks(inner).enumerate() {
        gb[i % c] += chunk.iter().copied().sum::<T>();
    }
}

impl<T: Real> Graph<T> {
    /// `x [n, in] @ w[out, in]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(
            xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1],
            "linear: input {xs:?} incompatible with weight {ws:?}"
        );
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * fout];
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[fout], "linear: bias shape");
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bd).for_each(|(o, &bv)| *o += bv);
            }
        }
        let v = Tensor::new(&[n, fout], out).unwrap();
        self.push(v, Op::Linear { x, w, b })
    }

    /// Cross-correlation with weight `[c_out, c_in, kh, kw]` and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(
            xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1],
            "conv2d: input {xs:?} incompatible with weight {ws:?}"
        );
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad);
        let co = ws[0];
        let opl = geom.oh * geom.ow;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); geom.n * co * opl];
        let in_len = geom.c * geom.h * geom.w;
        if prefers_direct(&geom, co) {
            direct_conv(xv, wv, &geom, co, &mut out);
        } else {
            for (s0, gb) in chunks(&geom) {
                let cols = im2col(&xv[s0 * in_len..(s0 + gb.n) * in_len], &gb);
                let mut mat = vec![T::zero(); co * gb.cols()];
                T::gemm(co, gb.k(), gb.cols(), T::one(), wv, false, &cols, false, T::zero(), &mut mat);
                let dst = &mut out[s0 * co * opl..(s0 + gb.n) * co * opl];
                dst.copy_from_slice(&swap_outer(&mat, co, gb.n, opl));
            }
        }
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[co], "conv2d: bias shape");
            add_channel_bias(&mut out, self.value(b).data(), opl);
        }
        let v = Tensor::new(&[geom.n, co, geom.oh, geom.ow], out).unwrap();
        self.push(v, Op::Conv2d { x, w, b, geom })
    }

    /// Transposed convolution with weight `[c_in, c_out, kh, kw]`; output side
    /// `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(
            xs.len() == 4 && ws.len() == 4 && xs[1] == ws[0],
            "conv_transpose2d: input {xs:?} incompatible with weight {ws:?}"
        );
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[1], ws[2], ws[3]);
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (wd - 1) * stride + kw - 2 * pad;
        // geometry of the forward conv this op is the adjoint of
        let geom = ConvGeom::new(n, co, oh, ow, kh, kw, stride, pad);
        assert_eq!((geom.oh, geom.ow), (h, wd), "conv_transpose2d: inconsistent geometry");
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let hw = h * wd;
        let out_len = co * oh * ow;
        let mut out = vec![T::zero(); n * out_len];
        for (s0, gb) in chunks(&geom) {
            let xmat = swap_outer(&xv[s0 * ci * hw..(s0 + gb.n) * ci * hw], gb.n, ci, hw);
            let mut cols = vec![T::zero(); gb.k() * gb.cols()];
            T::gemm(gb.k(), ci, gb.cols(), T::one(), wv, true, &xmat, false, T::zero(), &mut cols);
            col2im(&cols, &gb, &mut out[s0 * out_len..(s0 + gb.n) * out_len]);
        }
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[co], "conv_transpose2d: bias shape");
            add_channel_bias(&mut out, self.value(b).data(), oh * ow);
        }
        let v = Tensor::new(&[n, co, oh, ow], out).unwrap();
        self.push(v, Op::ConvTranspose2d { x, w, b, geom })
    }
}

/// Column-matrix entries per chunk; keeps the unfolded input cache-sized.
const CHUNK_ELEMS: usize = 1 << 18;

/// Splits the batch into runs of samples whose column matrix stays near
/// `CHUNK_ELEMS`; yields `(first sample, geometry of the run)`.
fn chunks(geom: &ConvGeom) -> impl Iterator<Item = (usize, ConvGeom)> + '_ {
    let per_sample = geom.k() * geom.oh * geom.ow;
    let step = (CHUNK_ELEMS / per_sample.max(1)).clamp(1, geom.n.max(1));
    (0..geom.n).step_by(step).map(move |s0| {
        let mut g = *geom;
        g.n = step.min(geom.n - s0);
        (s0, g)
    })
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
        Op::Linear { x, w, b } => {
            let (n, fin) = (g.shape(*x)[0], g.shape(*x)[1]);
            let fout = g.shape(*w)[0];
            if sink.wants(*x) {
                let wv = g.value(*w).data();
                sink.acc_with(*x, &[n, fin], |gx| {
                    T::gemm(n, fout, fin, T::one(), gd, false, wv, false, T::one(), gx);
                });
            }
            if sink.wants(*w) {
                let xv = g.value(*x).data();
                sink.acc_with(*w, &[fout, fin], |gw| {
                    T::gemm(fout, n, fin, T::one(), gd, true, xv, false, T::one(), gw);
                });
            }
            if let Some(b) = b {
                sink.acc_with(*b, &[fout], |gb| bias_grad(gd, fout, 1, gb));
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let co = g.shape(*w)[0];
            let opl = geom.oh * geom.ow;
            let in_len = geom.c * geom.h * geom.w;
            let (need_x, need_w) = (sink.wants(*x), sink.wants(*w));
            if need_x || need_w {
                let xv = g.value(*x).data();
                let wv = g.value(*w).data();
                let mut gw = need_w.then(|| vec![T::zero(); wv.len()]);
                let mut gx = need_x.then(|| vec![T::zero(); xv.len()]);
                let direct = prefers_direct(geom, co);
                if direct {
                    if let Some(gw) = gw.as_mut() {
                        direct_conv_grad_w(gd, xv, geom, co, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        direct_conv_grad_x(gd, wv, geom, co, gx);
                    }
                }
                for (s0, gb) in chunks(geom).filter(|_| !direct) {
                    let gmat = swap_outer(&gd[s0 * co * opl..(s0 + gb.n) * co * opl], gb.n, co, opl);
                    if let Some(gw) = gw.as_mut() {
                        let cols = im2col(&xv[s0 * in_len..(s0 + gb.n) * in_len], &gb);
                        T::gemm(co, gb.cols(), gb.k(), T::one(), &gmat, false, &cols, true, T::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut gcols = vec![T::zero(); gb.k() * gb.cols()];
                        T::gemm(gb.k(), co, gb.cols(), T::one(), wv, true, &gmat, false, T::zero(), &mut gcols);
                        col2im(&gcols, &gb, &mut gx[s0 * in_len..(s0 + gb.n) * in_len]);
                    }
                }
                if let Some(gw) = gw {
                    sink.acc(*w, Tensor::new(g.shape(*w), gw).unwrap());
                }
                if let Some(gx) = gx {
                    sink.acc(*x, Tensor::new(g.shape(*x), gx).unwrap());
                }
            }
            if let Some(b) = b {
                sink.acc_with(*b, &[co], |gb| bias_grad(gd, co, opl, gb));
            }
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let xs = g.shape(*x);
            let (ci, hw) = (xs[1], xs[2] * xs[3]);
            let co = geom.c;
            let out_len = co * geom.h * geom.w;
            let (need_x, need_w) = (sink.wants(*x), sink.wants(*w));
            if need_x || need_w {
                let xv = g.value(*x).data();
                let wv = g.value(*w).data();
                let mut gw = need_w.then(|| vec![T::zero(); wv.len()]);
                let mut gx = need_x.then(|| vec![T::zero(); xv.len()]);
                for (s0, gb) in chunks(geom) {
                    let gcols = im2col(&gd[s0 * out_len..(s0 + gb.n) * out_len], &gb);
                    if let Some(gx) = gx.as_mut() {
                        let mut gxmat = vec![T::zero(); ci * gb.n * hw];
                        T::gemm(ci, gb.k(), gb.n * hw, T::one(), wv, false, &gcols, false, T::zero(), &mut gxmat);
                        gx[s0 * ci * hw..(s0 + gb.n) * ci * hw].copy_from_slice(&swap_outer(&gxmat, ci, gb.n, hw));
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xmat = swap_outer(&xv[s0 * ci * hw..(s0 + gb.n) * ci * hw], gb.n, ci, hw);
                        T::gemm(ci, gb.n * hw, gb.k(), T::one(), &xmat, false, &gcols, true, T::one(), gw);
                    }
                }
                if let Some(gw) = gw {
                    sink.acc(*w, Tensor::new(g.shape(*w), gw).unwrap());
                }
                if let Some(gx) = gx {
                    sink.acc(*x, Tensor::new(xs, gx).unwrap());
                }
            }
            if let Some(b) = b {
                sink.acc_with(*b, &[co], |gb| bias_grad(gd, co, geom.h * geom.w, gb));
            }
        }
        _ => unreachable!("not a linear/conv op"),
    }
}
