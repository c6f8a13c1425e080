//! Deformation parameterisation and differentiable warping.
//!
//! Grids are stored channel-first as `[n, 2, h, w]`: channel 0 holds the
//! normalised x sampling coordinate, channel 1 the y coordinate, both in
//! `[-1, 1]` with the align-corners convention (`-1` is the first pixel centre,
//! `+1` the last).
//!
//! A deformation decoder emits per-pixel increments. Integrating them along
//! rows (x) and columns (y) and min-max normalising gives a grid that is
//! strictly monotone along each axis and always spans the full texture.

use tdbgan_autograd::{CustomOp, Graph, Real, Tensor, Var};

use crate::error::{check_shape, invalid, Error, Result};

/// Floor applied to raw increments before integration.
pub const INCREMENT_FLOOR: f64 = 1e-8;

/// Raw per-pixel increments, `[n, 2, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<T>(Tensor<T>);

impl<T: Real> DeformationField<T> {
    pub fn new(increments: Tensor<T>) -> Result<Self> {
        let s = increments.shape();
        if s.len() != 4 || s[1] != 2 || s[2] < 2 || s[3] < 2 {
            return Err(invalid(
                "deformation field",
                format!("expected [n, 2, h>=2, w>=2], got {s:?}"),
            ));
        }
        if !increments.all_finite() {
            return Err(invalid("deformation field", "non-finite increment"));
        }
        Ok(Self(increments))
    }

    pub fn increments(&self) -> &Tensor<T> {
        &self.0
    }
}

/// A validated sampling grid, `[n, 2, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpGrid<T>(Tensor<T>);

impl<T: Real> WarpGrid<T> {
    /// Checks range, strict monotonicity and the `-1`/`+1` endpoints.
    pub fn new(coords: Tensor<T>) -> Result<Self> {
        validate_grid(&coords, T::lit(1e-5))?;
        Ok(Self(coords))
    }

    pub fn identity(n: usize, h: usize, w: usize) -> Self {
        Self(identity_grid(n, h, w))
    }

    pub fn coords(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_coords(self) -> Tensor<T> {
        self.0
    }

    /// `(x, y)` sampling coordinate of output pixel `(row, col)` of sample `n`.
    pub fn at(&self, n: usize, row: usize, col: usize) -> (T, T) {
        let s = self.0.shape();
        let (h, w) = (s[2], s[3]);
        let base = n * 2 * h * w + row * w + col;
        (self.0.data()[base], self.0.data()[base + h * w])
    }
}

/// Checks the grid invariants with tolerance `tol` on range and endpoints.
pub fn validate_grid<T: Real>(coords: &Tensor<T>, tol: T) -> Result<()> {
    let s = coords.shape();
    if s.len() != 4 || s[1] != 2 || s[2] < 2 || s[3] < 2 {
        return Err(invalid("warp grid", format!("expected [n, 2, h>=2, w>=2], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let d = coords.data();
    let one = T::one();
    for b in 0..n {
        let xs = &d[(b * 2) * h * w..(b * 2 + 1) * h * w];
        let ys = &d[(b * 2 + 1) * h * w..(b * 2 + 2) * h * w];
        for v in xs.iter().chain(ys) {
            if !v.is_finite() || *v < -one - tol || *v > one + tol {
                return Err(invalid("warp grid", format!("coordinate {v} outside [-1, 1]")));
            }
        }
        for i in 0..h {
            let row = &xs[i * w..(i + 1) * w];
            if (row[0] + one).abs() > tol || (row[w - 1] - one).abs() > tol {
                return Err(invalid("warp grid", format!("row {i} does not span [-1, 1]")));
            }
            if row.windows(2).any(|p| p[1] <= p[0]) {
                return Err(invalid("warp grid", format!("x not increasing along row {i}")));
            }
        }
        for j in 0..w {
            let col: Vec<T> = (0..h).map(|i| ys[i * w + j]).collect();
            if (col[0] + one).abs() > tol || (col[h - 1] - one).abs() > tol {
                return Err(invalid("warp grid", format!("column {j} does not span [-1, 1]")));
            }
            if col.windows(2).any(|p| p[1] <= p[0]) {
                return Err(invalid("warp grid", format!("y not increasing along column {j}")));
            }
        }
    }
    Ok(())
}

/// Normalised coordinate of pixel `i` of `len`.
#[inline]
fn lin<T: Real>(i: usize, len: usize) -> T {
    if len <= 1 {
        return T::zero();
    }
    T::lit(-1.0 + 2.0 * i as f64 / (len - 1) as f64)
}

/// The identity sampling grid, `[n, 2, h, w]`.
pub fn identity_grid<T: Real>(n: usize, h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        for _ in 0..h {
            data.extend((0..w).map(|j| lin::<T>(j, w)));
        }
        for i in 0..h {
            data.extend(std::iter::repeat_n(lin::<T>(i, h), w));
        }
    }
    Tensor::new(&[n, 2, h, w], data).unwrap()
}

/// `2 x 3` affine map `(x, y) -> (a x + b y + t, c x + d y + u)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.matrix
            .iter()
            .flatten()
            .zip(other.matrix.iter().flatten())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

// ---------------------------------------------------------------------------
// Integration of increments

struct Integrate<T> {
    eps: T,
}

/// Visits every integration line of a `[n, 2, h, w]` tensor as `(start, stride, len)`.
fn for_each_line(shape: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let plane = h * w;
    for b in 0..n {
        let xs = b * 2 * plane;
        for i in 0..h {
            f(xs + i * w, 1, w);
        }
        let ys = xs + plane;
        for j in 0..w {
            f(ys + j, w, h);
        }
    }
}

fn integrate_forward<T: Real>(raw: &Tensor<T>, eps: T) -> Tensor<T> {
    let src = raw.data();
    let eps = eps.as_f64();
    let mut out = vec![T::zero(); src.len()];
    let mut acc = Vec::new();
    for_each_line(raw.shape(), |start, stride, len| {
        // cumulative sum relative to the first entry, so c - c_min starts at 0;
        // accumulated in f64 so single-precision grids stay accurate
        acc.clear();
        acc.push(0.0f64);
        for k in 1..len {
            let prev = acc[k - 1];
            acc.push(prev + src[start + k * stride].as_f64().max(eps));
        }
        let total = acc[len - 1];
        for k in 0..len - 1 {
            out[start + k * stride] = T::lit(-1.0 + 2.0 * acc[k] / total);
        }
        out[start + (len - 1) * stride] = T::one();
    });
    Tensor::new(raw.shape(), out).unwrap()
}

impl<T: Real> CustomOp<T> for Integrate<T> {
    fn name(&self) -> &'static str {
        "integrate_deformation"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        wants: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        if !wants[0] {
            return vec![None];
        }
        let raw = inputs[0].data();
        let coords = output.data();
        let gd = grad.data();
        let mut gx = vec![T::zero(); raw.len()];
        let (two, half) = (T::lit(2.0), T::lit(0.5));
        for_each_line(inputs[0].shape(), |start, stride, len| {
            let mut total = T::zero();
            for k in 1..len {
                total += raw[start + k * stride].max(self.eps);
            }
            // sum_k g_k * u_k / L, with u_k / L = (coord_k + 1) / 2
            let mut weighted = T::zero();
            for k in 0..len {
                let idx = start + k * stride;
                weighted += gd[idx] * (coords[idx] + T::one()) * half;
            }
            let mut suffix = T::zero();
            for k in (1..len).rev() {
                let idx = start + k * stride;
                suffix += gd[idx];
                if raw[idx] > self.eps {
                    gx[idx] = two / total * (suffix - weighted);
                }
            }
        });
        vec![Some(Tensor::new(inputs[0].shape(), gx).unwrap())]
    }
}

/// Integrates raw increments (`[n, 2, h, w]`) into a sampling grid.
pub fn integrate<T: Real>(g: &mut Graph<T>, increments: Var) -> Var {
    let s = g.shape(increments);
    assert!(
        s.len() == 4 && s[1] == 2 && s[2] >= 2 && s[3] >= 2,
        "integrate: expected [n, 2, h>=2, w>=2], got {s:?}"
    );
    let eps = T::lit(INCREMENT_FLOOR);
    let value = integrate_forward(g.value(increments), eps);
    g.custom(&[increments], value, Box::new(Integrate { eps }))
}

pub fn integrate_deformation<T: Real>(field: &DeformationField<T>) -> WarpGrid<T> {
    WarpGrid(integrate_forward(field.increments(), T::lit(INCREMENT_FLOOR)))
}

// ---------------------------------------------------------------------------
// Bilinear sampling

struct GridSample;

/// Sampling position of one normalised coordinate: `(i0, i1, frac, d_pos/d_coord)`.
/// The derivative is zero where the coordinate is clamped to the border.
#[inline]
fn locate<T: Real>(coord: T, len: usize) -> (usize, usize, T, T) {
    let span = T::from_usize(len - 1).unwrap();
    let half = T::lit(0.5);
    let pos = (coord + T::one()) * half * span;
    let (pos, slope) = if pos < T::zero() {
        (T::zero(), T::zero())
    } else if pos > span {
        (span, T::zero())
    } else {
        (pos, half * span)
    };
    let i0 = pos.floor().to_usize().unwrap().min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, pos - T::from_usize(i0).unwrap(), slope)
}

fn grid_sample_forward<T: Real>(img: &Tensor<T>, grid: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (img.dim(0), img.dim(1), img.dim(2), img.dim(3));
    let (oh, ow) = (grid.dim(2), grid.dim(3));
    let (src, gd) = (img.data(), grid.data());
    let mut out = vec![T::zero(); n * c * oh * ow];
    let one = T::one();
    for b in 0..n {
        let gx = &gd[b * 2 * oh * ow..(b * 2 + 1) * oh * ow];
        let gy = &gd[(b * 2 + 1) * oh * ow..(b * 2 + 2) * oh * ow];
        for p in 0..oh * ow {
            let (x0, x1, fx, _) = locate(gx[p], w);
            let (y0, y1, fy, _) = locate(gy[p], h);
            let (w00, w01) = ((one - fx) * (one - fy), fx * (one - fy));
            let (w10, w11) = ((one - fx) * fy, fx * fy);
            for ch in 0..c {
                let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                out[(b * c + ch) * oh * ow + p] = w00 * plane[y0 * w + x0]
                    + w01 * plane[y0 * w + x1]
                    + w10 * plane[y1 * w + x0]
                    + w11 * plane[y1 * w + x1];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out).unwrap()
}

impl<T: Real> CustomOp<T> for GridSample {
    fn name(&self) -> &'static str {
        "grid_sample"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        wants: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (img, grid) = (inputs[0], inputs[1]);
        let (n, c, h, w) = (img.dim(0), img.dim(1), img.dim(2), img.dim(3));
        let (oh, ow) = (grid.dim(2), grid.dim(3));
        let (src, gd, dy) = (img.data(), grid.data(), grad.data());
        let mut gimg = wants[0].then(|| vec![T::zero(); src.len()]);
        let mut ggrid = wants[1].then(|| vec![T::zero(); gd.len()]);
        let one = T::one();
        for b in 0..n {
            let off_x = b * 2 * oh * ow;
            let off_y = off_x + oh * ow;
            for p in 0..oh * ow {
                let (x0, x1, fx, sx) = locate(gd[off_x + p], w);
                let (y0, y1, fy, sy) = locate(gd[off_y + p], h);
                let mut dgx = T::zero();
                let mut dgy = T::zero();
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    let d = dy[(b * c + ch) * oh * ow + p];
                    let (v00, v01) = (src[base + y0 * w + x0], src[base + y0 * w + x1]);
                    let (v10, v11) = (src[base + y1 * w + x0], src[base + y1 * w + x1]);
                    if let Some(gi) = gimg.as_mut() {
                        gi[base + y0 * w + x0] += d * (one - fx) * (one - fy);
                        gi[base + y0 * w + x1] += d * fx * (one - fy);
                        gi[base + y1 * w + x0] += d * (one - fx) * fy;
                        gi[base + y1 * w + x1] += d * fx * fy;
                    }
                    dgx += d * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                    dgy += d * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                if let Some(gg) = ggrid.as_mut() {
                    gg[off_x + p] += dgx * sx;
                    gg[off_y + p] += dgy * sy;
                }
            }
        }
        vec![
            gimg.map(|d| Tensor::new(img.shape(), d).unwrap()),
            ggrid.map(|d| Tensor::new(grid.shape(), d).unwrap()),
        ]
    }
}

/// Bilinear sampling of `image` (`[n, c, h, w]`) at `grid` (`[n, 2, oh, ow]`), with
/// border replication outside `[-1, 1]`.
pub fn warp<T: Real>(g: &mut Graph<T>, image: Var, grid: Var) -> Var {
    let (is, gs) = (g.shape(image), g.shape(grid));
    assert!(
        is.len() == 4 && gs.len() == 4 && gs[1] == 2 && is[0] == gs[0],
        "warp: image {is:?} incompatible with grid {gs:?}"
    );
    let value = grid_sample_forward(g.value(image), g.value(grid));
    g.custom(&[image, grid], value, Box::new(GridSample))
}

/// Warps an image or texture batch; the grid must match its resolution.
pub fn warp_image<T: Real>(image: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let is = image.shape();
    if is.len() != 4 {
        return Err(invalid("image", format!("expected [n, c, h, w], got {is:?}")));
    }
    check_shape("warp_image", &[is[0], 2, is[2], is[3]], grid.shape())?;
    Ok(grid_sample_forward(image, grid))
}

// ---------------------------------------------------------------------------
// Regularisers

/// `lambda1 * sum |forward differences|` of both coordinate channels along x and y.
pub fn smoothness<T: Real>(g: &mut Graph<T>, grid: Var, lambda1: T) -> Var {
    let dx = g.diff(grid, 3);
    let dy = g.diff(grid, 2);
    let ax = g.abs(dx);
    let ay = g.abs(dy);
    let sx = g.sum(ax);
    let sy = g.sum(ay);
    let s = g.add(sx, sy);
    g.scale(s, lambda1)
}

pub fn smoothness_loss<T: Real>(grid: &Tensor<T>, lambda1: f64) -> T {
    let mut g = Graph::new();
    let v = g.input(grid.clone());
    let l = smoothness(&mut g, v, T::lit(lambda1));
    g.value(l).item()
}

struct FitAffine<T> {
    pinv: Vec<T>,
}

/// Least-squares projector from a coordinate channel onto `(a, b, t)` for the
/// identity-grid design `[x, y, 1]`. The identity coordinates are symmetric about
/// zero, so the normal matrix is diagonal.
fn affine_projector<T: Real>(h: usize, w: usize) -> Vec<T> {
    let sxx: f64 = (0..w).map(|j| lin::<f64>(j, w).powi(2)).sum::<f64>() * h as f64;
    let syy: f64 = (0..h).map(|i| lin::<f64>(i, h).powi(2)).sum::<f64>() * w as f64;
    let hw = (h * w) as f64;
    let mut p = vec![T::zero(); 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            p[k] = T::lit(lin::<f64>(j, w) / sxx);
            p[h * w + k] = T::lit(lin::<f64>(i, h) / syy);
            p[2 * h * w + k] = T::lit(1.0 / hw);
        }
    }
    p
}

fn fit_affine_forward<T: Real>(grid: &Tensor<T>, pinv: &[T]) -> Tensor<T> {
    let (n, h, w) = (grid.dim(0), grid.dim(2), grid.dim(3));
    let plane = h * w;
    let mut out = vec![T::zero(); n * 6];
    for (b, chunk) in grid.data().chunks(plane).enumerate() {
        for r in 0..3 {
            let row = &pinv[r * plane..(r + 1) * plane];
            out[b * 3 + r] = row.iter().zip(chunk).map(|(&p, &c)| p * c).sum();
        }
    }
    Tensor::new(&[n, 2, 3], out).unwrap()
}

impl<T: Real> CustomOp<T> for FitAffine<T> {
    fn name(&self) -> &'static str {
        "fit_affine"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        wants: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        if !wants[0] {
            return vec![None];
        }
        let grid = inputs[0];
        let plane = grid.dim(2) * grid.dim(3);
        let mut gx = vec![T::zero(); grid.len()];
        for (b, chunk) in gx.chunks_mut(plane).enumerate() {
            for r in 0..3 {
                let d = grad.data()[b * 3 + r];
                let row = &self.pinv[r * plane..(r + 1) * plane];
                chunk.iter_mut().zip(row).for_each(|(o, &p)| *o += d * p);
            }
        }
        vec![Some(Tensor::new(grid.shape(), gx).unwrap())]
    }
}

/// Per-sample least-squares affine fit, `[n, 2, 3]`.
pub fn fit_affine_var<T: Real>(g: &mut Graph<T>, grid: Var) -> Var {
    let s = g.shape(grid);
    assert!(s.len() == 4 && s[1] == 2, "fit_affine: expected [n, 2, h, w], got {s:?}");
    let pinv = affine_projector::<T>(s[2], s[3]);
    let value = fit_affine_forward(g.value(grid), &pinv);
    g.custom(&[grid], value, Box::new(FitAffine { pinv }))
}

/// Least-squares affine fit of each grid in the batch.
pub fn fit_affine<T: Real>(grid: &Tensor<T>) -> Result<Vec<AffineTransform>> {
    let s = grid.shape();
    if s.len() != 4 || s[1] != 2 || s[2] < 2 || s[3] < 2 {
        return Err(invalid("warp grid", format!("expected [n, 2, h>=2, w>=2], got {s:?}")));
    }
    let pinv = affine_projector::<T>(s[2], s[3]);
    let fitted = fit_affine_forward(grid, &pinv);
    Ok(fitted
        .data()
        .chunks(6)
        .map(|m| {
            let f = |i: usize| m[i].as_f64();
            AffineTransform {
                matrix: [[f(0), f(1), f(2)], [f(3), f(4), f(5)]],
            }
        })
        .collect())
}

/// `lambda2 * |S_A - S_0|_F^2 + lambda2' * mean((W_bar - W_0)^2)` over a batch of grids.
pub fn bias_reduce<T: Real>(g: &mut Graph<T>, grids: Var, lambda2: T, lambda2p: T) -> Var {
    let s = g.shape(grids).to_vec();
    let affine = fit_affine_var(g, grids);
    let mean_affine = g.mean_batch(affine);
    let ident = Tensor::new(
        &[1, 2, 3],
        [1.0, 0.0, 0.0, 0.0, 1.0, 0.0].map(T::lit).to_vec(),
    )
    .unwrap();
    let ident = g.input(ident);
    let da = g.sub(mean_affine, ident);
    let da = g.square(da);
    let ta = g.sum(da);
    let ta = g.scale(ta, lambda2);

    let mean_grid = g.mean_batch(grids);
    let w0 = g.input(identity_grid(1, s[2], s[3]));
    let dw = g.sub(mean_grid, w0);
    let dw = g.square(dw);
    let tw = g.mean(dw);
    let tw = g.scale(tw, lambda2p);
    g.add(ta, tw)
}

pub fn bias_reduce_loss<T: Real>(grids: &Tensor<T>, lambda2: f64, lambda2p: f64) -> Result<T> {
    let s = grids.shape();
    if s.first() == Some(&0) {
        return Err(Error::EmptySpec("bias_reduce_loss needs a non-empty batch".into()));
    }
    if s.len() != 4 || s[1] != 2 || s[2] < 2 || s[3] < 2 {
        return Err(invalid("warp grid", format!("expected [n, 2, h>=2, w>=2], got {s:?}")));
    }
    let mut g = Graph::new();
    let v = g.input(grids.clone());
    let l = bias_reduce(&mut g, v, T::lit(lambda2), T::lit(lambda2p));
    Ok(g.value(l).item())
}
